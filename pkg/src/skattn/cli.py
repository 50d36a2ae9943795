"""Command-line surface tying every mechanism to a runnable subcommand.

Subcommands: train, reenact, bench-attn, grad-check, raster-golden,
self-test.  Exit codes: 0 success, 1 a check or run failed, 2 invalid
arguments (including unreadable config/weight paths).  The environment
variable SKATTN_SEED overrides the config seed; an explicit --seed flag
overrides both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from skattn import attention as attn
from skattn import pngio, pose
from skattn.archive import load_weights, save_weights
from skattn.autodiff import constant, permute, reshape
from skattn.checks import gradient_suite, self_test
from skattn.config import Config
from skattn.metrics import psnr, ssim
from skattn.synth import make_sample, synth_clip, synth_dataset
from skattn.unet import build_model
from skattn.video import sample_conditions, stage1_generate, stage2_generate

__all__ = ["cli_run", "main"]


class UsageError(Exception):
    """Bad inputs on the command line: missing/unreadable files, bad configs."""


def _resolve_seed(cfg: Config, cli_seed: int | None) -> int:
    seed = cfg.seed
    env = os.environ.get("SKATTN_SEED")
    if env is not None:
        seed = int(env)
    if cli_seed is not None:
        seed = cli_seed
    return seed


def _smoothed(values, span: int = 50) -> float:
    tail = values[-span:]
    return float(np.mean(tail))


# ---------------------------------------------------------------------------
# train


def _cmd_train(args) -> int:
    if args.print_config:
        sys.stdout.write(Config().to_json())
        return 0
    try:
        cfg = Config.from_json(Path(args.config).read_text()) if args.config else Config()
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load config {args.config}: {exc}") from exc
    cfg = dataclasses.replace(cfg, seed=_resolve_seed(cfg, args.seed))
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train_steps=args.steps)
    cfg.validate()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = synth_dataset(args.samples, seed=cfg.seed, cfg=cfg)
    model = build_model(cfg)

    from skattn.diffusion import Trainer, pretrain_base

    pre_losses = pretrain_base(model, dataset, seed=cfg.seed)
    if pre_losses:
        print(
            f"pretrained base {len(pre_losses)} steps:"
            f" loss {pre_losses[0]:.4f} -> {_smoothed(pre_losses):.4f}"
        )
    trainer = Trainer(model, dataset, seed=cfg.seed)
    records = trainer.run(cfg.train_steps, log_path=out / "loss.csv")
    save_weights(model.store, out / "weights.bin", meta={"config": json.loads(cfg.to_json())})
    (out / "config.json").write_text(cfg.to_json())

    first, last = records[0].loss_total, _smoothed([r.loss_total for r in records])
    print(f"trained adapters {len(records)} steps on {len(dataset)} samples (seed {cfg.seed})")
    print(f"loss step0 {first:.4f} -> smoothed {last:.4f} (x{last / first:.3f})")
    print(f"wrote {out / 'weights.bin'}, {out / 'loss.csv'}, {out / 'config.json'}")
    return 0


# ---------------------------------------------------------------------------
# reenact


def _script_samples(path, cfg: Config):
    spec = json.loads(Path(path).read_text())
    samples = []
    for entry in spec["frames"]:
        rx, ry, rz = (math.radians(d) for d in entry.get("rotation_deg_xyz", (0, 0, 0)))
        trans = np.array(
            [entry.get("tx", 0.0), entry.get("ty", 0.0), entry.get("tz", 5.0)], dtype=np.float64
        )
        p = pose.PoseRT(pose.rotation_xyz(rx, ry, rz), trans)
        samples.append(make_sample(p, entry.get("eye", 0.5), entry.get("mouth", 0.5), cfg))
    return samples


def _cmd_reenact(args) -> int:
    try:
        arch = load_weights(args.weights)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load weights {args.weights}: {exc}") from exc
    cfg = (
        Config.from_json(json.dumps(arch.meta["config"]))
        if "config" in arch.meta
        else Config()
    )
    seed = _resolve_seed(cfg, args.seed)

    model = build_model(cfg)
    model.store.load_arrays(arch.tensors)

    clip = (
        _script_samples(args.script, cfg)
        if args.script
        else synth_clip(args.frames, seed=seed, cfg=cfg)
    )
    conds = [sample_conditions(s) for s in clip]
    ref_image = clip[0].reference_image

    rng = np.random.default_rng(seed)
    shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    stage1 = stage1_generate(ref_image, conds, rng.standard_normal(shape), cfg.stage1_steps, model)
    stage2 = stage2_generate(
        stage1,
        cfg.renoise_strength,
        cfg.patch_len,
        cfg.overlap,
        cfg.stage2_steps,
        model,
        condition_seq=conds,
        ref=ref_image,
        rng=np.random.default_rng(seed + 1),
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_frame = []
    for i, (img, sample) in enumerate(zip(stage2.images(), clip)):
        pngio.write_png(out / f"frame_{i:03d}.png", pngio.latent_to_rgb8(img))
        per_frame.append(
            {
                "frame": i,
                "psnr": psnr(img, sample.image),
                "ssim": ssim(img, sample.image),
                "baseline_psnr": psnr(sample.reference_image, sample.image),
            }
        )
    metrics = {
        "frames": per_frame,
        "mean_psnr": float(np.mean([f["psnr"] for f in per_frame])),
        "mean_ssim": float(np.mean([f["ssim"] for f in per_frame])),
        "mean_baseline_psnr": float(np.mean([f["baseline_psnr"] for f in per_frame])),
        "seed": seed,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(per_frame)} frames + metrics.json to {out}")
    print(
        f"mean psnr {metrics['mean_psnr']:.2f} dB"
        f" vs copy-reference baseline {metrics['mean_baseline_psnr']:.2f} dB"
    )
    return 0


# ---------------------------------------------------------------------------
# bench-attn


def _bench_rows(height: int, width: int, seq_len: int, d_model: int):
    rng = np.random.default_rng(0)
    heads = 2 if d_model % 2 == 0 else 1
    map_t = constant(rng.standard_normal((d_model, height, width)))
    seq = constant(rng.standard_normal((seq_len, d_model)))
    flat = reshape(permute(map_t, [1, 2, 0]), (height * width, d_model))

    cross = attn.attention_params(d_model, heads, rng, kv_width=d_model)
    plain = attn.attention_params(d_model, heads, rng)
    runs = (
        ("sk-cross", lambda: attn.sk_cross_attention(map_t, seq, cross), seq_len),
        ("sk-reference", lambda: attn.sk_reference_attention(map_t, map_t, plain), None),
        ("flat-cross", lambda: attn.flat_attention_baseline(map_t, seq, cross), seq_len),
        ("flat-self", lambda: attn.multi_head_attention(flat, flat, plain), None),
    )
    rows = []
    for variant, run, length in runs:
        predicted = attn.attention_op_count(variant, height, width, d_model, seq_len=length)
        t0 = time.perf_counter()
        with attn.count_macs() as measured:
            run()
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append(
            {
                "variant": variant,
                "height": height,
                "width": width,
                "seq_len": length if length is not None else "",
                "d_model": d_model,
                "score_macs_predicted": predicted.score_macs,
                "score_macs_measured": measured.score_macs,
                "value_macs_predicted": predicted.value_macs,
                "value_macs_measured": measured.value_macs,
                "wall_ms": f"{wall_ms:.3f}",
                "match": int(
                    predicted.score_macs == measured.score_macs
                    and predicted.value_macs == measured.value_macs
                ),
            }
        )
    return rows


def _cmd_bench_attn(args) -> int:
    rows = _bench_rows(args.H, args.W, args.L, args.d)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    return 0 if all(r["match"] for r in rows) else 1


# ---------------------------------------------------------------------------
# remaining checks


def _cmd_grad_check(args) -> int:
    entries = gradient_suite(seed=args.seed, shapes_per_op=args.shapes)
    failures = 0
    worst = 0.0
    for e in entries:
        worst = max(worst, e.report.max_rel_error)
        if not e.ok:
            failures += 1
            print(f"FAIL {e.name}: {e.report}")
    print(f"{len(entries)} checks, {failures} failures, max rel error {worst:.3e}")
    return 0 if failures == 0 else 1


def _cmd_raster_golden(args) -> int:
    fixtures = Path(args.fixtures)
    try:
        meta = json.loads((fixtures / "poses.json").read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load fixture sidecar in {fixtures}: {exc}") from exc
    cam = pose.CameraIntrinsics(**meta["camera"])
    drift = 0
    for entry in meta["poses"]:
        rot = pose.rotation_xyz(*[math.radians(d) for d in entry["rotation_deg_xyz"]])
        p = pose.PoseRT(rot, np.asarray(meta["translation"], dtype=np.float64))
        img = pose.rasterize_box_edges(
            p, cam, tuple(meta["image_size"]), tuple(meta["box_half_extents"])
        )
        data = pngio.encode_png(img.pixels)
        target = fixtures / f"{entry['name']}.png"
        if args.regen:
            target.write_bytes(data)
            print(f"wrote {target}")
        elif not target.exists() or target.read_bytes() != data:
            drift += 1
            print(f"DRIFT {entry['name']}: render no longer matches {target}")
        else:
            print(f"ok {entry['name']}")
    return 0 if drift == 0 else 1


def _cmd_self_test(args) -> int:
    items = self_test(seed=args.seed)
    for item in items:
        print(f"{'PASS' if item.ok else 'FAIL'} {item.name}: {item.detail}")
    bad = sum(1 for i in items if not i.ok)
    print(f"{len(items)} checks, {bad} failures")
    return 0 if bad == 0 else 1


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapters on a synthetic dataset")
    p.add_argument("--config", help="JSON config path (defaults used when omitted)")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--steps", type=int, help="override train_steps")
    p.add_argument("--samples", type=int, default=256, help="synthetic dataset size")
    p.add_argument("--seed", type=int, help="override seed (beats SKATTN_SEED)")
    p.add_argument("--print-config", action="store_true", help="dump full defaults and exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reenact", help="two-stage generation from a checkpoint")
    p.add_argument("--weights", required=True, help="checkpoint from train")
    p.add_argument("--out", default="runs/reenact", help="output directory")
    p.add_argument("--frames", type=int, default=8, help="clip length when no script given")
    p.add_argument("--script", help="JSON condition script")
    p.add_argument("--seed", type=int, help="override seed (beats SKATTN_SEED)")
    p.set_defaults(func=_cmd_reenact)

    p = sub.add_parser("bench-attn", help="predicted vs measured attention MACs")
    p.add_argument("--H", type=int, default=16)
    p.add_argument("--W", type=int, default=16)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--d", type=int, default=64)
    p.set_defaults(func=_cmd_bench_attn)

    p = sub.add_parser("grad-check", help="finite-difference suite over every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=5, help="random shapes per op")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("raster-golden", help="compare or regenerate pose-image fixtures")
    p.add_argument("--fixtures", default="tests/fixtures/raster")
    p.add_argument("--regen", action="store_true", help="rewrite fixtures instead of comparing")
    p.set_defaults(func=_cmd_raster_golden)

    p = sub.add_parser("self-test", help="fast end-to-end identity checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_self_test)
    return parser


def cli_run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:  # argparse exits 2 on bad args, 0 on --help
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - checks must fail closed, not crash
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_run(sys.argv[1:]))


if __name__ == "__main__":
    main()
