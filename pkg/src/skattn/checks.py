"""Runnable verification suites: finite-difference checks and self-tests.

The gradient suite drives every differentiable op, plus both knitted
attention variants, through central-difference comparison on several random
shapes each.  The self-test exercises the cheap end-to-end identities (gate
transparency, counter agreement, loss oracles, archive round trip) at a
reduced model size so it finishes in seconds.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from skattn import attention as attn
from skattn.archive import load_weights, save_weights
from skattn.autodiff import (
    GradCheckReport,
    add,
    add_channel_bias,
    add_scalar,
    concat,
    constant,
    conv1x1,
    conv3x3_stride2,
    grad_check,
    layer_norm,
    matmul,
    mean_all,
    mul,
    neg,
    param,
    permute,
    reshape,
    scale,
    silu,
    slice_axis,
    softmax,
    sub,
    sum_all,
    upsample_nearest_2x,
)
from skattn.config import Config
from skattn.diffusion import weighted_loss
from skattn.metrics import psnr, ssim
from skattn.params import ParamStore
from skattn.unet import build_model, unet_forward
from skattn.video import Conditions, ddim_sample, temporal_attention

__all__ = ["SuiteEntry", "gradient_suite", "SelfTestItem", "self_test"]


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport

    @property
    def ok(self) -> bool:
        return self.report.ok


def _scalarize(out, weights: np.ndarray):
    return sum_all(mul(out, constant(weights)))


def _wrap(build_out, rng):
    """Turn a tensor-valued builder into a scalar-valued grad_check target."""
    probe = None

    def f(*inputs):
        nonlocal probe
        out = build_out(*inputs)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return _scalarize(out, probe)

    return f


def _rand(rng, *shape):
    return param(rng.standard_normal(shape))


def _map_shape(rng, d):
    return d, int(rng.integers(2, 4)), int(rng.integers(2, 4))


def _attention_case(variant: str, rng) -> tuple:
    d = int(rng.integers(1, 3)) * 2
    heads = 2 if d % 2 == 0 else 1
    positional = bool(rng.integers(0, 2))
    c, h, w = _map_shape(rng, d)
    if variant == "sk-cross":
        kv = int(rng.integers(2, 5))
        params = attn.attention_params(d, heads, rng, kv_width=kv, positional=positional)
        m = _rand(rng, c, h, w)
        s = _rand(rng, int(rng.integers(1, 4)), kv)
        build = lambda mm, ss, *rest: attn.sk_cross_attention(mm, ss, params)
        inputs = [m, s]
    else:
        params = attn.attention_params(d, heads, rng, positional=positional)
        m = _rand(rng, c, h, w)
        s = _rand(rng, c, h, w)
        build = lambda mm, ss, *rest: attn.sk_reference_attention(mm, ss, params)
        inputs = [m, s]
    inputs += [t for _, t in params.named_tensors("p")]
    return build, inputs


def _op_cases(rng) -> list[tuple[str, object, list]]:
    i = rng.integers
    cases = []

    def shp(nd_lo=1, nd_hi=4):
        return tuple(int(i(1, 4)) for _ in range(int(i(nd_lo, nd_hi + 1))))

    s = shp()
    cases.append(("add", add, [_rand(rng, *s), _rand(rng, *s)]))
    s = shp()
    cases.append(("sub", sub, [_rand(rng, *s), _rand(rng, *s)]))
    s = shp()
    cases.append(("mul", mul, [_rand(rng, *s), _rand(rng, *s)]))
    cases.append(("neg", neg, [_rand(rng, *shp())]))
    cases.append(("silu", silu, [_rand(rng, *shp())]))
    cases.append(("scale", lambda a: scale(a, 1.7), [_rand(rng, *shp())]))
    cases.append(("add_scalar", lambda a: add_scalar(a, -0.9), [_rand(rng, *shp())]))

    nd = int(i(2, 5))
    s = tuple(int(i(1, 4)) for _ in range(nd))
    axes = list(rng.permutation(nd))
    cases.append(("permute", lambda a, ax=tuple(axes): permute(a, list(ax)), [_rand(rng, *s)]))

    s = (int(i(1, 4)), 6)
    cases.append(("reshape", lambda a, r=s[0]: reshape(a, (r * 3, 2)), [_rand(rng, *s)]))

    axis = int(i(0, 2))
    base = [int(i(1, 4)), int(i(1, 4))]
    parts = []
    for _ in range(3):
        p = list(base)
        p[axis] = int(i(1, 3))
        parts.append(_rand(rng, *p))
    cases.append(("concat", lambda *ts, ax=axis: concat(list(ts), axis=ax), parts))

    n = int(i(3, 6))
    lo = int(i(0, n - 1))
    hi = int(i(lo + 1, n + 1))
    cases.append(
        (
            "slice_axis",
            lambda a, a0=lo, a1=hi: slice_axis(a, 0, a0, a1),
            [_rand(rng, n, int(i(1, 4)))],
        )
    )

    m, k, nn = int(i(1, 4)), int(i(1, 4)), int(i(1, 4))
    cases.append(("matmul_2d", matmul, [_rand(rng, m, k), _rand(rng, k, nn)]))
    b = int(i(1, 3))
    cases.append(("matmul_nd_2d", matmul, [_rand(rng, b, m, k), _rand(rng, k, nn)]))
    cases.append(
        ("matmul_batched", matmul, [_rand(rng, b, m, k), _rand(rng, b, k, nn)])
    )

    s = (int(i(1, 4)), int(i(2, 5)))
    ax = int(i(0, 2)) - 1
    cases.append(("softmax", lambda a, x=ax: softmax(a, axis=x), [_rand(rng, *s)]))

    d = int(i(2, 6))
    cases.append(
        (
            "layer_norm",
            layer_norm,
            [_rand(rng, int(i(1, 4)), d), _rand(rng, d), _rand(rng, d)],
        )
    )

    c, o = int(i(1, 4)), int(i(1, 4))
    hh, ww = int(i(1, 4)), int(i(1, 4))
    cases.append(
        ("conv1x1", conv1x1, [_rand(rng, c, hh, ww), _rand(rng, o, c), _rand(rng, o)])
    )
    he, we = 2 * int(i(1, 3)), 2 * int(i(1, 3))
    cases.append(
        (
            "conv3x3_stride2",
            conv3x3_stride2,
            [_rand(rng, c, he, we), _rand(rng, o, c, 3, 3), _rand(rng, o)],
        )
    )
    cases.append(("upsample_nearest_2x", upsample_nearest_2x, [_rand(rng, c, hh, ww)]))
    cases.append(
        ("add_channel_bias", add_channel_bias, [_rand(rng, c, hh, ww), _rand(rng, c)])
    )
    cases.append(("sum_all", None, [_rand(rng, *shp())]))
    cases.append(("mean_all", None, [_rand(rng, *shp())]))
    return cases


def gradient_suite(
    seed: int = 0, shapes_per_op: int = 5, h: float = 1e-5, tol: float = 1e-4
) -> list[SuiteEntry]:
    """Central-difference checks for every op and both knitted variants."""
    rng = np.random.default_rng(seed)
    entries = []
    for rep in range(shapes_per_op):
        for name, op, inputs in _op_cases(rng):
            if name in ("sum_all", "mean_all"):
                f = sum_all if name == "sum_all" else mean_all
            else:
                f = _wrap(op, rng)
            entries.append(
                SuiteEntry(name=f"{name}[{rep}]", report=grad_check(f, inputs, h=h, tol=tol))
            )
        for variant in ("sk-cross", "sk-reference"):
            build, inputs = _attention_case(variant, rng)
            entries.append(
                SuiteEntry(
                    name=f"{variant}[{rep}]",
                    report=grad_check(_wrap(build, rng), inputs, h=h, tol=tol),
                )
            )
    return entries


# ---------------------------------------------------------------------------
# fast end-to-end self-test


@dataclass
class SelfTestItem:
    name: str
    ok: bool
    detail: str


def _small_config() -> Config:
    # face crops assume 16x16 renders, so only the widths shrink
    return Config(
        unet_channels=(8, 12, 16),
        time_embed_width=16,
        time_hidden_width=24,
        null_ctx_width=12,
        expr_width=12,
        stem_width=6,
        diffusion_steps=50,
    )


def self_test(seed: int = 0) -> list[SelfTestItem]:
    rng = np.random.default_rng(seed)
    items = []

    def check(name, ok, detail=""):
        items.append(SelfTestItem(name=name, ok=bool(ok), detail=detail))

    cfg = _small_config()
    model = build_model(cfg)
    zc, zs = cfg.latent_channels, cfg.latent_size

    # fresh gates: adapted forward equals bare forward bit for bit
    from skattn.synth import make_sample, synth_clip  # local import avoids cycles
    from skattn.pose import PoseRT
    from skattn.unet import reference_pass
    from skattn.video import build_control, sample_conditions

    sample = make_sample(PoseRT.identity(), 0.3, 0.8, cfg)
    ref = reference_pass(constant(2.0 * sample.reference_image - 1.0), model)
    control = build_control(sample_conditions(sample), model)
    same = True
    for _ in range(3):
        z = constant(rng.standard_normal((zc, zs, zs)))
        t = int(rng.integers(0, cfg.diffusion_steps))
        bare = unet_forward(z, t, None, None, model)
        adapted = unet_forward(z, t, control, ref, model)
        same = same and np.array_equal(bare.data, adapted.data)
    check("zero-init transparency", same, "adapted forward == bare forward bit-exact")

    # fresh gates: conditioned sampling ignores the conditions entirely
    clipset = synth_clip(2, seed=3, cfg=cfg)
    noise = rng.standard_normal((zc, zs, zs))
    outs = [ddim_sample(noise, sample_conditions(s), 3, model) for s in clipset]
    check(
        "zero-init condition independence",
        np.array_equal(outs[0], outs[1]),
        "max abs diff 0 across condition sets",
    )

    # counters match the closed forms
    ok_counts = True
    for (hh, ww) in ((1, 1), (4, 8), (16, 16)):
        p = attn.attention_params(4, 2, rng, kv_width=3)
        with attn.count_macs() as counted:
            attn.sk_cross_attention(
                constant(rng.standard_normal((4, hh, ww))),
                constant(rng.standard_normal((5, 3))),
                p,
            )
        pred = attn.attention_op_count("sk-cross", hh, ww, 4, seq_len=5)
        ok_counts = ok_counts and counted.score_macs == pred.score_macs
    pred = attn.attention_op_count("sk-cross", 16, 16, 64, seq_len=5)
    ok_counts = ok_counts and pred.score_macs == 163840
    check("mac counters", ok_counts, "instrumented == closed form; 16x16 L=5 d=64 -> 163840")

    # loss oracles
    pred_t = constant(np.ones((1, 4, 4)))
    v1 = weighted_loss(np.zeros((1, 4, 4)), pred_t, np.ones((1, 4, 4)), 0, eps_norm=0.0)
    v2 = weighted_loss(np.zeros((1, 4, 4)), pred_t, np.ones((1, 4, 4)), 1000)
    v3 = weighted_loss(np.zeros((1, 4, 4)), pred_t, np.zeros((1, 4, 4)), 250)
    check(
        "loss oracles",
        float(v1.total.data) == 2.0
        and float(v2.total.data) == 1.0
        and float(v3.total.data) == float(v3.mean_term),
        "hand value 2.0; t=1000 pure mean; zero mask drops the masked term",
    )

    # archive round trip
    store = ParamStore()
    for name, tensor in model.store.items():
        store.register(name, tensor)
    before = store.digest()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "w.bin")
        save_weights(model.store, path)
        loaded = load_weights(path)
        store.load_arrays(loaded.tensors)
    check("archive round trip", store.digest() == before, "digest identical after reload")

    # temporal block: fresh gate no-op and frame-order equivariance
    frames = [constant(rng.standard_normal((cfg.unet_channels[2], 2, 2))) for _ in range(3)]
    site = model.adapters.motion["up2"]
    outs = temporal_attention(frames, site)
    noop = all(np.array_equal(a.data, b.data) for a, b in zip(frames, outs))
    site.gate.w.data[:] = rng.standard_normal(site.gate.w.shape) * 0.1
    perm = [2, 0, 1]
    out_a = temporal_attention([frames[j] for j in perm], site)
    out_b = [temporal_attention(frames, site)[j] for j in perm]
    equi = all(np.allclose(a.data, b.data, atol=1e-12) for a, b in zip(out_a, out_b))
    site.gate.w.data[:] = 0.0
    check("temporal block", noop and equi, "fresh gate no-op; frame-order equivariance")

    # metrics
    a = rng.random((3, 12, 12))
    b = np.clip(a + 0.1, 0.0, 1.0)
    mse = float(np.mean((a - b) ** 2))
    ok_metrics = (
        psnr(a, a) == float("inf")
        and abs(psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-12
        and ssim(a, a) == 1.0
    )
    check("metrics", ok_metrics, "psnr formula + inf sentinel; ssim(a, a) == 1")
    return items
