"""Frozen toy denoising UNet and the adapter-aware forward engine.

The base network predicts noise from a latent and a timestep.  It is built
once from a seeded generator as non-trainable constants and never changes;
adapters modify its hidden maps only through residual additions at fixed
sites.  Running the same engine with no adapters attached (or with fresh
zero-gated ones) therefore produces bit-identical outputs.

Site layout, mirrored across the down and up paths:

    down0 (c0, s)   -> down1 (c1, s/2) -> down2 (c2, s/4)
                          mid: attention over fixed null-context tokens
    up2   (c2, s/4) -> up1   (c1, s/2) -> up0   (c0, s)

Reference features are captured at all six sites; control maps are added on
the down path after injection; temporal mixing runs at the three up sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from skattn.adapters import (
    SITE_NAMES,
    AdapterWeights,
    ControlPyramid,
    add_control,
    apply_zero_conv,
    build_adapter_weights,
    inject_reference,
)
from skattn.attention import (
    AttentionParams,
    attention_params,
    flat_attention_baseline,
    multi_head_attention,
)
from skattn.autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    add_channel_bias,
    concat,
    constant,
    conv1x1,
    conv3x3_stride2,
    layer_norm,
    matmul,
    permute,
    reshape,
    silu,
    slice_axis,
    upsample_nearest_2x,
)
from skattn.config import Config
from skattn.params import ParamStore

__all__ = [
    "ResBlockParams",
    "BaseUNet",
    "build_base_unet",
    "ModelWeights",
    "build_model",
    "ReferenceFeatures",
    "reference_pass",
    "unet_forward",
    "unet_forward_frames",
    "temporal_mix",
    "time_embedding_table",
]


@dataclass
class ResBlockParams:
    """Pre-norm residual block of two 1x1 convs with a timestep bias."""

    ln_gamma: Tensor
    ln_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    temb_w: Tensor  # [time_hidden, channels]
    temb_b: Tensor

    def named_tensors(self, prefix: str):
        for field_name in ("ln_gamma", "ln_beta", "w1", "b1", "w2", "b2", "temb_w", "temb_b"):
            yield f"{prefix}.{field_name}", getattr(self, field_name)


@dataclass
class BaseUNet:
    channels: tuple[int, int, int]
    in_proj: tuple[Tensor, Tensor]
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    down_res: list[list[ResBlockParams]]  # two blocks per level
    down_samp: list[tuple[Tensor, Tensor]]  # stride-2 convs after levels 0 and 1
    mid_res_a: ResBlockParams
    mid_attn: AttentionParams
    null_ctx: Tensor  # fixed context tokens standing in for an empty prompt
    mid_res_b: ResBlockParams
    up_res: list[ResBlockParams]  # one block per level, indexed by level
    up_proj: list[tuple[Tensor, Tensor]]  # channel change after upsampling
    up_merge: list[tuple[Tensor, Tensor]]  # after skip concatenation
    out_gamma: Tensor
    out_beta: Tensor
    out_proj: tuple[Tensor, Tensor]

    def named_tensors(self, prefix: str = "base"):
        yield f"{prefix}.in_proj.w", self.in_proj[0]
        yield f"{prefix}.in_proj.b", self.in_proj[1]
        for name in ("time_w1", "time_b1", "time_w2", "time_b2"):
            yield f"{prefix}.{name}", getattr(self, name)
        for lvl, blocks in enumerate(self.down_res):
            for j, blk in enumerate(blocks):
                yield from blk.named_tensors(f"{prefix}.down{lvl}.res{j}")
        for lvl, (w, b) in enumerate(self.down_samp):
            yield f"{prefix}.down{lvl}.samp.w", w
            yield f"{prefix}.down{lvl}.samp.b", b
        yield from self.mid_res_a.named_tensors(f"{prefix}.mid.res_a")
        yield from self.mid_attn.named_tensors(f"{prefix}.mid.attn")
        yield f"{prefix}.mid.null_ctx", self.null_ctx
        yield from self.mid_res_b.named_tensors(f"{prefix}.mid.res_b")
        for lvl, blk in enumerate(self.up_res):
            yield from blk.named_tensors(f"{prefix}.up{lvl}.res")
        for lvl, (w, b) in enumerate(self.up_proj):
            yield f"{prefix}.up{lvl}.proj.w", w
            yield f"{prefix}.up{lvl}.proj.b", b
        for lvl, (w, b) in enumerate(self.up_merge):
            yield f"{prefix}.up{lvl}.merge.w", w
            yield f"{prefix}.up{lvl}.merge.b", b
        yield f"{prefix}.out.gamma", self.out_gamma
        yield f"{prefix}.out.beta", self.out_beta
        yield f"{prefix}.out.w", self.out_proj[0]
        yield f"{prefix}.out.b", self.out_proj[1]


def _cmat(rng, rows: int, cols: int, scale: float) -> Tensor:
    return constant(rng.standard_normal((rows, cols)) * (scale / sqrt(rows)))


def _cconv(rng, c_in: int, c_out: int, scale: float) -> Tensor:
    """1x1 conv weight, [c_out, c_in] with fan-in scaling."""
    return constant(rng.standard_normal((c_out, c_in)) * (scale / sqrt(c_in)))


def _res_block_params(channels: int, time_hidden: int, rng, scale: float) -> ResBlockParams:
    return ResBlockParams(
        ln_gamma=constant(np.ones(channels)),
        ln_beta=constant(np.zeros(channels)),
        w1=_cconv(rng, channels, channels, scale),
        b1=constant(np.zeros(channels)),
        w2=_cconv(rng, channels, channels, scale),
        b2=constant(np.zeros(channels)),
        temb_w=_cmat(rng, time_hidden, channels, scale),
        temb_b=constant(np.zeros(channels)),
    )


def _conv3_const(rng, c_in: int, c_out: int, scale: float) -> tuple[Tensor, Tensor]:
    w = constant(rng.standard_normal((c_out, c_in, 3, 3)) * (scale / sqrt(9 * c_in)))
    return w, constant(np.zeros(c_out))


def build_base_unet(cfg: Config, rng: np.random.Generator) -> BaseUNet:
    c0, c1, c2 = cfg.unet_channels
    s = cfg.base_init_scale
    th = cfg.time_hidden_width
    return BaseUNet(
        channels=cfg.unet_channels,
        in_proj=(_cconv(rng, cfg.latent_channels, c0, s), constant(np.zeros(c0))),
        time_w1=_cmat(rng, cfg.time_embed_width, th, s),
        time_b1=constant(np.zeros(th)),
        time_w2=_cmat(rng, th, th, s),
        time_b2=constant(np.zeros(th)),
        down_res=[[_res_block_params(c, th, rng, s) for _ in range(2)] for c in (c0, c1, c2)],
        down_samp=[_conv3_const(rng, c0, c1, s), _conv3_const(rng, c1, c2, s)],
        mid_res_a=_res_block_params(c2, th, rng, s),
        mid_attn=attention_params(
            c2, cfg.n_heads, rng, kv_width=cfg.null_ctx_width, trainable=False
        ),
        null_ctx=constant(rng.standard_normal((cfg.null_ctx_tokens, cfg.null_ctx_width))),
        mid_res_b=_res_block_params(c2, th, rng, s),
        up_res=[_res_block_params(c, th, rng, s) for c in (c0, c1, c2)],
        up_proj=[(_cconv(rng, c1, c0, s), constant(np.zeros(c0))),
                 (_cconv(rng, c2, c1, s), constant(np.zeros(c1)))],
        up_merge=[(_cconv(rng, 2 * c0, c0, s), constant(np.zeros(c0))),
                  (_cconv(rng, 2 * c1, c1, s), constant(np.zeros(c1)))],
        out_gamma=constant(np.ones(c0)),
        out_beta=constant(np.zeros(c0)),
        out_proj=(_cconv(rng, c0, cfg.latent_channels, s), constant(np.zeros(cfg.latent_channels))),
    )


# ---------------------------------------------------------------------------
# timestep embedding


def time_embedding_table(t: int, width: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep, shape [1, width]."""
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).reshape(1, width)


def _time_hidden(t: int, base: BaseUNet, width: int) -> Tensor:
    emb = constant(time_embedding_table(t, width))
    h = silu(add(matmul(emb, base.time_w1), reshape(base.time_b1, (1, base.time_b1.shape[0]))))
    h = add(matmul(h, base.time_w2), reshape(base.time_b2, (1, base.time_b2.shape[0])))
    return h  # [1, time_hidden]


# ---------------------------------------------------------------------------
# blocks


def _channels_last_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    moved = permute(x, (1, 2, 0))
    return permute(layer_norm(moved, gamma, beta), (2, 0, 1))


def _res_block(x: Tensor, temb: Tensor, p: ResBlockParams) -> Tensor:
    h = _channels_last_norm(x, p.ln_gamma, p.ln_beta)
    h = conv1x1(h, p.w1, p.b1)
    tvec = add(matmul(temb, p.temb_w), reshape(p.temb_b, (1, p.temb_b.shape[0])))
    h = add_channel_bias(h, reshape(tvec, (tvec.shape[1],)))
    h = silu(h)
    h = conv1x1(h, p.w2, p.b2)
    return add(x, h)


def temporal_mix(frames: list[Tensor], site) -> list[Tensor]:
    """Frame-axis self-attention at one level, zero-gated per frame."""
    if len(frames) == 1:
        f = frames[0]
        c, h, w = f.shape
        tokens = reshape(permute(f, (1, 2, 0)), (h * w, 1, c))
    else:
        c, h, w = frames[0].shape
        tokens = concat(
            [reshape(permute(f, (1, 2, 0)), (h * w, 1, c)) for f in frames], axis=1
        )
    normed = layer_norm(tokens, site.attn.row.ln_gamma, site.attn.row.ln_beta)
    mixed = add(tokens, multi_head_attention(normed, normed, site.attn, stage="row"))
    out = []
    for i, f in enumerate(frames):
        tok = reshape(slice_axis(mixed, 1, i, i + 1), (h, w, c))
        out.append(add(f, apply_zero_conv(site.gate, permute(tok, (2, 0, 1)))))
    return out


# ---------------------------------------------------------------------------
# the engine


@dataclass
class ReferenceFeatures:
    """Hidden maps captured at the six sites during a clean reference pass."""

    timestep: int
    sites: dict[str, Tensor]


@dataclass
class ModelWeights:
    config: Config
    base: BaseUNet
    adapters: AdapterWeights
    store: ParamStore
    base_names: tuple[str, ...]
    adapter_names: tuple[str, ...]


def build_model(cfg: Config, seed: int | None = None) -> ModelWeights:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    base = build_base_unet(cfg, rng)
    adapters = build_adapter_weights(cfg, rng)
    store = ParamStore()
    base_pairs = list(base.named_tensors())
    adapter_pairs = list(adapters.named_tensors())
    store.register_all(base_pairs)
    store.register_all(adapter_pairs)
    return ModelWeights(
        config=cfg,
        base=base,
        adapters=adapters,
        store=store,
        base_names=tuple(n for n, _ in base_pairs),
        adapter_names=tuple(n for n, _ in adapter_pairs),
    )


def _run_frames(
    frames: list[Tensor],
    t: int,
    weights: ModelWeights,
    controls: list[ControlPyramid] | None,
    ref: ReferenceFeatures | None,
    motion: bool,
    capture: dict[str, Tensor] | None = None,
) -> list[Tensor]:
    base = weights.base
    adapters = weights.adapters
    temb = _time_hidden(t, base, weights.config.time_embed_width)

    def site_step(h: Tensor, frame_idx: int, name: str, level: int, down: bool) -> Tensor:
        if capture is not None:
            capture[name] = h
        if ref is not None:
            h = inject_reference(h, ref.sites[name], adapters.inject[name])
        if down and controls is not None:
            h = add_control(h, controls[frame_idx].maps[level])
        return h

    per_frame = []
    for fi, z in enumerate(frames):
        if z.ndim != 3 or z.shape[0] != weights.config.latent_channels:
            raise ShapeMismatch(f"latent must be [c, h, w], got {z.shape}")
        h = conv1x1(z, *base.in_proj)
        skips = []
        for lvl in range(3):
            for blk in base.down_res[lvl]:
                h = _res_block(h, temb, blk)
            h = site_step(h, fi, f"down{lvl}", lvl, down=True)
            if lvl < 2:
                skips.append(h)
                h = silu(conv3x3_stride2(h, *base.down_samp[lvl]))
        h = _res_block(h, temb, base.mid_res_a)
        h = flat_attention_baseline(h, base.null_ctx, base.mid_attn)
        h = _res_block(h, temb, base.mid_res_b)
        per_frame.append((h, skips))

    # up path, level by level so temporal mixing sees every frame at once
    current = [h for h, _ in per_frame]
    for lvl in (2, 1, 0):
        current = [
            site_step(h, fi, f"up{lvl}", lvl, down=False) for fi, h in enumerate(current)
        ]
        if motion:
            current = temporal_mix(current, adapters.motion[f"up{lvl}"])
        current = [_res_block(h, temb, base.up_res[lvl]) for h in current]
        if lvl > 0:
            merged = []
            for fi, h in enumerate(current):
                h = upsample_nearest_2x(h)
                h = conv1x1(h, *base.up_proj[lvl - 1])
                h = concat([h, per_frame[fi][1][lvl - 1]], axis=0)
                h = conv1x1(h, *base.up_merge[lvl - 1])
                merged.append(h)
            current = merged

    out = []
    for h in current:
        h = silu(_channels_last_norm(h, base.out_gamma, base.out_beta))
        out.append(conv1x1(h, *base.out_proj))
    return out


def unet_forward(
    z_t: Tensor,
    t: int,
    control: ControlPyramid | None,
    ref_features: ReferenceFeatures | None,
    weights: ModelWeights,
) -> Tensor:
    """Single-frame noise prediction with optional conditioning branches."""
    controls = [control] if control is not None else None
    return _run_frames([z_t], t, weights, controls, ref_features, motion=False)[0]


def unet_forward_frames(
    frames: list[Tensor],
    t: int,
    controls: list[ControlPyramid] | None,
    ref_features: ReferenceFeatures | None,
    weights: ModelWeights,
    motion: bool = True,
) -> list[Tensor]:
    """Joint multi-frame prediction with frame-axis mixing at the up sites."""
    if controls is not None and len(controls) != len(frames):
        raise ShapeMismatch(f"{len(controls)} control pyramids for {len(frames)} frames")
    return _run_frames(frames, t, weights, controls, ref_features, motion=motion)


def reference_pass(
    ref_latent: Tensor, weights: ModelWeights, timestep: int | None = None
) -> ReferenceFeatures:
    """Clean pass over the reference latent, capturing all six site maps.

    The captured maps are detached constants: they condition later passes but
    never receive gradients, so one capture serves a whole clip or batch.
    """
    t = weights.config.reference_timestep if timestep is None else timestep
    capture: dict[str, Tensor] = {}
    _run_frames([ref_latent], t, weights, None, None, motion=False, capture=capture)
    return ReferenceFeatures(
        timestep=t, sites={name: capture[name].detach() for name in SITE_NAMES}
    )
