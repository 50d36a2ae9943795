"""Adapter stack: everything trainable that hangs off the frozen base UNet.

All adapter outputs enter the base computation through zero-initialized 1x1
convolution gates, so a freshly built adapter set is an exact no-op: adding
its (bitwise zero) contribution to a hidden map returns the hidden map with
identical bits.  Training moves only these tensors; the base never changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from skattn.attention import (
    AttentionParams,
    attention_params,
    sk_cross_attention,
    sk_reference_attention,
)
from skattn.autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    concat,
    constant,
    conv1x1,
    conv3x3_stride2,
    param,
    reshape,
    silu,
)
from skattn.config import Config
from skattn.pose import ExpressionProjection, PatchEncoder, PoseImage, expression_projection

__all__ = [
    "ZeroConv",
    "zero_conv_init",
    "apply_zero_conv",
    "InjectSite",
    "inject_reference",
    "ControlEncoder",
    "ControlPyramid",
    "control_pyramid",
    "add_control",
    "tile_id_feature",
    "TemporalSite",
    "AdapterWeights",
    "build_adapter_weights",
    "SITE_NAMES",
]

SITE_NAMES = ("down0", "down1", "down2", "up2", "up1", "up0")


@dataclass
class ZeroConv:
    """1x1 convolution gate starting at exactly zero weights and bias."""

    w: Tensor
    b: Tensor

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def zero_conv_init(channels: int, out_channels: int | None = None) -> ZeroConv:
    out_channels = channels if out_channels is None else out_channels
    return ZeroConv(w=param(np.zeros((out_channels, channels))), b=param(np.zeros(out_channels)))


def apply_zero_conv(gate: ZeroConv, x: Tensor) -> Tensor:
    return conv1x1(x, gate.w, gate.b)


# ---------------------------------------------------------------------------
# reference injection


@dataclass
class InjectSite:
    """Knitted reference attention plus its zero gate at one UNet site."""

    attn: AttentionParams
    gate: ZeroConv

    def named_tensors(self, prefix: str):
        yield from self.attn.named_tensors(f"{prefix}.attn")
        yield from self.gate.named_tensors(f"{prefix}.gate")


def inject_reference(hidden: Tensor, ref_feature: Tensor, site: InjectSite) -> Tensor:
    """hidden + gate(sk_reference_attention(hidden, ref_feature)).

    With a fresh (zero) gate the added branch is an exact zero map, so the
    returned tensor is bit-identical to ``hidden``.
    """
    if hidden.shape != ref_feature.shape:
        raise ShapeMismatch(f"hidden {hidden.shape} vs reference feature {ref_feature.shape}")
    branch = sk_reference_attention(hidden, ref_feature, site.attn)
    return add(hidden, apply_zero_conv(site.gate, branch))


# ---------------------------------------------------------------------------
# control pyramid


@dataclass
class ControlPyramid:
    """Per-scale control maps aligned with the UNet levels (zero at init)."""

    maps: list[Tensor]


@dataclass
class ControlEncoder:
    """Strided trunk over the pose raster with per-scale expression fusion."""

    stem: list[tuple[Tensor, Tensor]]  # conv3x3 stride-2 chain down to latent res
    stem_proj: tuple[Tensor, Tensor]  # 1x1 to the first level width
    between: list[tuple[Tensor, Tensor]]  # stride-2 convs between pyramid scales
    fuse: list[AttentionParams]  # knitted cross-attention per scale
    gates: list[ZeroConv]

    def named_tensors(self, prefix: str):
        for i, (w, b) in enumerate(self.stem):
            yield f"{prefix}.stem{i}.w", w
            yield f"{prefix}.stem{i}.b", b
        yield f"{prefix}.stem_proj.w", self.stem_proj[0]
        yield f"{prefix}.stem_proj.b", self.stem_proj[1]
        for i, (w, b) in enumerate(self.between):
            yield f"{prefix}.between{i}.w", w
            yield f"{prefix}.between{i}.b", b
        for i, ap in enumerate(self.fuse):
            yield from ap.named_tensors(f"{prefix}.fuse{i}")
        for i, g in enumerate(self.gates):
            yield from g.named_tensors(f"{prefix}.gate{i}")


def _conv3_params(c_in: int, c_out: int, rng) -> tuple[Tensor, Tensor]:
    w = param(rng.standard_normal((c_out, c_in, 3, 3)) / sqrt(9 * c_in))
    return w, param(np.zeros(c_out))


def _conv1_params(c_in: int, c_out: int, rng) -> tuple[Tensor, Tensor]:
    w = param(rng.standard_normal((c_out, c_in)) / sqrt(c_in))
    return w, param(np.zeros(c_out))


def build_control_encoder(cfg: Config, rng: np.random.Generator) -> ControlEncoder:
    stem = []
    size, width = cfg.pose_image_size, 3
    while size > cfg.latent_size:
        stem.append(_conv3_params(width, cfg.stem_width, rng))
        width = cfg.stem_width
        size //= 2
    c0, c1, c2 = cfg.unet_channels
    return ControlEncoder(
        stem=stem,
        stem_proj=_conv1_params(width, c0, rng),
        between=[_conv3_params(c0, c1, rng), _conv3_params(c1, c2, rng)],
        fuse=[
            attention_params(c, cfg.n_heads, rng, kv_width=cfg.expr_width, positional=True)
            for c in (c0, c1, c2)
        ],
        gates=[zero_conv_init(c) for c in (c0, c1, c2)],
    )


def control_pyramid(
    pose_image: PoseImage | np.ndarray, expression_features: Tensor, encoder: ControlEncoder
) -> ControlPyramid:
    """Encode the pose raster, fuse expression tokens at each scale, gate.

    Returns three maps matching the UNet level widths at full, half, and
    quarter latent resolution.  With fresh gates every map is exactly zero.
    """
    if isinstance(pose_image, PoseImage):
        arr = pose_image.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
    else:
        arr = np.asarray(pose_image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeMismatch(f"pose image must be [3, h, w], got {arr.shape}")
    x = constant(arr)
    for w, b in encoder.stem:
        x = silu(conv3x3_stride2(x, w, b))
    x = conv1x1(x, *encoder.stem_proj)
    maps = []
    for scale in range(3):
        if scale:
            x = silu(conv3x3_stride2(x, *encoder.between[scale - 1]))
        fused = sk_cross_attention(x, expression_features, encoder.fuse[scale])
        maps.append(apply_zero_conv(encoder.gates[scale], fused))
    return ControlPyramid(maps=maps)


def add_control(hidden: Tensor, control_map: Tensor) -> Tensor:
    """Residual-add one pyramid level into a hidden map of the same shape."""
    if hidden.shape != control_map.shape:
        raise ShapeMismatch(f"hidden {hidden.shape} vs control {control_map.shape}")
    return add(hidden, control_map)


def tile_id_feature(feature: Tensor | np.ndarray, n: int = 5) -> Tensor:
    """Replicate one [d] identity feature into an [n, d] token sequence.

    Attention over n identical tokens equals attention over one (softmax
    spreads weight evenly across bit-equal keys), so n only changes cost.
    """
    if n < 1:
        raise ShapeMismatch(f"tile count must be >= 1, got {n}")
    t = feature if isinstance(feature, Tensor) else constant(np.asarray(feature, dtype=np.float64))
    if t.ndim != 1:
        raise ShapeMismatch(f"identity feature must be 1D, got {t.shape}")
    row = reshape(t, (1, t.shape[0]))
    return row if n == 1 else concat([row] * n, axis=0)


# ---------------------------------------------------------------------------
# temporal (frame-axis) sites


@dataclass
class TemporalSite:
    """Frame-axis self-attention parameters plus zero gate for one level.

    Positional encoding stays off along the frame axis: identical frames must
    stay identical through this block even after training, which a per-frame
    position signal would break.
    """

    attn: AttentionParams
    gate: ZeroConv

    def named_tensors(self, prefix: str):
        yield from self.attn.named_tensors(f"{prefix}.attn")
        yield from self.gate.named_tensors(f"{prefix}.gate")


# ---------------------------------------------------------------------------
# the full trainable bundle


@dataclass
class AdapterWeights:
    """Every trainable tensor: control encoder, injection sites, expression
    projections, temporal sites.  The patch encoder is deterministic from
    config (fixed random projection), so it carries no stored weights."""

    control: ControlEncoder
    inject: dict[str, InjectSite]
    expr: ExpressionProjection
    motion: dict[str, TemporalSite]
    patch_encoder: PatchEncoder = field(repr=False, default=None)

    def named_tensors(self, prefix: str = "adapter"):
        yield from self.control.named_tensors(f"{prefix}.control")
        for name in SITE_NAMES:
            yield from self.inject[name].named_tensors(f"{prefix}.inject.{name}")
        yield from self.expr.named_tensors(f"{prefix}.expr")
        for name in sorted(self.motion):
            yield from self.motion[name].named_tensors(f"{prefix}.motion.{name}")


def build_adapter_weights(cfg: Config, rng: np.random.Generator) -> AdapterWeights:
    c0, c1, c2 = cfg.unet_channels
    site_width = dict(down0=c0, down1=c1, down2=c2, up2=c2, up1=c1, up0=c0)
    inject = {
        name: InjectSite(
            attn=attention_params(
                width, cfg.n_heads, rng, zero_output=True, positional=True
            ),
            gate=zero_conv_init(width),
        )
        for name, width in site_width.items()
    }
    motion = {
        name: TemporalSite(
            attn=attention_params(site_width[name], cfg.n_heads, rng, zero_output=True),
            gate=zero_conv_init(site_width[name]),
        )
        for name in ("up2", "up1", "up0")
    }
    return AdapterWeights(
        control=build_control_encoder(cfg, rng),
        inject=inject,
        expr=expression_projection(cfg.expr_width, rng),
        motion=motion,
        patch_encoder=PatchEncoder(cfg.expr_width, cfg.patch_encoder_seed),
    )
