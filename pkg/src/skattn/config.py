"""Run configuration: every invented constant in one serializable place.

Values here are the desk-scale defaults; anything a production-scale system
would hardcode (widths, schedules, steps) is a field so experiments stay
auditable.
JSON round trips exactly; unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

__all__ = ["Config"]


@dataclass
class Config:
    seed: int = 0

    # latent space (identity VAE: pixels are the latents)
    latent_size: int = 16
    latent_channels: int = 4

    # frozen base UNet
    unet_channels: tuple[int, int, int] = (32, 64, 128)
    n_heads: int = 2
    time_embed_width: int = 64
    time_hidden_width: int = 128
    null_ctx_tokens: int = 4
    null_ctx_width: int = 32
    base_init_scale: float = 1.0

    # adapters
    expr_width: int = 32
    stem_width: int = 16
    patch_encoder_seed: int = 7
    id_tile_count: int = 5

    # noise schedule
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reference_timestep: int = 0

    # pose rasterization
    pose_image_size: int = 64
    box_half_extents: tuple[float, float] = (1.0, 1.4)
    focal: float = 64.0

    # training (the base earns its denoising prior first, then freezes)
    base_pretrain_steps: int = 6000
    train_steps: int = 2000
    batch_size: int = 8
    lr_max: float = 2e-3
    lr_min: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_eps: float = 1e-8
    blur_strength: tuple[int, int] = (0, 2)

    # sampling / video
    stage1_steps: int = 8
    stage2_steps: int = 25
    eval_steps: int = 50
    eval_eta: float = 1.0
    eval_refine_strength: float = 0.4
    renoise_strength: float = 0.6
    patch_len: int = 16
    overlap: int = 4
    fps: int = 8

    _TUPLE_FIELDS = ("unet_channels", "box_half_extents", "blur_strength")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Config":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in cls._TUPLE_FIELDS:
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def validate(self) -> "Config":
        if self.latent_size & (self.latent_size - 1) or self.latent_size < 8:
            raise ValueError(f"latent_size must be a power of two >= 8, got {self.latent_size}")
        if self.pose_image_size % self.latent_size:
            raise ValueError("pose_image_size must be a multiple of latent_size")
        if len(self.unet_channels) != 3:
            raise ValueError("unet_channels must list exactly three level widths")
        for c in self.unet_channels:
            if c % self.n_heads:
                raise ValueError(f"level width {c} not divisible by n_heads {self.n_heads}")
        if not 0.0 < self.renoise_strength <= 1.0:
            raise ValueError("renoise_strength must be in (0, 1]")
        if not 0.0 < self.eval_refine_strength <= 1.0:
            raise ValueError("eval_refine_strength must be in (0, 1]")
        if self.eval_eta < 0.0:
            raise ValueError("eval_eta must be >= 0")
        return self
