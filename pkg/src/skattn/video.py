"""Conditioned sampling and two-stage clip generation.

Stage 1 denoises each frame independently from one shared noise draw with
few steps, so frame-to-frame change comes only from the conditions.  Stage 2
re-noises those frames partway (one shared noise draw again), then denoises
them jointly in overlapping patches with frame-axis attention active, and
cross-fades the overlapped frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from skattn.adapters import ControlPyramid, TemporalSite, control_pyramid
from skattn.autodiff import ShapeMismatch, Tensor, constant
from skattn.diffusion import (
    NoiseSchedule,
    StepOutOfRange,
    ddim_denoise_loop,
    ddim_step,
    ddim_timesteps,
    q_sample,
)
from skattn.pose import assemble_expression_features
from skattn.unet import (
    ModelWeights,
    ReferenceFeatures,
    reference_pass,
    temporal_mix,
    unet_forward,
    unet_forward_frames,
)

__all__ = [
    "PatchConfigInvalid",
    "Conditions",
    "sample_conditions",
    "VideoClip",
    "temporal_attention",
    "build_control",
    "reference_features",
    "ddim_sample",
    "reenact_image",
    "stage1_generate",
    "denoise_patch",
    "patch_starts",
    "stage2_generate",
]


class PatchConfigInvalid(ValueError):
    """Patch length, overlap, steps, or re-noise strength is unusable."""


@dataclass
class Conditions:
    """Everything that steers one generated frame."""

    pose_raster: np.ndarray  # [3, r, r] in [0, 1]
    coefficients: np.ndarray  # [51]
    eye_patch: np.ndarray
    mouth_patch: np.ndarray
    reference_image: np.ndarray | None = None  # [4, s, s] in [0, 1]


def sample_conditions(sample) -> Conditions:
    """Conditions extracted from a synthetic sample (self-reenactment)."""
    return Conditions(
        pose_raster=sample.pose_raster,
        coefficients=sample.coefficients,
        eye_patch=sample.eye_patch,
        mouth_patch=sample.mouth_patch,
        reference_image=sample.reference_image,
    )


@dataclass
class VideoClip:
    """Generated latent frames plus playback rate."""

    frames: list[np.ndarray]
    fps: int = 8

    def __len__(self) -> int:
        return len(self.frames)

    def images(self) -> list[np.ndarray]:
        """Frames mapped from latent [-1, 1] back to [0, 1] images."""
        return [np.clip((f + 1.0) / 2.0, 0.0, 1.0) for f in self.frames]


def temporal_attention(frame_feats: list[Tensor], motion_params: TemporalSite) -> list[Tensor]:
    """Frame-axis self-attention with residual and zero gate.

    With a fresh gate the inputs come back bit-exact; with no positional
    signal along the frame axis the block is equivariant to frame order.
    """
    if not frame_feats:
        raise ShapeMismatch("need at least one frame")
    first = frame_feats[0]
    if first.ndim != 3:
        raise ShapeMismatch(f"frames must be [c, h, w], got {first.shape}")
    for f in frame_feats[1:]:
        if f.shape != first.shape:
            raise ShapeMismatch(f"frame shapes differ: {first.shape} vs {f.shape}")
    return temporal_mix(frame_feats, motion_params)


def build_control(cond: Conditions, weights: ModelWeights) -> ControlPyramid:
    """Assemble expression tokens and run the control encoder (no blur)."""
    expr = assemble_expression_features(
        cond.coefficients,
        cond.eye_patch,
        cond.mouth_patch,
        weights.adapters.patch_encoder,
        weights.adapters.expr,
    )
    return control_pyramid(cond.pose_raster, expr, weights.adapters.control)


def reference_features(ref, weights: ModelWeights) -> ReferenceFeatures:
    """Accept an already-captured feature set or a [4,s,s] reference image."""
    if isinstance(ref, ReferenceFeatures):
        return ref
    ref = np.asarray(ref, dtype=np.float64)
    return reference_pass(constant(2.0 * ref - 1.0), weights)


def _schedule(weights: ModelWeights) -> NoiseSchedule:
    cfg = weights.config
    return NoiseSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


def ddim_sample(
    initial_noise: np.ndarray,
    conditions: Conditions,
    steps: int,
    weights: ModelWeights,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Conditioned sampling from pure noise down to a clean latent."""
    if conditions.reference_image is None:
        raise ShapeMismatch("conditions must carry a reference image")
    ref = reference_features(conditions.reference_image, weights)
    control = build_control(conditions, weights)

    def model_fn(z, t):
        return unet_forward(constant(z), t, control, ref, weights)

    return ddim_denoise_loop(model_fn, initial_noise, steps, _schedule(weights), eta, rng)


def reenact_image(conditions: Conditions, weights: ModelWeights, seed: int = 0) -> np.ndarray:
    """Single-image self-reenactment, returning an image in [0, 1].

    Stochastic sampling (eval_eta) breaks the error accumulation a
    deterministic path suffers at this scale; the trailing re-noise/denoise
    pass is the single-frame analog of the stage-2 refinement.  One rng
    drives every draw, so the seed pins the output bit-exactly.
    """
    cfg = weights.config
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    out = ddim_sample(noise, conditions, cfg.eval_steps, weights, eta=cfg.eval_eta, rng=rng)
    sched = _schedule(weights)
    t_r = int(round(cfg.eval_refine_strength * (sched.n_steps - 1)))
    z = q_sample(out, t_r, rng.standard_normal(out.shape), sched)
    control = build_control(conditions, weights)
    ref_feats = reference_features(conditions.reference_image, weights)
    out = denoise_patch([z], t_r, cfg.stage2_steps, [control], ref_feats, weights)[0]
    return np.clip((out + 1.0) / 2.0, 0.0, 1.0)


def stage1_generate(
    ref,
    condition_seq: list[Conditions],
    shared_noise: np.ndarray,
    steps_few: int,
    weights: ModelWeights,
) -> VideoClip:
    """Per-frame sampling, every frame starting from the same noise.

    No frame-axis module runs here: with identical conditions all frames are
    bit-identical by construction.
    """
    if not condition_seq:
        raise ShapeMismatch("need at least one frame condition")
    ref_feats = reference_features(ref, weights)
    sched = _schedule(weights)
    frames = []
    for cond in condition_seq:
        control = build_control(cond, weights)

        def model_fn(z, t, _c=control):
            return unet_forward(constant(z), t, _c, ref_feats, weights)

        frames.append(ddim_denoise_loop(model_fn, shared_noise, steps_few, sched))
    return VideoClip(frames=frames, fps=weights.config.fps)


def patch_starts(n_frames: int, patch_len: int, overlap: int) -> list[int]:
    """Start indices advancing by patch_len - overlap, last patch aligned to
    the clip end (its effective overlap may exceed the configured one)."""
    if n_frames <= patch_len:
        return [0]
    starts = list(range(0, n_frames - patch_len + 1, patch_len - overlap))
    if starts[-1] != n_frames - patch_len:
        starts.append(n_frames - patch_len)
    return starts


def denoise_patch(
    noised: list[np.ndarray],
    t_start: int,
    steps: int,
    controls: list[ControlPyramid],
    ref_feats: ReferenceFeatures,
    weights: ModelWeights,
) -> list[np.ndarray]:
    """Jointly denoise one patch of re-noised frames, motion module active."""
    sched = _schedule(weights)
    path = ddim_timesteps(sched.n_steps, steps, t_start)
    zs = [np.asarray(z, dtype=np.float64) for z in noised]
    for i, t in enumerate(path):
        t_next = path[i + 1] if i + 1 < len(path) else None
        preds = unet_forward_frames(
            [constant(z) for z in zs], t, controls, ref_feats, weights, motion=True
        )
        zs = [ddim_step(z, p.data, t, t_next, sched) for z, p in zip(zs, preds)]
    return zs


def stage2_generate(
    stage1_clip: VideoClip,
    renoise_strength: float,
    patch_len: int,
    overlap: int,
    steps: int,
    weights: ModelWeights,
    condition_seq: list[Conditions] | None = None,
    ref=None,
    rng: np.random.Generator | None = None,
) -> VideoClip:
    """Re-noise stage-1 frames and denoise jointly in overlapping patches.

    One shared noise draw re-noises every frame (mirroring the shared
    initial noise of stage 1, so identical frames stay identical).  Patches
    are denoised from the re-noised originals; frames covered twice are
    cross-faded with weights w_i = (i+1)/(n+1) over the n overlapped
    positions of the later patch.  ``condition_seq`` and ``ref`` must supply
    the same conditioning used for stage 1.
    """
    n_frames = len(stage1_clip.frames)
    if n_frames == 0:
        raise PatchConfigInvalid("empty clip")
    if patch_len < 2:
        raise PatchConfigInvalid(f"patch_len must be >= 2, got {patch_len}")
    if not 0 < overlap < patch_len:
        raise PatchConfigInvalid(f"overlap must satisfy 0 < overlap < patch_len, got {overlap}")
    if not 0.0 < renoise_strength <= 1.0:
        raise PatchConfigInvalid(f"renoise_strength must be in (0, 1], got {renoise_strength}")
    if steps < 1:
        raise PatchConfigInvalid(f"steps must be >= 1, got {steps}")
    if condition_seq is None or ref is None:
        raise PatchConfigInvalid("stage 2 needs the per-frame conditions and the reference")
    if len(condition_seq) != n_frames:
        raise PatchConfigInvalid(
            f"{len(condition_seq)} conditions for {n_frames} stage-1 frames"
        )

    sched = _schedule(weights)
    t_r = int(round(renoise_strength * (sched.n_steps - 1)))
    shared_eps = (rng or np.random.default_rng(0)).standard_normal(stage1_clip.frames[0].shape)
    noised = [q_sample(f, t_r, shared_eps, sched) for f in stage1_clip.frames]

    ref_feats = reference_features(ref, weights)
    controls = [build_control(c, weights) for c in condition_seq]

    plen = min(patch_len, n_frames)
    result: list[np.ndarray | None] = [None] * n_frames
    for start in patch_starts(n_frames, patch_len, overlap):
        idx = list(range(start, start + plen))
        outs = denoise_patch(
            [noised[i] for i in idx], t_r, steps,
            [controls[i] for i in idx], ref_feats, weights,
        )
        n_ov = sum(1 for i in idx if result[i] is not None)
        pos = 0
        for j, i in enumerate(idx):
            if result[i] is None:
                result[i] = outs[j]
            else:
                w = (pos + 1) / (n_ov + 1)
                # lerp form of w*next + (1-w)*prev: blending two bit-identical
                # patches must return them unchanged, or constant conditions
                # would pick up rounding flicker that stage 1 does not have
                result[i] = result[i] + w * (outs[j] - result[i])
                pos += 1
    return VideoClip(frames=result, fps=stage1_clip.fps)
