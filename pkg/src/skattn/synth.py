"""Synthetic head dataset: parametric ellipse faces with pose and apertures.

Every latent is itself a 4-channel 16x16 image in [0, 1]: head silhouette,
eyes, mouth, and a shading gradient that rotates with the head.  The clean
training latent is 2*image - 1.  Poses are in-plane (roll plus translation
at fixed depth), which the box-edge rasterizer and this renderer interpret
identically, so the pose raster is an honest conditioning signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from skattn.autodiff import ShapeMismatch
from skattn.config import Config
from skattn.pose import (
    EXPRESSION_COEFF_COUNT,
    CameraIntrinsics,
    PoseRT,
    rasterize_box_edges,
    rotation_xyz,
)

__all__ = [
    "SynthSample",
    "render_head",
    "aperture_mask",
    "make_sample",
    "synth_dataset",
    "synth_clip",
    "EYE_CROP",
    "MOUTH_CROP",
]

# fixed crops (rows, cols) of the canonical-pose render holding each organ
EYE_CROP = (slice(3, 9), slice(2, 14))
MOUTH_CROP = (slice(9, 14), slice(3, 13))

_NEUTRAL_APERTURES = (0.5, 0.5)


def _soft_ellipse(xl: np.ndarray, yl: np.ndarray, a: float, b: float) -> np.ndarray:
    """1 deep inside, 0 outside, linear ramp near the boundary."""
    q = (xl / a) ** 2 + (yl / b) ** 2
    return np.clip((1.0 - q) / 0.25, 0.0, 1.0)


def render_head(pose: PoseRT, coefficients: np.ndarray, size: int = 16) -> np.ndarray:
    """Render one [4, size, size] head image in [0, 1].

    coefficients[0] and [1] are eye and mouth apertures in [0, 1]; the rest
    of the vector is carried for interface fidelity but ignored here.  Only
    the in-plane part of the rotation is used (angle of the rotated x axis);
    translation shifts the head via perspective at the pose depth.
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (EXPRESSION_COEFF_COUNT,):
        raise ShapeMismatch(
            f"expected {EXPRESSION_COEFF_COUNT} coefficients, got {coefficients.shape}"
        )
    ap_eye, ap_mouth = float(coefficients[0]), float(coefficients[1])
    tx, ty, tz = (float(v) for v in pose.translation)
    theta = np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0])
    f = float(size)
    cx = size / 2.0 + f * tx / tz
    cy = size / 2.0 + f * ty / tz
    zoom = 5.0 / tz
    a = 0.30 * size * zoom
    b = 0.40 * size * zoom

    ys, xs = np.indices((size, size), dtype=np.float64)
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    xl = c * dx + s * dy
    yl = -s * dx + c * dy

    head = _soft_ellipse(xl, yl, a, b)
    eyes = np.maximum(
        _soft_ellipse(xl - 0.45 * a, yl + 0.35 * b, 0.22 * a, (0.06 + 0.30 * ap_eye) * b),
        _soft_ellipse(xl + 0.45 * a, yl + 0.35 * b, 0.22 * a, (0.06 + 0.30 * ap_eye) * b),
    )
    mouth = _soft_ellipse(xl, yl - 0.45 * b, 0.35 * a, (0.04 + 0.28 * ap_mouth) * b)
    shade = head * np.clip(0.35 + 0.65 * (yl / b + 1.0) / 2.0, 0.0, 1.0)
    return np.stack([head, eyes, mouth, shade])


def _coeff_vector(ap_eye: float, ap_mouth: float) -> np.ndarray:
    v = np.zeros(EXPRESSION_COEFF_COUNT)
    v[0], v[1] = ap_eye, ap_mouth
    return v


def aperture_mask(pose: PoseRT, size: int = 16, tol: float = 1e-9) -> np.ndarray:
    """[1, size, size] mask of every pixel the apertures can influence.

    Organ intensity is monotone in its aperture, so the support of the
    difference between fully open and fully closed renders contains the
    support of any intermediate difference.
    """
    closed = render_head(pose, _coeff_vector(0.0, 0.0), size)
    open_ = render_head(pose, _coeff_vector(1.0, 1.0), size)
    changed = np.any(np.abs(open_ - closed) > tol, axis=0)
    return changed[None].astype(np.float64)


@dataclass
class SynthSample:
    """One supervised reenactment example."""

    image: np.ndarray  # [4, s, s] driving-pose render, driving apertures
    reference_image: np.ndarray  # [4, s, s] canonical pose, neutral apertures
    pose: PoseRT
    coefficients: np.ndarray  # [51]
    eye_patch: np.ndarray  # canonical-frame crops at driving apertures
    mouth_patch: np.ndarray
    mask: np.ndarray  # [1, s, s]
    pose_raster: np.ndarray  # [3, r, r] in [0, 1]


def _pose_raster(pose: PoseRT, cfg: Config) -> np.ndarray:
    cam = CameraIntrinsics(
        fx=cfg.focal, fy=cfg.focal, cx=cfg.pose_image_size / 2.0, cy=cfg.pose_image_size / 2.0
    )
    img = rasterize_box_edges(
        pose, cam, (cfg.pose_image_size, cfg.pose_image_size), cfg.box_half_extents
    )
    return img.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def make_sample(pose: PoseRT, ap_eye: float, ap_mouth: float, cfg: Config) -> SynthSample:
    coeffs = _coeff_vector(ap_eye, ap_mouth)
    canonical = PoseRT.identity()
    patch_source = render_head(canonical, coeffs, cfg.latent_size)
    return SynthSample(
        image=render_head(pose, coeffs, cfg.latent_size),
        reference_image=render_head(canonical, _coeff_vector(*_NEUTRAL_APERTURES),
                                    cfg.latent_size),
        pose=pose,
        coefficients=coeffs,
        eye_patch=patch_source[1][EYE_CROP].copy(),
        mouth_patch=patch_source[2][MOUTH_CROP].copy(),
        mask=aperture_mask(pose, cfg.latent_size),
        pose_raster=_pose_raster(pose, cfg),
    )


def _roll_pose(roll_deg: float, tx: float, ty: float) -> PoseRT:
    r = rotation_xyz(0.0, 0.0, np.deg2rad(roll_deg))
    return PoseRT(rotation=r, translation=np.array([tx, ty, 5.0]))


def _random_pose(rng: np.random.Generator) -> PoseRT:
    return _roll_pose(rng.uniform(-40.0, 40.0), *rng.uniform(-1.0, 1.0, size=2))


def synth_dataset(n: int, seed: int, cfg: Config | None = None) -> list[SynthSample]:
    if n < 1:
        raise ShapeMismatch(f"need at least one sample, got n={n}")
    cfg = cfg or Config()
    rng = np.random.default_rng(seed)
    return [
        make_sample(_random_pose(rng), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), cfg)
        for _ in range(n)
    ]


def synth_clip(n_frames: int, seed: int, cfg: Config | None = None) -> list[SynthSample]:
    """Smoothly varying pose and aperture trajectory, shared reference."""
    cfg = cfg or Config()
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=4)
    frames = []
    for i in range(n_frames):
        u = i / max(n_frames - 1, 1)
        roll = 30.0 * np.sin(2.0 * np.pi * u + phase[0])
        tx = 0.35 * np.sin(2.0 * np.pi * u + phase[1])
        ty = 0.35 * np.cos(2.0 * np.pi * u + phase[2])
        pose = _roll_pose(roll, tx, ty)
        ap_eye = 0.5 + 0.5 * np.sin(4.0 * np.pi * u + phase[3])
        ap_mouth = 0.5 + 0.5 * np.cos(2.0 * np.pi * u + phase[3])
        frames.append(make_sample(pose, float(np.clip(ap_eye, 0, 1)),
                                  float(np.clip(ap_mouth, 0, 1)), cfg))
    return frames
