"""Pose and expression conditioning.

Head pose is a rigid transform drawn as a colored rectangle: the four edges
of a canonical box (half-extents on the z=0 plane) are projected through a
pinhole camera and rasterized with one fixed color per edge, so orientation
is readable from color layout alone.  Expression is carried by 51 blendshape
style coefficients in [0,1] plus small eye/mouth image patches; patches go
through a fixed seeded random projection (no learned vision encoder at this
scale) and everything is mapped into a 3-token feature sequence by learned
projections.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import cos, sin

import numpy as np

from skattn.autodiff import ShapeMismatch, Tensor, add, concat, constant, matmul, param, reshape

__all__ = [
    "InvalidRotation",
    "BehindCamera",
    "DegenerateProjection",
    "EXPRESSION_COEFF_COUNT",
    "EDGE_COLORS",
    "PoseRT",
    "CameraIntrinsics",
    "PoseImage",
    "rotation_xyz",
    "rt_transform",
    "perspective_project",
    "rasterize_box_edges",
    "random_blur_augment",
    "PatchEncoder",
    "toy_patch_encoder",
    "ExpressionProjection",
    "expression_projection",
    "assemble_expression_features",
]


class InvalidRotation(ValueError):
    """Rotation matrix is not special orthogonal within tolerance."""


class BehindCamera(ValueError):
    """A point to be projected has non-positive camera-frame depth."""


class DegenerateProjection(ValueError):
    """Projected box corners collapse onto each other."""


EXPRESSION_COEFF_COUNT = 51

# top, right, bottom, left: pure red, green, blue, yellow, drawn in this
# order so later edges overwrite shared corner pixels
EDGE_COLORS = (
    ("top", (255, 0, 0)),
    ("right", (0, 255, 0)),
    ("bottom", (0, 0, 255)),
    ("left", (255, 255, 0)),
)

_ORTHO_TOL = 1e-9


@dataclass
class PoseRT:
    """Rigid transform: rotation matrix [3,3] plus translation [3]."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ShapeMismatch(
                f"pose needs [3,3] rotation and [3] translation, got "
                f"{self.rotation.shape} / {self.translation.shape}"
            )

    def validate(self) -> "PoseRT":
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise InvalidRotation("R^T R deviates from identity beyond 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidRotation("det(R) deviates from +1 beyond 1e-9")
        return self

    @staticmethod
    def identity(translation=(0.0, 0.0, 5.0)) -> "PoseRT":
        return PoseRT(np.eye(3), np.asarray(translation, dtype=np.float64))


def rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation about x, then y, then z (radians): R = Rz @ Ry @ Rx."""
    cx_, sx = cos(rx), sin(rx)
    cy, sy = cos(ry), sin(ry)
    cz, sz = cos(rz), sin(rz)
    rxm = np.array([[1, 0, 0], [0, cx_, -sx], [0, sx, cx_]])
    rym = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rzm = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rzm @ rym @ rxm


@dataclass
class CameraIntrinsics:
    """Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class PoseImage:
    """Rasterized pose rectangle: RGB bytes, [height, width, 3] uint8."""

    width: int
    height: int
    pixels: np.ndarray

    def save_png(self, path) -> None:
        from skattn.pngio import write_png

        write_png(path, self.pixels)


def rt_transform(points: np.ndarray, pose: PoseRT) -> np.ndarray:
    """Apply R @ p + t to a [3, n] point array."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] != 3:
        raise ShapeMismatch(f"points must be [3, n], got {points.shape}")
    pose.validate()
    return pose.rotation @ points + pose.translation[:, None]


def perspective_project(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame [3, n] points to pixel coordinates [2, n]."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] != 3:
        raise ShapeMismatch(f"points must be [3, n], got {points.shape}")
    z = points[2]
    if np.any(z <= 0.0):
        raise BehindCamera(f"min depth {z.min():.4g} <= 0")
    return np.stack([cam.fx * points[0] / z + cam.cx, cam.fy * points[1] / z + cam.cy])


def _round_pixel(x: float) -> int:
    # round half up, independent of banker's rounding
    return int(np.floor(x + 0.5))


def _line_pixels(x0: int, y0: int, x1: int, y1: int):
    """Integer Bresenham line from (x0,y0) to (x1,y1), endpoints included."""
    dx, sx = abs(x1 - x0), 1 if x0 < x1 else -1
    dy, sy = -abs(y1 - y0), 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def box_corners(half_extents=(1.0, 1.4)) -> np.ndarray:
    """Canonical corners on the z=0 plane, [3,4]: TL, TR, BR, BL (y down)."""
    a, b = float(half_extents[0]), float(half_extents[1])
    return np.array([[-a, a, a, -a], [-b, -b, b, b], [0.0, 0.0, 0.0, 0.0]])


def rasterize_box_edges(
    pose: PoseRT,
    cam: CameraIntrinsics,
    image_size: tuple[int, int] = (64, 64),
    half_extents: tuple[float, float] = (1.0, 1.4),
) -> PoseImage:
    """Draw the posed canonical box as four 1-px colored edges on black.

    Corners are transformed, projected, and rounded to pixels; edges are
    Bresenham lines clipped to the image.  Raises DegenerateProjection when
    any two rounded corners land on the same pixel.
    """
    width, height = int(image_size[0]), int(image_size[1])
    uv = perspective_project(rt_transform(box_corners(half_extents), pose), cam)
    px = [(_round_pixel(uv[0, i]), _round_pixel(uv[1, i])) for i in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            if px[i] == px[j]:
                raise DegenerateProjection(f"corners {i} and {j} collapse to pixel {px[i]}")
    img = np.zeros((height, width, 3), dtype=np.uint8)
    # edge k connects corner k to corner k+1: top, right, bottom, left
    for k, (_, color) in enumerate(EDGE_COLORS):
        (x0, y0), (x1, y1) = px[k], px[(k + 1) % 4]
        for x, y in _line_pixels(x0, y0, x1, y1):
            if 0 <= x < width and 0 <= y < height:
                img[y, x] = color
    return PoseImage(width=width, height=height, pixels=img)


# ---------------------------------------------------------------------------
# expression side


def _box_blur_1axis(p: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = p.shape[axis]
    moved = np.moveaxis(p, axis, 0)
    cs = np.zeros((n + 1,) + moved.shape[1:])
    np.cumsum(moved, axis=0, out=cs[1:])
    idx = np.arange(n)
    hi = np.minimum(idx + radius + 1, n)
    lo = np.maximum(idx - radius, 0)
    out = (cs[hi] - cs[lo]) / (hi - lo).reshape((-1,) + (1,) * (p.ndim - 1))
    return np.moveaxis(out, 0, axis)


def random_blur_augment(patch: np.ndarray, strength: tuple[int, int], seed: int) -> np.ndarray:
    """Box-blur a 2D patch with radius drawn uniformly from [lo, hi].

    The window is clipped at the borders and renormalized, so a constant
    patch stays constant and the mean drifts only through border effects.
    Radius 0 returns the input unchanged.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ShapeMismatch(f"patch must be 2D grayscale, got {patch.shape}")
    lo, hi = int(strength[0]), int(strength[1])
    if lo < 0 or hi < lo:
        raise ShapeMismatch(f"bad blur strength range [{lo}, {hi}]")
    radius = int(np.random.default_rng(seed).integers(lo, hi + 1))
    if radius == 0:
        return patch.copy()
    return _box_blur_1axis(_box_blur_1axis(patch, radius, 0), radius, 1)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize; identity when sizes already match."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    r0, r1, rf = coords(h, out_h)
    c0, c1, cf = coords(w, out_w)
    top = img[r0][:, c0] * (1 - cf) + img[r0][:, c1] * cf
    bot = img[r1][:, c0] * (1 - cf) + img[r1][:, c1] * cf
    return top * (1 - rf[:, None]) + bot * rf[:, None]


class PatchEncoder:
    """Fixed seeded random projection of a 16x16 grayscale patch, L2-normed.

    Not trainable: the projection matrix is a function of (out_dim, seed)
    only.  An all-zero patch encodes to the zero vector (norm guard).
    """

    def __init__(self, out_dim: int, seed: int):
        self.out_dim = int(out_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((self.out_dim, 256)) / np.sqrt(256.0)

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.ndim == 3:
            patch = patch.mean(axis=0)  # collapse channels to grayscale
        if patch.ndim != 2:
            raise ShapeMismatch(f"patch must be 2D (or [c,h,w]), got {patch.shape}")
        flat = _resize_bilinear(patch, 16, 16).reshape(256)
        v = self.matrix @ flat
        n = np.linalg.norm(v)
        return v / n if n > 0.0 else np.zeros(self.out_dim)


def toy_patch_encoder(patch: np.ndarray, out_dim: int, seed: int) -> np.ndarray:
    return PatchEncoder(out_dim, seed)(patch)


@dataclass
class ExpressionProjection:
    """Learned maps from raw expression inputs to feature-token width."""

    w_coeff: Tensor
    b_coeff: Tensor
    w_eye: Tensor
    b_eye: Tensor
    w_mouth: Tensor
    b_mouth: Tensor

    def named_tensors(self, prefix: str):
        for name in ("w_coeff", "b_coeff", "w_eye", "b_eye", "w_mouth", "b_mouth"):
            yield f"{prefix}.{name}", getattr(self, name)


def expression_projection(width: int, rng: np.random.Generator) -> ExpressionProjection:
    def mat(rows):
        return param(rng.standard_normal((rows, width)) / np.sqrt(rows))

    return ExpressionProjection(
        w_coeff=mat(EXPRESSION_COEFF_COUNT),
        b_coeff=param(np.zeros(width)),
        w_eye=mat(width),
        b_eye=param(np.zeros(width)),
        w_mouth=mat(width),
        b_mouth=param(np.zeros(width)),
    )


def assemble_expression_features(
    coefficients: np.ndarray,
    eye_patch: np.ndarray,
    mouth_patch: np.ndarray,
    encoder: PatchEncoder,
    proj: ExpressionProjection,
) -> Tensor:
    """Build the 3-token expression sequence: [coefficients, eye, mouth].

    Coefficients (51 floats in [0,1]) go through the learned 51->width map;
    each encoded patch goes through its own learned width->width map.  Output
    is [3, width] and differentiable w.r.t. the projection parameters.  All
    zero inputs with zero biases give exactly zero tokens.
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (EXPRESSION_COEFF_COUNT,):
        raise ShapeMismatch(
            f"need {EXPRESSION_COEFF_COUNT} coefficients, got {coefficients.shape}"
        )
    width = proj.w_coeff.shape[1]
    if encoder.out_dim != width:
        raise ShapeMismatch(f"encoder width {encoder.out_dim} != projection width {width}")

    def token(vec: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
        row = constant(vec.reshape(1, -1))
        return add(matmul(row, w), reshape(b, (1, width)))

    toks = [
        token(coefficients, proj.w_coeff, proj.b_coeff),
        token(encoder(eye_patch), proj.w_eye, proj.b_eye),
        token(encoder(mouth_patch), proj.w_mouth, proj.b_mouth),
    ]
    return concat(toks, axis=0)
