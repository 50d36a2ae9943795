"""Reconstruction metrics for [0, 1] images of any channel layout."""

from __future__ import annotations

import numpy as np

from skattn.autodiff import ShapeMismatch

__all__ = ["psnr", "ssim"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0, 1] images; +inf when the images are equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_2d(a: np.ndarray, b: np.ndarray, window: int, k1: float, k2: float) -> float:
    view = np.lib.stride_tricks.sliding_window_view
    wa = view(a, (window, window))
    wb = view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa**2).mean(axis=(-1, -2)) - mu_a**2
    var_b = (wb**2).mean(axis=(-1, -2)) - mu_b**2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    c1 = k1 * k1
    c2 = k2 * k2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(
    a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03
) -> float:
    """Mean SSIM over all uniform window x window patches (stride 1).

    Inputs are [h, w] or [c, h, w] in [0, 1] (dynamic range 1); channels are
    averaged.  Population (biased) moments are used inside each window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        planes = [(a, b)]
    elif a.ndim == 3:
        planes = [(a[c], b[c]) for c in range(a.shape[0])]
    else:
        raise ShapeMismatch(f"ssim expects [h, w] or [c, h, w], got {a.shape}")
    if planes[0][0].shape[0] < window or planes[0][0].shape[1] < window:
        raise ShapeMismatch(f"image {a.shape} smaller than {window}x{window} window")
    return float(np.mean([_ssim_2d(pa, pb, window, k1, k2) for pa, pb in planes]))
