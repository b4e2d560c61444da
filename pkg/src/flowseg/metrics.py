"""Overlap and reconstruction metrics on numpy grids.

Masks are compared as boolean foreground sets.  PSNR and SSIM expect values
on a ``[0, 1]`` scale; use :func:`denormalize` for ``[-1, 1]`` images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(pred, truth, empty_value: float = 1.0) -> float:
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    _same_shape(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return empty_value
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def iou(pred, truth, empty_value: float = 1.0) -> float:
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    _same_shape(pred, truth)
    union = int(np.logical_or(pred, truth).sum())
    if union == 0:
        return empty_value
    return int(np.logical_and(pred, truth).sum()) / union


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio with peak 1.0; ``inf`` for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_2d(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    def filt(x):
        return convolve2d(x, window[::-1, ::-1], mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Only windows fully inside the image contribute.  Inputs may be ``(H, W)``
    or ``(H, W, C)``; multichannel scores are averaged over channels.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C), got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    if a.ndim == 2:
        return _ssim_2d(a, b, window)
    return float(np.mean([_ssim_2d(a[..., c], b[..., c], window) for c in range(a.shape[2])]))


def denormalize(x):
    """``[-1, 1]`` to ``[0, 1]``."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


@dataclass
class MetricReport:
    """Arithmetic means over evaluated items; ``None`` where a metric was not computed."""

    dice: float | None = None
    iou: float | None = None
    ssim: float | None = None
    psnr: float | None = None
    count: int = 0
    items: list[dict] = field(default_factory=list)

    @classmethod
    def aggregate(cls, items: list[dict]) -> "MetricReport":
        report = cls(count=len(items), items=items)
        for key in ("dice", "iou", "ssim", "psnr"):
            values = [it[key] for it in items if it.get(key) is not None]
            if values:
                setattr(report, key, float(np.mean(values)))
        return report

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("dice", "iou", "ssim", "psnr", "count")}


def format_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.6f}" if isinstance(v, float) else str(v)
