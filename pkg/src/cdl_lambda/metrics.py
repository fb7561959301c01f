"""Evaluation metrics: masked MSE, masked SSIM and the reference-free blur metric."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = ["eval_mask_from", "mse", "ssim", "blur_metric", "gaussian_window"]


def eval_mask_from(ref: np.ndarray, threshold_frac: float = 0.05) -> np.ndarray:
    """Foreground ``|ref| >= threshold_frac * max|ref|`` followed by one 3x3 closing."""
    mag = np.abs(ref)
    peak = mag.max()
    if peak == 0:
        raise ValueError("cannot derive a foreground mask from an all-zero image")
    fg = mag >= threshold_frac * peak
    se = np.ones((3, 3), dtype=bool)
    fg = ndimage.binary_dilation(fg, se, border_value=0)
    # border_value=1 keeps foreground that touches the image edge
    return ndimage.binary_erosion(fg, se, border_value=1)


def _mask_or_all(m, shape) -> np.ndarray:
    if m is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match image {shape}")
    if not m.any():
        raise ValueError("evaluation mask is empty")
    return m


def mse(x: np.ndarray, ref: np.ndarray, m: np.ndarray | None = None) -> float:
    """Mean of ``|x - ref|^2`` over foreground pixels."""
    m = _mask_or_all(m, ref.shape)
    d = np.abs(x - ref) ** 2
    return float(d[m].mean())


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(a: np.ndarray, g: np.ndarray, norm: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(a, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out / norm


def ssim(
    x: np.ndarray,
    ref: np.ndarray,
    m: np.ndarray | None = None,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """SSIM of magnitude images, averaged over windows centred in the mask.

    Local statistics use an ``win_size x win_size`` Gaussian window truncated at
    the image border and renormalised over the in-bounds pixels. The dynamic
    range is the spread of ``|ref|`` over the foreground.
    """
    m = _mask_or_all(m, ref.shape)
    a = np.abs(x).astype(np.float64)
    b = np.abs(ref).astype(np.float64)
    L = float(b[m].max() - b[m].min())
    if L == 0:
        L = float(b[m].max()) or 1.0
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    g = gaussian_window(win_size, sigma)
    norm = _local_mean(np.ones_like(a), g, 1.0)
    mu_a = _local_mean(a, g, norm)
    mu_b = _local_mean(b, g, norm)
    var_a = _local_mean(a * a, g, norm) - mu_a * mu_a
    var_b = _local_mean(b * b, g, norm) - mu_b * mu_b
    cov = _local_mean(a * b, g, norm) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den)[m].mean())


def blur_metric(x: np.ndarray, h_size: int = 9) -> float:
    """No-reference perceptual blur in ``[0, 1]``; higher is blurrier.

    The magnitude image is re-blurred with an ``h_size`` box filter along each
    axis. The score per axis is the fraction of neighbour-difference energy
    that re-blurring *fails* to remove; the result is the larger of the two.
    A constant image scores 1.0.
    """
    img = np.abs(np.asarray(x)).astype(np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    scores = []
    for axis in (0, 1):
        blurred = ndimage.uniform_filter1d(img, h_size, axis=axis, mode="reflect")
        d_f = np.abs(np.diff(img, axis=axis))
        d_b = np.abs(np.diff(blurred, axis=axis))
        v = np.maximum(0.0, d_f - d_b)
        s_f = d_f.sum()
        if s_f == 0:
            scores.append(1.0)
            continue
        scores.append(float((s_f - v.sum()) / s_f))
    return max(scores)
