"""Tikhonov-gradient high-pass split of the zero-filled image.

``x_low = argmin_x 1/2 ||x - x0||^2 + beta/2 ||grad x||^2`` with periodic
forward differences, solved exactly as a Fourier multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import LowResMask, forward_A

__all__ = ["HighpassConfig", "gradient_symbol", "lowpass_multiplier", "split", "residual_data"]


@dataclass(frozen=True)
class HighpassConfig:
    beta: float = 0.25

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")


def gradient_symbol(height: int, width: int) -> np.ndarray:
    """``|gamma(f)|^2``: Fourier symbol of ``grad^T grad`` for periodic forward differences."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    return 4.0 * np.sin(np.pi * fy) ** 2 + 4.0 * np.sin(np.pi * fx) ** 2


def lowpass_multiplier(height: int, width: int, beta: float) -> np.ndarray:
    return 1.0 / (1.0 + beta * gradient_symbol(height, width))


def split(x0: np.ndarray, cfg: HighpassConfig | float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x_low, x_high)`` with ``x_low + x_high == x0``."""
    beta = cfg.beta if isinstance(cfg, HighpassConfig) else float(cfg)
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if x0.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {x0.shape}")
    if beta == 0:
        return x0.copy(), np.zeros_like(x0)
    m = lowpass_multiplier(*x0.shape, beta)
    x_low = np.fft.ifft2(np.fft.fft2(x0) * m)
    if not np.iscomplexobj(x0):
        x_low = x_low.real
    return x_low, x0 - x_low


def residual_data(y: np.ndarray, x_low: np.ndarray, mask: LowResMask) -> np.ndarray:
    """``y' = y - A x_low``."""
    if y.shape != x_low.shape:
        raise ValueError(f"shape mismatch: k-space {y.shape} vs image {x_low.shape}")
    return y - forward_A(x_low, mask)
