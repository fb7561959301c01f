"""Synthetic phantoms and retrospective low-resolution, noisy k-space simulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linops import LowResMask, forward_A
from .rng import stream

__all__ = [
    "NoiseModel",
    "Sample",
    "PHANTOMS",
    "phantom",
    "simulate",
    "make_dataset",
    "SIGMA_SQ_PRESETS",
]

PHANTOMS = ("shepp_logan_like", "random_blobs", "piecewise_smooth")

# noise variances used for the low-field experiments
SIGMA_SQ_PRESETS = (0.2, 0.3)


@dataclass(frozen=True)
class NoiseModel:
    """Complex Gaussian noise with total variance ``sigma_sq`` per k-space sample."""

    sigma_sq: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_sq < 0:
            raise ValueError(f"sigma_sq must be nonnegative, got {self.sigma_sq}")


@dataclass
class Sample:
    """One measurement/target pair."""

    y: np.ndarray
    x_true: np.ndarray
    mask: LowResMask
    name: str = ""
    meta: dict = field(default_factory=dict)


def simulate(x_true: np.ndarray, mask: LowResMask, noise: NoiseModel) -> np.ndarray:
    """``y = S F x_true + e``; ``e`` lives on retained frequencies only.

    Real and imaginary noise components each have variance ``sigma_sq / 2``.
    """
    y = forward_A(x_true, mask)
    if noise.sigma_sq == 0:
        return y
    rng = stream(noise.seed, "noise")
    sd = np.sqrt(noise.sigma_sq / 2.0)
    e = rng.normal(0.0, sd, y.shape) + 1j * rng.normal(0.0, sd, y.shape)
    return y + e * mask.array


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.linspace(-1, 1, h, endpoint=False) + 1.0 / h,
                         np.linspace(-1, 1, w, endpoint=False) + 1.0 / w, indexing="ij")
    return yy, xx


def _ellipse(yy, xx, cy, cx, ay, ax, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _smooth_phase(yy, xx, rng) -> np.ndarray:
    a = rng.uniform(-1, 1, 4) * np.array([np.pi / 4, np.pi / 6, np.pi / 6, np.pi / 8])
    return a[0] + a[1] * xx + a[2] * yy + a[3] * np.cos(np.pi * xx * yy)


def _shepp_logan_like(yy, xx, rng) -> np.ndarray:
    # (intensity, cy, cx, ay, ax, angle) loosely after the classic head phantom
    base = [
        (1.0, 0.0, 0.0, 0.92, 0.69, 0.0),
        (-0.75, -0.018, 0.0, 0.874, 0.662, 0.0),
        (-0.2, 0.0, 0.22, 0.31, 0.11, -0.31),
        (-0.2, 0.0, -0.22, 0.41, 0.16, 0.31),
        (0.15, 0.35, 0.0, 0.25, 0.21, 0.0),
        (0.15, 0.1, 0.0, 0.046, 0.046, 0.0),
        (0.15, -0.605, -0.08, 0.046, 0.023, 0.0),
        (0.15, -0.605, 0.06, 0.046, 0.023, 0.0),
        (0.2, -0.1, 0.0, 0.05, 0.05, 0.0),
    ]
    img = np.zeros_like(yy)
    for i, (val, cy, cx, ay, ax, th) in enumerate(base):
        if i >= 2:
            cy += rng.uniform(-0.05, 0.05)
            cx += rng.uniform(-0.05, 0.05)
            ay *= rng.uniform(0.8, 1.2)
            ax *= rng.uniform(0.8, 1.2)
            th += rng.uniform(-0.3, 0.3)
            val *= rng.uniform(0.7, 1.3)
        img += val * _ellipse(yy, xx, cy, cx, ay, ax, th)
    return img


def _random_blobs(yy, xx, rng, n_blobs: int) -> np.ndarray:
    img = np.zeros_like(yy)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(-0.6, 0.6, 2)
        ay, ax = rng.uniform(0.08, 0.35, 2)
        img += rng.uniform(0.3, 1.0) * _ellipse(yy, xx, cy, cx, ay, ax, rng.uniform(0, np.pi))
    return img


def _piecewise_smooth(yy, xx, rng) -> np.ndarray:
    support = _ellipse(yy, xx, 0.0, 0.0, rng.uniform(0.75, 0.9), rng.uniform(0.65, 0.85), rng.uniform(-0.3, 0.3))
    g = rng.uniform(-0.3, 0.3, 2)
    img = support * (0.5 + g[0] * yy + g[1] * xx)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(-0.5, 0.5, 2)
        region = _ellipse(yy, xx, cy, cx, *rng.uniform(0.06, 0.3, 2), rng.uniform(0, np.pi)) & support
        slope = rng.uniform(-1.0, 1.0, 2)
        img = np.where(region, rng.uniform(0.2, 1.0) + 0.3 * (slope[0] * (yy - cy) + slope[1] * (xx - cx)), img)
    return np.clip(img, 0.0, None)


def phantom(kind: str, h: int, w: int, seed: int = 0, n_blobs: int = 6) -> np.ndarray:
    """Complex phantom with magnitude normalised to ``[0, 1]`` and smooth random phase."""
    if h % 2 or w % 2:
        raise ValueError(f"phantom sides must be even, got {h}x{w}")
    rng = stream(seed, "phantom", kind)
    yy, xx = _grid(h, w)
    if kind == "shepp_logan_like":
        mag = _shepp_logan_like(yy, xx, rng)
    elif kind == "random_blobs":
        mag = _random_blobs(yy, xx, rng, n_blobs)
    elif kind == "piecewise_smooth":
        mag = _piecewise_smooth(yy, xx, rng)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOMS}")
    mag = np.abs(mag)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return mag * np.exp(1j * _smooth_phase(yy, xx, rng))


def make_dataset(
    n: int,
    size: int = 32,
    sigma_sq: float = 0.2,
    keep_frac: float = 0.5,
    seed: int = 0,
    kinds: tuple[str, ...] = PHANTOMS,
) -> list[Sample]:
    """``n`` simulated samples cycling through ``kinds``; each draws its own streams."""
    mask = LowResMask.from_fraction(size, size, keep_frac)
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        pseed = int(stream(seed, "dataset", str(i)).integers(2**31))
        x = phantom(kind, size, size, seed=pseed)
        y = simulate(x, mask, NoiseModel(sigma_sq, seed=pseed))
        out.append(Sample(y, x, mask, name=f"{kind}_{i:04d}", meta={"kind": kind, "seed": pseed}))
    return out
