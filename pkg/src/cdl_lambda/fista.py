"""Unrolled FISTA for the weighted-l1 convolutional sparse coding problem.

Solves ``min_s 1/2 ||A D s - y'||^2 + ||Lambda s||_1`` where the l1 norm of a
complex stack is the l1 norm of its real and imaginary parts and each map
``Lambda_k`` is shared between the two parts.

Iterates are :class:`~cdl_lambda.autodiff.Tensor` objects in the two-channel
layout ``(K, 2, H, W)``, so the solver can run on or off the tape with exactly
the same floating-point operations.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .linops import CodingOperator, Dictionary, LowResMask, to_channels

__all__ = [
    "FistaConfig",
    "DivergenceError",
    "weighted_l1_prox",
    "fista_solve",
    "objective",
    "step_size",
]


TrackMode = Literal["none", "full", "truncated"]


class DivergenceError(ArithmeticError):
    """The FISTA objective blew up; the step size is too large."""


@dataclass(frozen=True)
class FistaConfig:
    """Solver settings.

    ``T_grad`` is the number of final iterations recorded on the tape in
    truncated mode. ``step=None`` uses ``safety / L`` with ``L`` estimated by
    ``power_iters`` power iterations.
    """

    T: int = 20
    T_grad: int = 8
    step: float | None = None
    momentum_a: float = 3.0
    safety: float = 0.95
    power_iters: int = 50

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 1 <= self.T_grad <= self.T:
            raise ValueError(f"need 1 <= T_grad <= T, got T_grad={self.T_grad}, T={self.T}")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.momentum_a <= 2:
            raise ValueError("momentum_a must exceed 2")

    @classmethod
    def full_scale(cls) -> "FistaConfig":
        return cls(T=64, T_grad=28)


_STEP_CACHE: dict[tuple, float] = {}


def step_size(D: Dictionary, mask: LowResMask, cfg: FistaConfig) -> float:
    if cfg.step is not None:
        return cfg.step
    key = (D.filters.tobytes(), D.filters.shape, mask.array.tobytes(), mask.shape, cfg.power_iters)
    L = _STEP_CACHE.get(key)
    if L is None:
        L = CodingOperator(D, mask).norm_sq(cfg.power_iters, seed=0)
        if len(_STEP_CACHE) > 256:
            _STEP_CACHE.clear()
        _STEP_CACHE[key] = L
    if L <= 0:
        raise ValueError("operator norm is zero; dictionary or mask is degenerate")
    return cfg.safety / L


def _lambda_tensor(lambda_maps, K: int) -> ad.Tensor:
    lam = lambda_maps if isinstance(lambda_maps, ad.Tensor) else ad.Tensor(lambda_maps)
    if lam.shape[0] != K:
        raise ValueError(f"got {lam.shape[0]} sparsity maps for K={K} filters")
    if lam.ndim == 3:
        lam = ad.reshape(lam, (lam.shape[0], 1) + lam.shape[1:])
    return lam


def weighted_l1_prox(s, lambda_maps, step: float) -> ad.Tensor:
    """Soft-threshold real and imaginary parts with ``step * Lambda_k`` per pixel.

    ``s`` has shape ``(K, 2, H, W)``; ``lambda_maps`` has shape ``(K, H, W)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    s = s if isinstance(s, ad.Tensor) else ad.Tensor(s)
    lam = _lambda_tensor(lambda_maps, s.shape[0])
    if np.any(lam.data <= 0) or not np.all(np.isfinite(lam.data)):
        raise ValueError("sparsity maps must be strictly positive and finite")
    return ad.soft_threshold(s, ad.mul(step, lam))


def objective(s, op: CodingOperator, y_prime: np.ndarray, lambda_maps) -> float:
    """``1/2 ||B s - y'||^2 + sum_k Lambda_k (|Re s_k| + |Im s_k|)``."""
    sd = s.data if isinstance(s, ad.Tensor) else np.asarray(s)
    lam = lambda_maps.data if isinstance(lambda_maps, ad.Tensor) else np.asarray(lambda_maps)
    if lam.ndim == 3:
        lam = lam[:, None]
    sc = sd[:, 0] + 1j * sd[:, 1]
    r = op.apply(sc) - y_prime
    return 0.5 * float(np.vdot(r, r).real) + float((lam * np.abs(sd)).sum())


def fista_solve(
    s0,
    mask: LowResMask,
    D: Dictionary,
    y_prime: np.ndarray,
    lambda_maps,
    cfg: FistaConfig,
    track: TrackMode = "truncated",
    history: list | None = None,
) -> ad.Tensor:
    """Run ``cfg.T`` FISTA iterations from ``s0`` and return the last iterate.

    ``track`` selects which iterations are recorded on the active tape:
    ``"full"`` records all, ``"truncated"`` only the final ``cfg.T_grad``,
    ``"none"`` none. Forward values do not depend on the mode.
    If ``history`` is given, the objective after every iteration is appended.
    """
    op = CodingOperator(D, mask)
    K, h, w = op.stack_shape
    if y_prime.shape != (h, w):
        raise ValueError(f"y' has shape {y_prime.shape}, expected {(h, w)}")
    s = s0 if isinstance(s0, ad.Tensor) else ad.Tensor(s0)
    if s.shape != (K, 2, h, w):
        raise ValueError(f"s0 has shape {s.shape}, expected {(K, 2, h, w)}")
    lam = _lambda_tensor(lambda_maps, K)
    if np.any(lam.data <= 0) or not np.all(np.isfinite(lam.data)):
        raise ValueError("sparsity maps must be strictly positive and finite")

    step = step_size(D, mask, cfg)
    a = cfg.momentum_a
    # gradient of the data term: B^H B z - B^H y'
    bty = to_channels(op.adjoint(y_prime))
    normal = op.normal_channels

    f0 = objective(s, op, y_prime, lam)
    limit = 10.0 * f0 if f0 > 0 else np.inf
    n_free = {"full": 0, "truncated": cfg.T - cfg.T_grad, "none": cfg.T}[track]

    s_prev = s
    z = s
    tau = None
    for j in range(1, cfg.T + 1):
        ctx = ad.no_grad() if j <= n_free else contextlib.nullcontext()
        with ctx:
            if tau is None or (j == n_free + 1 and lam.requires_grad):
                tau = ad.mul(step, lam)
            grad = ad.sub(ad.linear_map(z, normal, normal), bty)
            s_new = ad.soft_threshold(ad.sub(z, ad.mul(step, grad)), tau)
            coeff = (j - 1) / (j + a)
            z = ad.add(s_new, ad.mul(coeff, ad.sub(s_new, s_prev))) if j > 1 else s_new
            s_prev = s_new
        f = objective(s_new, op, y_prime, lam)
        if history is not None:
            history.append(f)
        if not np.isfinite(f) or f > limit:
            raise DivergenceError(
                f"objective {f:.4g} exceeded 10x its initial value {f0:.4g} at iteration {j}; "
                f"step {step:.4g} is too large"
            )
    return s_prev
