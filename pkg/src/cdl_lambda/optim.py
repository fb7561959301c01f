"""Adam with per-group learning rates."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over groups of ``(params, lr)``; an optional projection runs after each step."""

    def __init__(
        self,
        groups: Sequence[tuple[Sequence[Tensor], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        project: Callable[[], None] | None = None,
    ):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        for _, lr in self.groups:
            if lr <= 0:
                raise ValueError("learning rates must be positive")
        self.b1, self.b2 = betas
        self.eps = eps
        self.project = project
        self.steps = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, scale: float = 1.0) -> None:
        """Apply one update using ``scale * p.grad``; parameters without a gradient are skipped."""
        self.steps += 1
        c1 = 1.0 - self.b1**self.steps
        c2 = 1.0 - self.b2**self.steps
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad * scale
                key = id(p)
                m = self._m.get(key, np.zeros_like(p.data))
                v = self._v.get(key, np.zeros_like(p.data))
                m = self.b1 * m + (1 - self.b1) * g
                v = self.b2 * v + (1 - self.b2) * g * g
                self._m[key], self._v[key] = m, v
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        if self.project is not None:
            self.project()

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()
