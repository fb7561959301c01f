"""Sparsity-level map estimators.

Three variants share one small U-Net implementation and differ only in what
they feed it and how its channels map onto filters:

* ``v1``: ``Lambda = t * softplus(u(x0))`` with a 2-to-K U-Net; ignores ``D``.
* ``v2``: ``Lambda = t * softplus(u(D^T x0))`` with a 2K-to-K U-Net.
* ``v3``: ``Lambda = R^-1 t * softplus(u(R D^T x0))`` with a 2-to-1 U-Net, where
  ``R`` moves the filter axis into the batch axis. The same network therefore
  sees every filter independently, which makes the estimator work for any
  ``K`` and equivariant under filter permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linops import Dictionary, dict_analyze, to_channels

__all__ = ["UNet", "LambdaEstimator", "estimate_v1", "estimate_v2", "estimate_v3", "VARIANTS"]

VARIANTS = ("v1", "v2", "v3")

# Initial gate. With unit-scale images a gate of 1 leaves every coefficient in
# the soft-threshold dead zone, where the loss is flat in all parameters.
T_INIT = 0.01


class UNet:
    """Encoder-decoder with skip concatenation.

    ``widths`` gives the channel count per resolution level (``len(widths)``
    levels, ``len(widths) - 1`` poolings). Each level applies two 3x3
    zero-padded convolutions with leaky-ReLU; decoding upsamples by nearest
    neighbour, convolves, concatenates the skip and applies two more
    convolutions. A final 1x1 convolution produces ``out_channels``.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        widths: tuple[int, ...] = (16, 32, 64),
        slope: float = 0.01,
        seed: int | np.random.Generator = 0,
    ):
        if not widths:
            raise ValueError("widths must be nonempty")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.widths = tuple(int(w) for w in widths)
        self.slope = float(slope)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}

        c = self.in_channels
        for lvl, w in enumerate(self.widths):
            self._conv(f"enc{lvl}a", c, w, 3, rng)
            self._conv(f"enc{lvl}b", w, w, 3, rng)
            c = w
        for lvl in range(len(self.widths) - 2, -1, -1):
            w = self.widths[lvl]
            self._conv(f"up{lvl}", c, w, 3, rng)
            self._conv(f"dec{lvl}a", 2 * w, w, 3, rng)
            self._conv(f"dec{lvl}b", w, w, 3, rng)
            c = w
        self._conv("head", c, self.out_channels, 1, rng)

    def _conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.params[f"{name}.w"] = ad.Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    @property
    def multiple(self) -> int:
        """Spatial sizes must be divisible by this."""
        return 2 ** (len(self.widths) - 1)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "widths": list(self.widths),
            "slope": self.slope,
        }

    def _apply(self, name: str, x: ad.Tensor, act: bool = True) -> ad.Tensor:
        p = self.params
        y = ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding="zero")
        return ad.leaky_relu(y, self.slope) if act else y

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ad.ShapeError(f"channel axis has {c} channels, U-Net expects {self.in_channels}")
        if h % self.multiple or w % self.multiple:
            raise ad.ShapeError(f"spatial size {h}x{w} not divisible by {self.multiple}")
        skips = []
        depth = len(self.widths)
        for lvl in range(depth):
            if lvl:
                x = ad.avg_pool2(x)
            x = self._apply(f"enc{lvl}b", self._apply(f"enc{lvl}a", x))
            skips.append(x)
        for lvl in range(depth - 2, -1, -1):
            x = self._apply(f"up{lvl}", ad.upsample2(x))
            x = ad.concat([x, skips[lvl]], axis=1)
            x = self._apply(f"dec{lvl}b", self._apply(f"dec{lvl}a", x))
        return self._apply("head", x, act=False)


@dataclass
class LambdaEstimator:
    """A U-Net plus the global positive scale ``t``."""

    variant: str
    unet: UNet
    t: ad.Tensor = field(default_factory=lambda: ad.Tensor(1.0, requires_grad=True))
    K: int | None = None  # fixed filter count for v1/v2, None for v3

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.t.data.item() <= 0:
            raise ValueError("t must be positive")
        want = {"v1": (2, self.K), "v2": (2 * (self.K or 0), self.K), "v3": (2, 1)}[self.variant]
        if (self.unet.in_channels, self.unet.out_channels) != want:
            raise ValueError(
                f"{self.variant} needs a {want[0]}-to-{want[1]} U-Net, got "
                f"{self.unet.in_channels}-to-{self.unet.out_channels}"
            )

    @classmethod
    def create(
        cls,
        variant: str,
        K: int | None = None,
        widths: tuple[int, ...] = (16, 32, 64),
        seed: int = 0,
        slope: float = 0.01,
        t_init: float = T_INIT,
    ) -> "LambdaEstimator":
        variant = variant.lower()
        if variant in ("v1", "v2") and not K:
            raise ValueError(f"{variant} needs a fixed filter count K")
        if variant == "v1":
            unet = UNet(2, K, widths, slope, seed)
        elif variant == "v2":
            unet = UNet(2 * K, K, widths, slope, seed)
        elif variant == "v3":
            unet, K = UNet(2, 1, widths, slope, seed), None
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return cls(variant, unet, t=ad.Tensor(float(t_init), requires_grad=True), K=K)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.unet.params.values()) + [self.t]

    def network_parameters(self) -> list[ad.Tensor]:
        return list(self.unet.params.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x0: np.ndarray, D: Dictionary) -> ad.Tensor:
        if self.variant == "v1":
            return estimate_v1(self, x0, D.K)
        if self.variant == "v2":
            return estimate_v2(self, x0, D)
        return estimate_v3(self, x0, D)


def _gate(est: LambdaEstimator, u: ad.Tensor) -> ad.Tensor:
    return ad.mul(est.t, ad.softplus(u))


def _check_variant(est: LambdaEstimator, variant: str) -> None:
    if est.variant != variant:
        raise ValueError(f"estimator is {est.variant}, not {variant}")


def _check_K(est: LambdaEstimator, K: int) -> None:
    if K != est.K:
        raise ValueError(f"{est.variant} estimator was built for K={est.K}, got a dictionary with K={K}")


def estimate_v1(est: LambdaEstimator, x0: np.ndarray, K: int) -> ad.Tensor:
    """``(K, H, W)`` maps from the zero-filled image alone."""
    _check_variant(est, "v1")
    _check_K(est, K)
    h, w = x0.shape
    u = est.unet(ad.Tensor(to_channels(x0)[None]))
    return ad.reshape(_gate(est, u), (K, h, w))


def estimate_v2(est: LambdaEstimator, x0: np.ndarray, D: Dictionary) -> ad.Tensor:
    """Maps from the analysis coefficients, channels interleaved ``(Re_k, Im_k)``."""
    _check_variant(est, "v2")
    _check_K(est, D.K)
    h, w = x0.shape
    z = to_channels(dict_analyze(x0, D))  # (K, 2, H, W), flattened to interleaved 2K channels
    u = est.unet(ad.Tensor(z.reshape(1, 2 * D.K, h, w)))
    return ad.reshape(_gate(est, u), (D.K, h, w))


def estimate_v3(est: LambdaEstimator, x0: np.ndarray, D: Dictionary) -> ad.Tensor:
    """Per-filter maps from one shared 2-to-1 U-Net; any ``K``."""
    _check_variant(est, "v3")
    h, w = x0.shape
    # R: (1, 2K, H, W) -> (K, 2, H, W), i.e. filters become the batch axis
    z = to_channels(dict_analyze(x0, D))
    u = est.unet(ad.Tensor(z))
    # R^-1: (K, 1, H, W) -> (1, K, H, W), stored without the unit batch axis
    return ad.reshape(_gate(est, u), (D.K, h, w))
