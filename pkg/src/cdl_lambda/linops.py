"""Linear operators of the inverse problem.

Conventions
-----------
* A complex image or k-space array is a ``complex128`` array of shape ``(H, W)``.
  k-space uses the numpy FFT layout: DC sits at index ``(0, 0)``.
* A coefficient stack is complex with shape ``(K, H, W)``; its real two-channel
  form used by the autodiff engine has shape ``(K, 2, H, W)`` with channel 0 the
  real part and channel 1 the imaginary part.
* The DFT is unitary (``norm="ortho"``), so ``||A|| <= 1``.
* Dictionary convolutions are circular and use the *true* convolution with the
  kernel centre at offset zero; a centred unit impulse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dictionary",
    "LowResMask",
    "CodingOperator",
    "forward_A",
    "adjoint_A",
    "dict_synthesize",
    "dict_analyze",
    "operator_norm_sq",
    "to_channels",
    "from_channels",
    "stack_to_channels",
    "stack_from_channels",
]


def to_channels(x: np.ndarray) -> np.ndarray:
    """Complex ``(..., H, W)`` -> real ``(..., 2, H, W)``."""
    return np.stack([x.real, x.imag], axis=-3)


def from_channels(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


# complex stacks are (K, H, W); the channel form is (K, 2, H, W)
stack_to_channels = to_channels
stack_from_channels = from_channels


@dataclass
class LowResMask:
    """Binary k-space mask keeping a centred ``keep_h x keep_w`` band.

    A row frequency ``f`` (in cycles, ``-H/2 <= f < H/2``) is kept when
    ``|f| < keep_h / 2``; ``keep_h >= H`` keeps every row. The mask is
    therefore symmetric about DC.
    """

    height: int
    width: int
    keep_h: int
    keep_w: int
    array: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.keep_h < 1 or self.keep_w < 1:
            raise ValueError("retained bandwidth must be positive")
        rows = _band(self.height, self.keep_h)
        cols = _band(self.width, self.keep_w)
        self.array = np.logical_and.outer(rows, cols)

    @classmethod
    def from_fraction(cls, height: int, width: int, keep_frac: float = 0.5) -> "LowResMask":
        if not 0 < keep_frac <= 1:
            raise ValueError(f"keep_frac must lie in (0, 1], got {keep_frac}")
        return cls(height, width, round(keep_frac * height), round(keep_frac * width))

    @classmethod
    def full(cls, height: int, width: int) -> "LowResMask":
        return cls(height, width, height, width)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_kept(self) -> int:
        return int(self.array.sum())


def _band(n: int, keep: int) -> np.ndarray:
    if keep >= n:
        return np.ones(n, dtype=bool)
    f = np.fft.fftfreq(n, d=1.0 / n)
    return np.abs(f) < keep / 2


@dataclass
class Dictionary:
    """``K`` real ``k_f x k_f`` convolutional filters plus provenance metadata."""

    filters: np.ndarray
    meta: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self) -> None:
        self.filters = np.ascontiguousarray(self.filters, dtype=np.float64)
        if self.filters.ndim != 3:
            raise ValueError(f"filters must have shape (K, k_f, k_f), got {self.filters.shape}")
        K, kh, kw = self.filters.shape
        if K < 1:
            raise ValueError("a dictionary needs at least one filter")
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"filters must be square with odd side, got {kh}x{kw}")
        self._spectra: dict[tuple[int, int], np.ndarray] = {}

    @property
    def K(self) -> int:
        return self.filters.shape[0]

    @property
    def k_f(self) -> int:
        return self.filters.shape[1]

    @property
    def beta(self) -> float | None:
        return self.meta.get("beta")

    def norms(self) -> np.ndarray:
        return np.sqrt((self.filters**2).sum(axis=(1, 2)))

    def is_unit_norm(self, tol: float = 1e-8) -> bool:
        return bool(np.all(np.abs(self.norms() - 1.0) <= tol))

    def permuted(self, perm) -> "Dictionary":
        return Dictionary(self.filters[np.asarray(perm)], dict(self.meta))

    def spectrum(self, height: int, width: int) -> np.ndarray:
        """Unnormalised DFT of each zero-padded, centre-at-origin filter, ``(K, H, W)``."""
        key = (height, width)
        if key not in self._spectra:
            k = self.k_f
            if k > height or k > width:
                raise ValueError(f"filter side {k} exceeds image size {height}x{width}")
            pad = np.zeros((self.K, height, width))
            pad[:, :k, :k] = self.filters
            pad = np.roll(pad, (-(k // 2), -(k // 2)), axis=(1, 2))
            self._spectra[key] = np.fft.fft2(pad)
        return self._spectra[key]


def _check_image(x: np.ndarray, mask: LowResMask) -> None:
    if x.shape != mask.shape:
        raise ValueError(f"shape mismatch: array {x.shape} vs mask {mask.shape}")


def forward_A(x: np.ndarray, mask: LowResMask) -> np.ndarray:
    """``S F x``: unitary 2D DFT followed by the low-resolution mask."""
    _check_image(x, mask)
    return np.fft.fft2(x, norm="ortho") * mask.array


def adjoint_A(y: np.ndarray, mask: LowResMask) -> np.ndarray:
    """``F^H S y``, the zero-filled reconstruction."""
    _check_image(y, mask)
    return np.fft.ifft2(y * mask.array, norm="ortho")


def _check_stack(s: np.ndarray, D: Dictionary) -> None:
    if s.ndim != 3 or s.shape[0] != D.K:
        raise ValueError(f"coefficient stack {s.shape} does not match K={D.K}")


def dict_synthesize(s: np.ndarray, D: Dictionary) -> np.ndarray:
    """``sum_k d_k * s_k`` with circular boundary; works on complex stacks."""
    _check_stack(s, D)
    spec = D.spectrum(*s.shape[1:])
    out = np.fft.ifft2((spec * np.fft.fft2(s)).sum(axis=0))
    return out if np.iscomplexobj(s) else out.real


def dict_analyze(x: np.ndarray, D: Dictionary) -> np.ndarray:
    """Adjoint of :func:`dict_synthesize`: correlate ``x`` with every filter."""
    if x.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {x.shape}")
    spec = D.spectrum(*x.shape)
    out = np.fft.ifft2(np.conj(spec) * np.fft.fft2(x)[None])
    return out if np.iscomplexobj(x) else out.real


class CodingOperator:
    """``B = A D`` for a fixed dictionary and mask, evaluated in the Fourier domain.

    Both ``A^H A`` and every ``d_k *`` are diagonalised by the DFT, so the
    normal operator ``B^H B`` costs one forward and one inverse FFT per filter.
    """

    def __init__(self, D: Dictionary, mask: LowResMask):
        self.D = D
        self.mask = mask
        self.spec = D.spectrum(mask.height, mask.width)
        self._m = mask.array.astype(np.float64)

    @property
    def stack_shape(self) -> tuple[int, int, int]:
        return (self.D.K, self.mask.height, self.mask.width)

    def apply(self, s: np.ndarray) -> np.ndarray:
        """``B s`` in k-space for a complex stack ``(K, H, W)``."""
        h, w = self.mask.shape
        return (self.spec * np.fft.fft2(s)).sum(axis=0) * (self._m / np.sqrt(h * w))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        h, w = self.mask.shape
        return np.fft.ifft2(np.conj(self.spec) * (y * (self._m * np.sqrt(h * w)))[None])

    def normal(self, s: np.ndarray) -> np.ndarray:
        """``B^H B s``."""
        spec = self.spec
        acc = (spec * np.fft.fft2(s)).sum(axis=0) * self._m
        return np.fft.ifft2(np.conj(spec) * acc[None])

    def normal_channels(self, s: np.ndarray) -> np.ndarray:
        return to_channels(self.normal(from_channels(s)))

    def synth_channels(self, s: np.ndarray) -> np.ndarray:
        """Real ``(K, 2, H, W)`` -> real ``(2, H, W)`` synthesis."""
        return to_channels(dict_synthesize(from_channels(s), self.D))

    def analyze_channels(self, x: np.ndarray) -> np.ndarray:
        return to_channels(dict_analyze(from_channels(x), self.D))

    def norm_sq(self, iters: int = 50, seed: int = 0) -> float:
        return operator_norm_sq(self.D, self.mask, iters, seed)


def operator_norm_sq(D: Dictionary, mask: LowResMask, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ``||A D||^2 = lambda_max(B^H B)``.

    Returns ``||M v_j|| / ||v_j||`` after ``iters`` steps, which for the PSD
    normal operator ``M`` is nondecreasing in ``iters``. The filters are put
    in a canonical order first, so the estimate does not depend on how they
    are numbered.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    flat = D.filters.reshape(D.K, -1)
    order = np.lexsort(flat.T[::-1])
    op = CodingOperator(Dictionary(D.filters[order], D.meta), mask)
    rng = np.random.default_rng(seed)
    shape = op.stack_shape
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = op.normal(v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est
