"""Convolutional dictionary pretraining and the dictionary bank.

Each dictionary is learned by batch alternating minimisation of

    sum_i 1/2 ||D s_i - x_high_i||^2 + lambda ||s_i||_1,   ||d_k|| = 1,

where ``x_high_i`` is the high-pass part of corpus image ``i``. One epoch
re-codes every image with FISTA (warm started, kept only if it lowers the
image's objective) and then takes a few backtracking projected-gradient steps
on the filters. Both half-steps are nonincreasing, so the recorded per-epoch
objective is too.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .fista import FistaConfig, fista_solve
from .highpass import split
from .io import read_dictionary, write_dictionary
from .linops import Dictionary, LowResMask, dict_synthesize, from_channels, to_channels
from .rng import stream

__all__ = [
    "PretrainGrid",
    "DictionaryBank",
    "dict_key",
    "parse_key",
    "pretrain_dictionary",
    "bank_build",
]

log = logging.getLogger(__name__)


def dict_key(K: int, k_f: int, lam: float, beta: float) -> str:
    return f"K{K}_kf{k_f}_lam{lam:g}_beta{beta:g}"


_KEY_RE = re.compile(r"K(\d+)_kf(\d+)_lam([^_]+)_beta([^_]+)")


def parse_key(key: str) -> tuple[int, int, float, float]:
    m = _KEY_RE.fullmatch(key)
    if m is None:
        raise ValueError(f"malformed dictionary key {key!r}")
    return int(m[1]), int(m[2]), float(m[3]), float(m[4])


@dataclass(frozen=True)
class PretrainGrid:
    betas: tuple[float, ...]
    lambdas: tuple[float, ...]
    kernel_sizes: tuple[int, ...]
    filter_counts: tuple[int, ...]

    def __post_init__(self) -> None:
        for name in ("betas", "lambdas", "kernel_sizes", "filter_counts"):
            vals = getattr(self, name)
            if any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be positive")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd")

    @classmethod
    def full(cls) -> "PretrainGrid":
        """Full-scale grid: 3 betas x 4 lambdas x 2 kernel sizes x 4 filter counts."""
        return cls((0.1, 0.25, 0.5), (0.1, 0.5, 2.0, 4.0), (9, 11), (16, 32, 64, 128))

    @classmethod
    def desk(cls) -> "PretrainGrid":
        return cls((0.1, 0.25), (0.1, 0.5), (5, 7), (4, 8))

    def keys(self) -> list[tuple[int, int, float, float]]:
        """``(K, k_f, lambda, beta)`` for every grid point."""
        return [
            (K, k, lam, beta)
            for K, k, lam, beta in itertools.product(
                self.filter_counts, self.kernel_sizes, self.lambdas, self.betas
            )
        ]

    def __len__(self) -> int:
        return len(self.betas) * len(self.lambdas) * len(self.kernel_sizes) * len(self.filter_counts)


@dataclass
class DictionaryBank:
    entries: dict[str, Dictionary] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: str) -> Dictionary:
        return self.entries[key]

    def __iter__(self):
        return iter(self.entries)

    def keys(self) -> list[str]:
        return list(self.entries)

    def add(self, key: str, D: Dictionary) -> None:
        if key in self.entries:
            raise KeyError(f"duplicate bank key {key}")
        if not D.is_unit_norm():
            raise ValueError(f"dictionary {key} is not unit-norm")
        self.entries[key] = D

    def save(self, directory) -> Path:
        """Write one ``.cdld`` file and one objective-trace CSV per entry plus ``bank.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for key, D in self.entries.items():
            dpath, tpath = f"{key}.cdld", f"{key}.trace.csv"
            write_dictionary(directory / dpath, D)
            lines = ["epoch,objective"] + [f"{i + 1},{v!r}" for i, v in enumerate(D.trace)]
            (directory / tpath).write_text("\n".join(lines) + "\n")
            index[key] = {"dictionary": dpath, "trace": tpath}
        manifest = directory / "bank.json"
        manifest.write_text(json.dumps({"entries": index}, indent=2, sort_keys=True) + "\n")
        return manifest

    @classmethod
    def load(cls, path) -> "DictionaryBank":
        path = Path(path)
        manifest = path / "bank.json" if path.is_dir() else path
        index = json.loads(manifest.read_text())["entries"]
        bank = cls()
        for key in sorted(index, key=_key_order):
            D = read_dictionary(manifest.parent / index[key]["dictionary"])
            tpath = manifest.parent / index[key]["trace"]
            if tpath.exists():
                rows = tpath.read_text().split()[1:]
                D.trace = [float(r.split(",")[1]) for r in rows]
            bank.add(key, D)
        return bank


def _key_order(key: str):
    try:
        return parse_key(key)
    except ValueError:
        return (0, 0, 0.0, 0.0, key)


def _unit(filters: np.ndarray) -> np.ndarray:
    n = np.sqrt((filters**2).sum(axis=(1, 2), keepdims=True))
    return filters / n


def _filter_gradient(res: list[np.ndarray], codes: list[np.ndarray], k_f: int) -> np.ndarray:
    """d/dd_k of sum_i 1/2 ||sum_k d_k * s_ik - x_i||^2 restricted to the filter support."""
    K = codes[0].shape[0]
    h, w = res[0].shape
    acc = np.zeros((K, h, w))
    for r, s in zip(res, codes):
        # correlation c_k[tau] = sum_p r[p] conj(s_k[p - tau]), real part
        acc += np.fft.ifft2(np.fft.fft2(r)[None] * np.conj(np.fft.fft2(s))).real
    c = k_f // 2
    idx_y = np.arange(-c, c + 1) % h
    idx_x = np.arange(-c, c + 1) % w
    return acc[:, idx_y][:, :, idx_x]


def _data_term(D: Dictionary, codes, targets) -> float:
    tot = 0.0
    for s, x in zip(codes, targets):
        r = dict_synthesize(s, D) - x
        tot += 0.5 * float(np.vdot(r, r).real)
    return tot


def _l1(codes) -> float:
    return float(sum(np.abs(s.real).sum() + np.abs(s.imag).sum() for s in codes))


def pretrain_dictionary(
    corpus: list[np.ndarray],
    K: int,
    k_f: int,
    lambda_scalar: float,
    beta: float,
    epochs: int = 10,
    seed: int = 0,
    coding_iters: int = 30,
    corpus_tag: str = "synthetic",
    filter_steps: int = 5,
) -> Dictionary:
    """Learn ``K`` unit-norm ``k_f x k_f`` filters; the per-epoch objective is in ``.trace``."""
    if not corpus:
        raise ValueError("corpus is empty")
    if K < 1 or k_f < 1 or lambda_scalar <= 0 or beta <= 0 or epochs < 0:
        raise ValueError("K, k_f, lambda and beta must be positive and epochs nonnegative")
    if k_f % 2 == 0:
        raise ValueError("k_f must be odd")
    h, w = corpus[0].shape
    if any(x.shape != (h, w) for x in corpus):
        raise ValueError("corpus images must share one shape")

    init_rng = stream(seed, "pretrain", "init")
    reinit_rng = stream(seed, "pretrain", "reinit")
    filters = _unit(init_rng.standard_normal((K, k_f, k_f)))
    meta = {
        "beta": float(beta),
        "lambda": float(lambda_scalar),
        "corpus": corpus_tag,
        "created": f"cdl_lambda {__version__} seed={seed}",
    }
    targets = [split(np.asarray(x, dtype=np.complex128), beta)[1] for x in corpus]
    mask = LowResMask.full(h, w)
    y_primes = [np.fft.fft2(x, norm="ortho") for x in targets]
    lam_map = np.full((K, h, w), float(lambda_scalar))
    cfg = FistaConfig(T=coding_iters, T_grad=1)
    codes = [np.zeros((K, h, w), dtype=np.complex128) for _ in corpus]
    trace: list[float] = []
    eta = 0.0

    def image_obj(D, s, x):
        r = dict_synthesize(s, D) - x
        return 0.5 * float(np.vdot(r, r).real) + lambda_scalar * (np.abs(s.real).sum() + np.abs(s.imag).sum())

    for epoch in range(epochs):
        D = Dictionary(filters, meta)
        # (a) sparse coding, monotone safeguard per image
        for i, (yp, x) in enumerate(zip(y_primes, targets)):
            with ad.no_grad():
                s_new = fista_solve(to_channels(codes[i]), mask, D, yp, lam_map, cfg, track="none")
            cand = from_channels(s_new.data)
            if image_obj(D, cand, x) <= image_obj(D, codes[i], x):
                codes[i] = cand
        # (b) filter update: projected gradient with backtracking; the trial
        # step starts at twice the last accepted one so it can grow back
        s_energy = sum(float(np.vdot(s, s).real) for s in codes)
        if s_energy > 0:
            eta = max(eta, 1.0 / s_energy)
            for _ in range(filter_steps):
                D = Dictionary(filters, meta)
                f_old = _data_term(D, codes, targets)
                res = [dict_synthesize(s, D) - x for s, x in zip(codes, targets)]
                grad = _filter_gradient(res, codes, k_f)
                if not np.any(grad):
                    break
                eta *= 2.0
                for _ in range(40):
                    cand = filters - eta * grad
                    norms = np.sqrt((cand**2).sum(axis=(1, 2)))
                    for k in np.flatnonzero(norms < 1e-12):
                        log.warning("filter %d degenerated in epoch %d; reinitialising", k, epoch)
                        cand[k] = reinit_rng.standard_normal((k_f, k_f))
                    cand = _unit(cand)
                    if _data_term(Dictionary(cand, meta), codes, targets) <= f_old:
                        filters = cand
                        break
                    eta *= 0.5
                else:
                    break
        D = Dictionary(filters, meta)
        trace.append(_data_term(D, codes, targets) + lambda_scalar * _l1(codes))
        log.debug("K=%d k_f=%d epoch %d objective %.6g", K, k_f, epoch + 1, trace[-1])

    D = Dictionary(filters, meta)
    D.trace = trace
    return D


def bank_build(grid: PretrainGrid, corpus: list[np.ndarray], epochs: int = 10, seed: int = 0, **kwargs) -> DictionaryBank:
    """Pretrain one dictionary per grid point; each gets its own seed substream."""
    bank = DictionaryBank()
    for K, k_f, lam, beta in grid.keys():
        key = dict_key(K, k_f, lam, beta)
        sub = int(stream(seed, "bank", key).integers(2**31))
        try:
            D = pretrain_dictionary(corpus, K, k_f, lam, beta, epochs=epochs, seed=sub, **kwargs)
        except Exception as exc:
            raise RuntimeError(f"pretraining {key} failed: {exc}") from exc
        bank.add(key, D)
    return bank
