"""The end-to-end reconstruction network and its training loop.

``reconstruct`` chains: zero-filled image -> high-pass split -> sparsity maps
-> unrolled FISTA on the residual data -> synthesis plus the low-pass part.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample
from .dict_pretrain import DictionaryBank
from .fista import FistaConfig, fista_solve
from .highpass import HighpassConfig, residual_data, split
from .lambda_net import LambdaEstimator
from .linops import CodingOperator, Dictionary, LowResMask, adjoint_A, from_channels, to_channels
from .metrics import blur_metric, eval_mask_from, mse, ssim
from .optim import Adam
from .rng import stream

__all__ = [
    "ReconConfig",
    "TrainConfig",
    "TrainingError",
    "forward",
    "reconstruct",
    "mse_loss",
    "train",
    "evaluate",
    "permute_test",
    "write_metrics_csv",
    "write_loss_trace",
    "METRIC_FIELDS",
]

log = logging.getLogger(__name__)

METRIC_FIELDS = ("sample_id", "dict_key", "mse", "ssim", "blur")


class TrainingError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class ReconConfig:
    """Everything ``reconstruct`` needs besides the data and the dictionary.

    With ``beta_from_dictionary`` the high-pass weight is taken from the
    dictionary's metadata when present, so each dictionary is paired with the
    split it was pretrained on.
    """

    estimator: LambdaEstimator
    highpass: HighpassConfig = field(default_factory=HighpassConfig)
    fista: FistaConfig = field(default_factory=FistaConfig)
    beta_from_dictionary: bool = True
    selection: str = "round_robin"  # or "random"

    def beta_for(self, D: Dictionary) -> float:
        if self.beta_from_dictionary and D.beta is not None:
            return float(D.beta)
        return self.highpass.beta


@dataclass
class TrainConfig:
    epochs: int = 48
    batch_size: int = 1
    lr_net: float = 1e-4
    lr_scalars: float = 1e-2
    seed: int = 0
    bank_subset: Sequence[str] | None = None
    track: str = "truncated"

    def __post_init__(self) -> None:
        if self.lr_net <= 0 or self.lr_scalars <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def forward(y: np.ndarray, mask: LowResMask, D: Dictionary, cfg: ReconConfig, track: str = "truncated") -> ad.Tensor:
    """Reconstruction in two-channel form ``(2, H, W)``, recorded on the active tape per ``track``."""
    x0 = adjoint_A(y, mask)
    x_low, _ = split(x0, cfg.beta_for(D))
    y_prime = residual_data(y, x_low, mask)
    ctx = ad.no_grad() if track == "none" else contextlib.nullcontext()
    with ctx:
        lam = cfg.estimator(x0, D)
        s0 = np.zeros((D.K, 2) + mask.shape)
        s = fista_solve(s0, mask, D, y_prime, lam, cfg.fista, track=track)
        op = CodingOperator(D, mask)
        return ad.add(ad.linear_map(s, op.synth_channels, op.analyze_channels), to_channels(x_low))


def reconstruct(y: np.ndarray, mask: LowResMask, D: Dictionary, cfg: ReconConfig) -> np.ndarray:
    """``D s^T + x_low`` as a complex image."""
    return from_channels(forward(y, mask, D, cfg, track="none").data)


def mse_loss(x: ad.Tensor, x_true: np.ndarray) -> ad.Tensor:
    """Mean over pixels of the squared complex error."""
    d = ad.sub(x, to_channels(x_true))
    return ad.mul(1.0 / x_true.size, ad.sum(ad.mul(d, d)))


def _project_t(est: LambdaEstimator):
    def project() -> None:
        # keep the gate strictly positive
        est.t.data = np.maximum(est.t.data, 1e-6)

    return project


def train(
    dataset: Sequence[Sample],
    bank: DictionaryBank,
    recon: ReconConfig,
    tc: TrainConfig,
) -> tuple[LambdaEstimator, list[float]]:
    """Minimise the summed MSE over (sample, dictionary) pairs.

    Dictionaries are drawn from ``tc.bank_subset`` round-robin (or seeded
    random with ``recon.selection == "random"``). Returns the trained estimator
    and the mean loss of every epoch.
    """
    est = recon.estimator
    if tc.epochs == 0:
        return est, []
    if not dataset:
        raise ValueError("dataset is empty")
    keys = list(tc.bank_subset) if tc.bank_subset else bank.keys()
    if not keys:
        raise ValueError("bank subset is empty")
    missing = [k for k in keys if k not in bank.entries]
    if missing:
        raise KeyError(f"keys not in bank: {missing}")

    opt = Adam(
        [(est.network_parameters(), tc.lr_net), ([est.t], tc.lr_scalars)],
        project=_project_t(est),
    )
    pick = stream(tc.seed, "train", "dictionary")
    counter = 0
    trace: list[float] = []
    est.zero_grad()
    for epoch in range(tc.epochs):
        losses = []
        pending = 0
        for i, sample in enumerate(dataset):
            if recon.selection == "random":
                key = keys[int(pick.integers(len(keys)))]
            else:
                key = keys[counter % len(keys)]
            counter += 1
            with ad.Tape():
                x = forward(sample.y, sample.mask, bank[key], recon, track=tc.track)
                loss = mse_loss(x, sample.x_true)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch + 1}, sample {i} "
                        f"({sample.name or 'unnamed'}), dictionary {key}"
                    )
                ad.backward(loss)
            losses.append(value)
            pending += 1
            if pending == tc.batch_size or i == len(dataset) - 1:
                opt.step(scale=1.0 / pending)
                opt.zero_grad()
                pending = 0
        trace.append(float(np.mean(losses)))
        log.info("epoch %d/%d mean loss %.6g t=%.4g", epoch + 1, tc.epochs, trace[-1], est.t.item())
    return est, trace


def evaluate(
    dataset: Iterable[Sample],
    D: Dictionary,
    recon: ReconConfig,
    dict_key: str = "",
    threshold_frac: float = 0.05,
) -> list[dict]:
    """Per-image MSE, SSIM (both masked by the target's foreground) and blur."""
    rows = []
    for i, sample in enumerate(dataset):
        x = reconstruct(sample.y, sample.mask, D, recon)
        m = eval_mask_from(sample.x_true, threshold_frac)
        rows.append(
            {
                "sample_id": sample.name or str(i),
                "dict_key": dict_key,
                "mse": mse(x, sample.x_true, m),
                "ssim": ssim(x, sample.x_true, m),
                "blur": blur_metric(x),
            }
        )
    return rows


def permute_test(
    dataset: Sequence[Sample],
    D: Dictionary,
    recon: ReconConfig,
    n_perms: int = 3,
    seed: int = 0,
    threshold_frac: float = 0.05,
) -> dict:
    """Mean/std of ``metric(pi D) - metric(D)`` over the dataset for seeded random permutations."""
    base = evaluate(dataset, D, recon, threshold_frac=threshold_frac)
    rng = stream(seed, "permute")
    out = {
        "base_mse": [r["mse"] for r in base],
        "base_ssim": [r["ssim"] for r in base],
        "perms": [],
    }
    for _ in range(n_perms):
        perm = rng.permutation(D.K)
        rows = evaluate(dataset, D.permuted(perm), recon, threshold_frac=threshold_frac)
        d_mse = [r["mse"] - b["mse"] for r, b in zip(rows, base)]
        d_ssim = [r["ssim"] - b["ssim"] for r, b in zip(rows, base)]
        out["perms"].append({"perm": perm.tolist(), "d_mse": d_mse, "d_ssim": d_ssim})
    return out


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_loss_trace(trace: Sequence[float], path) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")
