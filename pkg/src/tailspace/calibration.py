"""Output-activation covariance estimation for target linear layers.

Each captured batch (columns are samples) is divided by its global
max-abs entry before its outer product is added, and the accumulator counts
batches rather than columns.  ``second_moment`` mode then returns
``sum(Y Y^T) / n_batches``; ``mean_centered`` mode returns
``E[y y^T] - E[y] E[y]^T`` with expectations over all columns seen.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tspm
from .linalg import DimensionError, as_matrix, sym_eigh
from .model import ToyModel, forward

CENTERING = ("second_moment", "mean_centered")
SCALE_FLOOR = 1e-30
DEFAULT_SAMPLES = 64


@dataclass
class CovarianceAccumulator:
    dim: int
    centering: str = "second_moment"
    sum_outer: np.ndarray = field(default=None, repr=False)
    sum_vec: np.ndarray = field(default=None, repr=False)
    sample_count: int = 0
    column_count: int = 0
    unscaled_batches: int = 0

    def __post_init__(self):
        if self.centering not in CENTERING:
            raise ValueError(f"centering must be one of {CENTERING}, got {self.centering!r}")
        if self.sum_outer is None:
            self.sum_outer = np.zeros((self.dim, self.dim))
        if self.sum_vec is None:
            self.sum_vec = np.zeros(self.dim)

    def accumulate(self, y_batch) -> "CovarianceAccumulator":
        y = as_matrix(y_batch, "y_batch")
        if y.shape[0] != self.dim:
            raise DimensionError(f"batch has {y.shape[0]} rows, accumulator dim is {self.dim}")
        peak = float(np.max(np.abs(y)))
        if peak < SCALE_FLOOR:
            self.unscaled_batches += 1
        else:
            y = y / peak
        self.sum_outer += y @ y.T
        self.sum_vec += y.sum(axis=1)
        self.sample_count += 1
        self.column_count += y.shape[1]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        """Fold in a partial accumulator built on another shard of the data."""
        if other.dim != self.dim or other.centering != self.centering:
            raise ValueError("cannot merge accumulators with different dim or centering")
        self.sum_outer += other.sum_outer
        self.sum_vec += other.sum_vec
        self.sample_count += other.sample_count
        self.column_count += other.column_count
        self.unscaled_batches += other.unscaled_batches
        return self

    def finalize(self) -> np.ndarray:
        if self.sample_count < 1:
            raise ValueError("no batches accumulated")
        if self.centering == "second_moment":
            cov = self.sum_outer / self.sample_count
        else:
            mean = self.sum_vec / self.column_count
            cov = self.sum_outer / self.column_count - np.outer(mean, mean)
        cov = 0.5 * (cov + cov.T)
        if self.centering == "mean_centered":
            cov = _clamp_psd(cov)
        return cov


def _clamp_psd(cov: np.ndarray) -> np.ndarray:
    # the mean subtraction can leave slightly negative eigenvalues
    eig = sym_eigh(cov)
    if eig.eigenvalues[-1] > 0.0:
        return cov
    q = eig.eigenvectors
    out = (q * np.maximum(eig.eigenvalues, 0.0)) @ q.T
    return 0.5 * (out + out.T)


def accumulate(acc: CovarianceAccumulator, y_batch) -> CovarianceAccumulator:
    return acc.accumulate(y_batch)


def finalize(acc: CovarianceAccumulator) -> np.ndarray:
    return acc.finalize()


@dataclass
class CalibrationSet:
    """Calibration inputs, one sample per column.

    ``batch_size`` controls how many columns go through the model per
    captured batch; the default of 1 gives one accumulator update per sample.
    """

    samples: np.ndarray
    source: str = "downstream"
    batch_size: int = 1

    def __post_init__(self):
        self.samples = as_matrix(self.samples, "samples")
        if self.source not in ("downstream", "general"):
            raise ValueError(f"unknown calibration source {self.source!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def size(self) -> int:
        return self.samples.shape[1]

    def batches(self):
        for start in range(0, self.size, self.batch_size):
            yield self.samples[:, start:start + self.batch_size]

    def scaled(self, c: float) -> "CalibrationSet":
        return CalibrationSet(self.samples * c, self.source, self.batch_size)


def collect(
    model: ToyModel,
    data: CalibrationSet,
    targets=None,
    centering: str = "second_moment",
    use_adapters: bool = False,
    on_batch: Callable[[str, CovarianceAccumulator], None] | None = None,
) -> dict[str, CovarianceAccumulator]:
    targets = list(model.layer_names if targets is None else targets)
    index = {name: i for i, name in enumerate(model.layer_names)}
    unknown = [t for t in targets if t not in index]
    if unknown:
        raise KeyError(f"unknown target layers: {unknown}")
    if data.size < 1:
        raise ValueError("empty calibration set")
    accs = {t: CovarianceAccumulator(model.spec(t).d_out, centering) for t in targets}
    for batch in data.batches():
        _, cache = forward(model, batch, use_adapters=use_adapters)
        for t in targets:
            accs[t].accumulate(cache.pre[index[t]])
            if on_batch is not None:
                on_batch(t, accs[t])
    return accs


def calibrate_model(
    model: ToyModel,
    data: CalibrationSet,
    targets=None,
    centering: str = "second_moment",
    on_batch: Callable[[str, CovarianceAccumulator], None] | None = None,
) -> dict[str, np.ndarray]:
    """Finalized covariance of each target layer's output over the calibration set.

    The captured output is the post-bias, pre-activation ``W x + b``.  Injected
    layers are run with their original weight, so adapters never influence
    calibration.
    """
    accs = collect(model, data, targets, centering, use_adapters=False, on_batch=on_batch)
    return {name: acc.finalize() for name, acc in accs.items()}


def dump_covariances(covs: dict[str, np.ndarray], out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, cov in covs.items():
        path = out / f"{name}.cov.tspm"
        tspm.save(path, cov)
        paths.append(path)
    return paths
