"""Spectral diagnostics of layer output activations."""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tspm
from .calibration import CalibrationSet, collect
from .linalg import EigenSystem, sym_eigh
from .model import ToyModel

ENTROPY_FLOOR = 1e-15


def effective_rank(eigenvalues) -> float:
    """Exponential of the Shannon entropy of the normalised spectrum.

    Tiny negative values are clamped to zero and normalised weights below
    ``1e-15`` contribute nothing (the ``0 ln 0 = 0`` convention).

    >>> effective_rank([1.0, 1.0, 1.0, 1.0])
    4.0
    """
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    total = math.fsum(lam)
    if not total > 0.0:
        raise ValueError("effective rank is undefined for an all-zero spectrum")
    p = lam / total
    p = p[p >= ENTROPY_FLOOR]
    # compensated sums keep uniform spectra within a few ulps of d
    return math.exp(-math.fsum(p * np.log(p)))


def energy_split(eigensystem: EigenSystem, r: int) -> tuple[float, float]:
    """Eigenvalue mass in the leading ``d - r`` directions and in the last ``r``."""
    d = eigensystem.dim
    if not 1 <= r < d:
        raise ValueError(f"tail size {r} outside [1, {d - 1}]")
    lam = eigensystem.eigenvalues
    return float(lam[: d - r].sum()), float(lam[d - r:].sum())


_INDEXED = re.compile(r"^(.*?)[_.](\d+)$")


def layer_type(name: str) -> tuple[str, int]:
    """Split ``"up_3"`` into ``("up", 3)``; unindexed names get index 0."""
    m = _INDEXED.match(name)
    if m:
        return m.group(1), int(m.group(2))
    return name, 0


@dataclass
class LayerSpectrum:
    layer: str
    type: str
    index: int
    eigenvalues: np.ndarray
    effective_rank: float


@dataclass
class EffectiveRankReport:
    records: list[LayerSpectrum] = field(default_factory=list)

    @property
    def by_type(self) -> dict[str, float]:
        totals: dict[str, float] = {}
        for rec in self.records:
            totals[rec.type] = totals.get(rec.type, 0.0) + rec.effective_rank
        return totals

    @property
    def total(self) -> float:
        return float(sum(rec.effective_rank for rec in self.records))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "type", "index", "effective_rank"])
            for rec in self.records:
                w.writerow([rec.layer, rec.type, rec.index, repr(rec.effective_rank)])

    def write_spectra(self, out_dir: str | os.PathLike) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for rec in self.records:
            path = out / f"{rec.layer}.spectrum.tspm"
            tspm.save(path, rec.eigenvalues)
            paths.append(path)
        return paths

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "EffectiveRankReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                report.records.append(LayerSpectrum(
                    row["layer"], row["type"], int(row["index"]), np.empty(0), float(row["effective_rank"])))
        return report


def spectral_report(
    model: ToyModel,
    data: CalibrationSet,
    targets=None,
    centering: str = "second_moment",
) -> EffectiveRankReport:
    """Effective rank of each target layer's output covariance.

    The model is run as it currently stands (adapters included), so calling
    this before and after training on the same calibration set gives a
    like-for-like comparison.
    """
    accs = collect(model, data, targets, centering, use_adapters=True)
    report = EffectiveRankReport()
    for name, acc in accs.items():
        eig = sym_eigh(acc.finalize())
        kind, idx = layer_type(name)
        report.records.append(LayerSpectrum(name, kind, idx, eig.eigenvalues, effective_rank(eig.eigenvalues)))
    return report
