"""Low-rank adapter construction.

Every initializer returns an :class:`AdaptedLayer` whose frozen weight is
``w0 - s * b @ a`` with ``s = alpha / r``, so the adapted layer reproduces
the original outputs exactly (up to rounding) at initialization.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tspm
from .linalg import DimensionError, EigenSystem, as_matrix, sym_eigh, thin_svd

log = logging.getLogger(__name__)

QUANTILES = ("top", "q3", "median", "q1", "random", "tail")
KINDS = ("vanilla", "pissa", "milora", "astra_tail", "quantile")


@dataclass(frozen=True)
class InitStrategy:
    kind: str
    quantile: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if (self.kind == "quantile") != (self.quantile is not None):
            raise ValueError("a quantile tag is required exactly for kind 'quantile'")
        if self.quantile is not None and self.quantile not in QUANTILES:
            raise ValueError(f"unknown quantile {self.quantile!r}; expected one of {QUANTILES}")

    @classmethod
    def parse(cls, tag: str) -> "InitStrategy":
        """Parse ``"vanilla"``, ``"astra_tail"``, ``"quantile:q1"`` and so on."""
        kind, _, which = tag.partition(":")
        return cls(kind, which or None)

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.quantile}" if self.quantile else self.kind

    @property
    def requires_covariance(self) -> bool:
        return self.kind in ("astra_tail", "quantile")

    def __str__(self) -> str:
        return self.tag


@dataclass
class AdapterPair:
    a: np.ndarray  # r x d_in
    b: np.ndarray  # d_out x r
    alpha: float

    def __post_init__(self):
        if self.a.shape[0] != self.b.shape[1]:
            raise DimensionError(f"a has {self.a.shape[0]} rows but b has {self.b.shape[1]} columns")
        if self.scaling <= 0:
            raise ValueError(f"scaling alpha/r must be positive, got {self.scaling}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def num_parameters(self) -> int:
        return self.a.size + self.b.size


@dataclass
class AdaptedLayer:
    w_frozen: np.ndarray
    bias: np.ndarray | None
    adapter: AdapterPair
    w_original: np.ndarray
    strategy: str = "vanilla"
    seed: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return self.w_frozen.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_frozen.shape[0]


def check_rank(r: int, d_out: int, d_in: int) -> None:
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError(f"rank {r} outside [1, {min(d_in, d_out)}] for a {d_out}x{d_in} weight")


def _assemble(w0, bias, a, b, alpha, strategy, seed=None, notes=None) -> AdaptedLayer:
    pair = AdapterPair(a, b, float(alpha))
    w_frozen = w0 - pair.scaling * (b @ a)
    return AdaptedLayer(
        w_frozen=w_frozen,
        bias=None if bias is None else np.array(bias, dtype=np.float64),
        adapter=pair,
        w_original=w0.copy(),
        strategy=strategy,
        seed=seed,
        notes=list(notes or []),
    )


def init_vanilla(w0, r: int, alpha: float, seed: int, bias=None) -> AdaptedLayer:
    """Gaussian ``a`` with std ``1/sqrt(d_in)``, zero ``b``."""
    w0 = as_matrix(w0, "w0")
    d_out, d_in = w0.shape
    check_rank(r, d_out, d_in)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((r, d_in)) / np.sqrt(d_in)
    b = np.zeros((d_out, r))
    return _assemble(w0, bias, a, b, alpha, "vanilla", seed)


def _svd_init(w0, r, alpha, bias, which, name) -> AdaptedLayer:
    w0 = as_matrix(w0, "w0")
    d_out, d_in = w0.shape
    check_rank(r, d_out, d_in)
    svd = thin_svd(w0, r, which=which)
    root = np.sqrt(svd.singular_values)
    b = svd.u * root
    a = root[:, None] * svd.v.T
    return _assemble(w0, bias, a, b, alpha, name)


def init_pissa(w0, r: int, alpha: float, bias=None) -> AdaptedLayer:
    """Principal singular triplets: ``b = U_r sqrt(S_r)``, ``a = sqrt(S_r) V_r^T``."""
    return _svd_init(w0, r, alpha, bias, "top", "pissa")


def init_milora(w0, r: int, alpha: float, bias=None) -> AdaptedLayer:
    """Like :func:`init_pissa` but with the ``r`` smallest singular triplets."""
    return _svd_init(w0, r, alpha, bias, "bottom", "milora")


def quantile_columns(dim: int, r: int, which: str, seed: int = 0) -> np.ndarray:
    """Column indices (descending-eigenvalue order) selected by a quantile tag.

    ``top`` and ``tail`` take the first and last ``r`` columns.  ``q3``,
    ``median`` and ``q1`` take a contiguous window centred at ``dim // 4``,
    ``dim // 2`` and ``3 * dim // 4``, clipped to the valid range.  ``random``
    draws ``r`` distinct columns from ``seed`` and returns them sorted.
    """
    if not 1 <= r <= dim:
        raise ValueError(f"rank {r} outside [1, {dim}]")
    if which == "top":
        return np.arange(r)
    if which == "tail":
        return np.arange(dim - r, dim)
    if which == "random":
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(dim, size=r, replace=False))
    centers = {"q3": dim // 4, "median": dim // 2, "q1": (3 * dim) // 4}
    if which not in centers:
        raise ValueError(f"unknown quantile {which!r}")
    start = min(max(centers[which] - r // 2, 0), dim - r)
    return np.arange(start, start + r)


def _eigen_for(cov, d_out: int) -> EigenSystem:
    if isinstance(cov, EigenSystem):
        eig = cov
    else:
        cov = as_matrix(cov, "cov")
        if cov.shape != (d_out, d_out):
            raise DimensionError(f"covariance is {cov.shape}, expected {(d_out, d_out)}")
        eig = sym_eigh(cov)
    if eig.dim != d_out:
        raise DimensionError(f"eigensystem has dimension {eig.dim}, expected {d_out}")
    return eig


def _subspace_init(w0, cov, r, alpha, bias, cols_for, name, seed=None) -> AdaptedLayer:
    w0 = as_matrix(w0, "w0")
    d_out, d_in = w0.shape
    check_rank(r, d_out, d_in)
    eig = _eigen_for(cov, d_out)
    cols = cols_for(eig.dim)
    q_sel = eig.eigenvectors[:, cols].copy()
    notes = []
    lam = eig.eigenvalues
    zero = lam[cols] <= 1e-12 * max(float(lam[0]), np.finfo(float).tiny)
    if zero.any():
        msg = (f"{name}: {int(zero.sum())} of {r} selected eigenvalues are numerically zero; "
               "the subspace is fixed only by the solver's orthonormal completion")
        log.warning(msg)
        notes.append(msg)
    a = q_sel.T @ w0
    return _assemble(w0, bias, a, q_sel, alpha, name, seed, notes)


def init_astra(w0, cov, r: int, alpha: float, bias=None) -> AdaptedLayer:
    """Adapter spanning the ``r`` smallest-eigenvalue directions of ``cov``.

    ``b = Q_tail`` and ``a = Q_tail^T w0``.  ``cov`` may be a covariance
    matrix or an already computed :class:`EigenSystem`.
    """
    return _subspace_init(w0, cov, r, alpha, bias,
                          lambda d: quantile_columns(d, r, "tail"), "astra_tail")


def init_quantile(w0, cov, r: int, alpha: float, which: str, seed: int = 0, bias=None) -> AdaptedLayer:
    if which == "tail":
        layer = init_astra(w0, cov, r, alpha, bias)
        layer.strategy = "quantile:tail"
        return layer
    return _subspace_init(w0, cov, r, alpha, bias,
                          lambda d: quantile_columns(d, r, which, seed),
                          f"quantile:{which}", seed if which == "random" else None)


def initialize(strategy, w0, r: int, alpha: float, cov=None, seed: int = 0, bias=None) -> AdaptedLayer:
    """Dispatch on a strategy tag or :class:`InitStrategy`."""
    if isinstance(strategy, str):
        strategy = InitStrategy.parse(strategy)
    if strategy.requires_covariance and cov is None:
        raise ValueError(f"strategy {strategy} needs a covariance matrix")
    if strategy.kind == "vanilla":
        return init_vanilla(w0, r, alpha, seed, bias)
    if strategy.kind == "pissa":
        return init_pissa(w0, r, alpha, bias)
    if strategy.kind == "milora":
        return init_milora(w0, r, alpha, bias)
    if strategy.kind == "astra_tail":
        return init_astra(w0, cov, r, alpha, bias)
    return init_quantile(w0, cov, r, alpha, strategy.quantile, seed, bias)


def forward_parts(layer: AdaptedLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, a @ x)``; the product ``b @ a`` is never formed."""
    if x.shape[0] != layer.d_in:
        raise DimensionError(f"input has {x.shape[0]} rows, layer expects {layer.d_in}")
    pair = layer.adapter
    ax = pair.a @ x
    out = layer.w_frozen @ x + pair.scaling * (pair.b @ ax)
    if layer.bias is not None:
        out += layer.bias[:, None]
    return out, ax


def adapted_forward(layer: AdaptedLayer, x) -> np.ndarray:
    return forward_parts(layer, as_matrix(x, "x"))[0]


def merge(layer: AdaptedLayer) -> np.ndarray:
    pair = layer.adapter
    return layer.w_frozen + pair.scaling * (pair.b @ pair.a)


def save_adapter(path: str | os.PathLike, name: str, layer: AdaptedLayer) -> None:
    """One JSON header line followed by the ``a`` and ``b`` TSPM blobs."""
    header = {
        "format": "tailspace-adapter",
        "version": 1,
        "layer": name,
        "rank": layer.adapter.rank,
        "alpha": layer.adapter.alpha,
        "strategy": layer.strategy,
        "seed": layer.seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        tspm.write_matrix(fh, layer.adapter.a)
        tspm.write_matrix(fh, layer.adapter.b)


def load_adapter(path: str | os.PathLike) -> tuple[dict, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "tailspace-adapter":
            raise tspm.FormatError(f"{path} is not an adapter checkpoint")
        a = tspm.read_matrix(fh)
        b = tspm.read_matrix(fh)
    return header, a, b
