"""Dense real linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The constructors here (:func:`as_matrix`) reject empty shapes and non-finite
entries so the rest of the package never has to re-check.

The symmetric eigensolver is a cyclic Jacobi method.  The sweep kernel is
compiled with numba when it is importable; otherwise a vectorised numpy
variant using round-robin pair ordering is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SWEEPS = 100
OFF_TOL = 1e-12
ORTHO_TOL = 1e-8
SYMMETRY_TOL = 1e-9
PSD_CLAMP = 1e-10
SVD_ZERO = 1e-12


class DimensionError(ValueError):
    """Raised when matrix shapes are incompatible."""


class ConvergenceError(ArithmeticError):
    """Raised when the Jacobi iteration exhausts its sweep budget."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must have at least one row and column, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues sorted descending, with matching eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def split(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(Q_main, Q_tail)`` where the tail holds the last ``r`` columns."""
        if not 0 <= r <= self.dim:
            raise ValueError(f"tail size {r} outside [0, {self.dim}]")
        cut = self.dim - r
        return self.eigenvectors[:, :cut], self.eigenvectors[:, cut:]

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


@dataclass(frozen=True)
class SvdSystem:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method schedule; index n (when n is odd) is a bye.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _jacobi_numpy(out: np.ndarray, vt: np.ndarray, target: float, max_sweeps: int) -> int:
    """Pure-numpy fallback; rotates ``n // 2`` disjoint pairs per round."""
    n = out.shape[0]
    a = out.copy()
    rounds = _round_robin(n)
    for sweep in range(max_sweeps):
        if _off_norm(a) <= target:
            out[...] = a
            return sweep
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) >= target / n
            if not active.any():
                continue
            app = a[p, p]
            aqq = a[q, q]
            theta = (aqq - app) / (2.0 * np.where(active, apq, 1.0))
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0
            t[~active] = 0.0
            c = (1.0 / np.sqrt(t * t + 1.0))[:, None]
            sn = t[:, None] * c
            # rotate rows, transpose, rotate rows again: J^T A J for symmetric A
            for _ in range(2):
                ap, aq = a[p], a[q]
                a[p] = c * ap - sn * aq
                a[q] = sn * ap + c * aq
                a = np.ascontiguousarray(a.T)
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = vt[p], vt[q]
            vt[p] = c * vp - sn * vq
            vt[q] = sn * vp + c * vq
    out[...] = a
    return -1 if _off_norm(a) > target else max_sweeps


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

if numba is not None:

    @numba.njit(cache=True)
    def _jacobi_compiled(a, vt, target, max_sweeps):
        n = a.shape[0]
        skip = target / n
        for sweep in range(max_sweeps):
            off = 0.0
            for i in range(n):
                for j in range(n):
                    if i != j:
                        off += a[i, j] * a[i, j]
            if np.sqrt(off) <= target:
                return sweep
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) < skip:
                        continue
                    app = a[p, p]
                    aqq = a[q, q]
                    theta = (aqq - app) / (2.0 * apq)
                    if theta == 0.0:
                        t = 1.0
                    else:
                        t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = c * apk - s * aqk
                        a[q, k] = s * apk + c * aqk
                    a[p, p] = app - t * apq
                    a[q, q] = aqq + t * apq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    # mirror the two updated rows into their columns
                    for k in range(n):
                        if k != p and k != q:
                            a[k, p] = a[p, k]
                            a[k, q] = a[q, k]
                    for k in range(n):
                        vp = vt[p, k]
                        vq = vt[q, k]
                        vt[p, k] = c * vp - s * vq
                        vt[q, k] = s * vp + c * vq
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        return -1 if np.sqrt(off) > target else max_sweeps

    _jacobi = _jacobi_compiled
else:  # pragma: no cover
    _jacobi = _jacobi_numpy


def sym_eigh(s, max_sweeps: int = MAX_SWEEPS, tol: float = OFF_TOL) -> EigenSystem:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrised as ``(S + S.T) / 2``.  Iteration stops once the
    off-diagonal Frobenius norm drops below ``tol * ||S||_F``; rotations on
    entries already below ``tol * ||S||_F / n`` are skipped.  Eigenvalues
    come back in descending order, and each eigenvector is signed so its
    largest-magnitude entry is positive.  Negative eigenvalues within
    ``1e-10`` of zero (relative to the spectral scale) are clamped to zero.
    """
    s = as_matrix(s, "s")
    n = s.shape[0]
    if s.shape[1] != n:
        raise DimensionError(f"sym_eigh needs a square matrix, got {s.shape}")
    a = np.ascontiguousarray(0.5 * (s + s.T))
    vt = np.eye(n)
    scale = float(np.linalg.norm(a))
    if n > 1 and scale > 0.0:
        if _jacobi(a, vt, tol * scale, max_sweeps) < 0:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal {_off_norm(a):.3e}, target {tol * scale:.3e})"
            )
    v = vt.T

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = _fix_signs(v[:, order])
    floor = PSD_CLAMP * max(1.0, float(np.max(np.abs(values))))
    values[(values < 0.0) & (values >= -floor)] = 0.0
    return EigenSystem(values, vectors)


def _orthonormal_completion(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` by unit vectors orthogonal to the rest."""
    q = q.copy()
    rows = q.shape[0]
    basis = [q[:, j] for j in np.flatnonzero(keep)]
    for j in np.flatnonzero(~keep):
        for e in np.eye(rows):
            cand = e.copy()
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                q[:, j] = cand / nrm
                basis.append(q[:, j])
                break
    return q


def _reorthonormalize(q: np.ndarray) -> np.ndarray:
    qq, rr = np.linalg.qr(q)
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return qq * signs


def thin_svd(m, k: int, which: str = "top") -> SvdSystem:
    """Top-``k`` (or bottom-``k``) singular triplets via the smaller Gram matrix."""
    m = as_matrix(m, "m")
    rows, cols = m.shape
    p = min(rows, cols)
    if not 1 <= k <= p:
        raise ValueError(f"k={k} outside [1, {p}]")
    if which not in ("top", "bottom"):
        raise ValueError(f"which must be 'top' or 'bottom', got {which!r}")

    tall = rows >= cols
    gram = m.T @ m if tall else m @ m.T
    eig = sym_eigh(gram)
    sigma = np.sqrt(np.clip(eig.eigenvalues, 0.0, None))
    sel = np.arange(k) if which == "top" else np.arange(p - k, p)
    sigma = sigma[sel]
    known = eig.eigenvectors[:, sel]

    nonzero = sigma > SVD_ZERO * max(float(np.sqrt(max(eig.eigenvalues[0], 0.0))), 0.0)
    if tall:
        other = m @ known
    else:
        other = m.T @ known
    other[:, nonzero] /= sigma[nonzero]
    other[:, ~nonzero] = 0.0
    sigma = np.where(nonzero, sigma, 0.0)
    if not nonzero.all():
        other = _orthonormal_completion(other, nonzero)
    other = _reorthonormalize(other)
    if tall:
        return SvdSystem(other, sigma, known)
    return SvdSystem(known, sigma, other)


def check_orthonormal(basis: np.ndarray, tol: float = ORTHO_TOL) -> float:
    gram = basis.T @ basis
    dev = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
    if dev > tol:
        raise ValueError(f"basis columns are not orthonormal (max deviation {dev:.3e})")
    return dev


def project(basis, y) -> np.ndarray:
    """Orthogonal projection ``basis @ basis.T @ y`` onto the span of ``basis``."""
    basis = as_matrix(basis, "basis")
    y = as_matrix(y, "y")
    if basis.shape[0] != y.shape[0]:
        raise DimensionError(f"basis has {basis.shape[0]} rows but y has {y.shape[0]}")
    check_orthonormal(basis)
    return basis @ (basis.T @ y)


def random_orthonormal(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    q = _reorthonormalize(rng.standard_normal((n, k)))
    return q
