"""Dense symmetric linear algebra: eigendecomposition, trace products, PSD checks.

Everything downstream (coherence matrices, stability thresholds, spectrum
tracking) reduces to the handful of operations in this module. The full
eigensolver is a cyclic Jacobi iteration, organized in round-robin rounds of
disjoint rotations so each round is a few vectorized array updates; the top
eigenvalue of large matrices is found by shifted power iteration instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConvergenceError, InputError

# Dimension up to which sym_eig is cheap enough to serve max/min eigenvalue
# queries directly; larger matrices go through power iteration.
_SMALL_DIM = 64

_JACOBI_MAX_SWEEPS = 100
_JACOBI_TOL = 1e-12
_POWER_TOL = 1e-12
_POWER_MAX_ITER = 10_000


@dataclass(frozen=True)
class SymMatrix:
    """Real symmetric matrix; the upper triangle is authoritative.

    Construct through :func:`sym_matrix`, which mirrors the upper triangle
    and freezes the storage, so ``entries[i, j] == entries[j, i]`` holds
    exactly for every instance.
    """

    entries: np.ndarray

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_matrix(values) -> SymMatrix:
    """Build a SymMatrix from a square array, mirroring the upper triangle."""
    a = np.array(values, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise InputError("matrix dimension must be at least 1")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    upper = np.triu(a)
    sym = upper + np.triu(a, 1).T
    sym.flags.writeable = False
    return SymMatrix(entries=sym)


def frobenius_norm(m: SymMatrix) -> float:
    return float(np.linalg.norm(m.entries))


@lru_cache(maxsize=None)
def _round_robin_rounds(dim: int) -> tuple:
    """Round-robin tournament pairing of indices 0..dim-1.

    Returns dim-1 (dim even) or dim (dim odd) rounds; within a round the
    pairs are disjoint, and across a full cycle every unordered pair occurs
    exactly once. Disjointness is what lets a round of Jacobi rotations be
    applied as one vectorized similarity transform.
    """
    players = list(range(dim))
    if dim % 2 == 1:
        players.append(dim)  # dummy seat, pairs touching it are dropped
    m = len(players)
    rounds = []
    order = players[:]
    for _ in range(m - 1):
        pairs = [(order[i], order[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < dim and q < dim]
        ps = np.array([p for p, _ in pairs], dtype=np.intp)
        qs = np.array([q for _, q in pairs], dtype=np.intp)
        rounds.append((ps, qs))
        order = [order[0], order[-1]] + order[1:-1]
    return tuple(rounds)


def _off_diagonal_norm(a: np.ndarray) -> float:
    d = a.shape[0]
    strict_upper = a[np.triu_indices(d, k=1)]
    return math.sqrt(2.0 * float(np.dot(strict_upper, strict_upper)))


def sym_eig(m: SymMatrix) -> EigenDecomposition:
    """Full eigendecomposition by cyclic Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius norm drops below
    1e-12 * ||M||_F or 100 sweeps elapse; the latter raises
    ConvergenceError carrying the residual. The zero matrix returns zero
    eigenvalues with identity eigenvectors.
    """
    a = np.array(m.entries, dtype=np.float64)
    d = a.shape[0]
    if d == 1:
        return EigenDecomposition(
            eigenvalues=a[0].copy(), eigenvectors=np.ones((1, 1))
        )
    v = np.eye(d)
    scale = float(np.linalg.norm(a))
    if scale == 0.0:
        return EigenDecomposition(eigenvalues=np.zeros(d), eigenvectors=v)

    rounds = _round_robin_rounds(d)
    converged = False
    for _ in range(_JACOBI_MAX_SWEEPS):
        if _off_diagonal_norm(a) <= _JACOBI_TOL * scale:
            converged = True
            break
        for ps, qs in rounds:
            apq = a[ps, qs]
            live = apq != 0.0
            if not live.any():
                continue
            p = ps[live]
            q = qs[live]
            apq = apq[live]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            sign = np.where(tau < 0.0, -1.0, 1.0)
            t = sign / (np.abs(tau) + np.hypot(tau, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # Disjoint pairs: the round's rotations commute, so columns
            # then rows can each be updated in one shot.
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        converged = _off_diagonal_norm(a) <= _JACOBI_TOL * scale
    if not converged:
        raise ConvergenceError(
            "Jacobi sweeps exhausted before reaching tolerance",
            residual=_off_diagonal_norm(a) / scale,
        )
    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues)[::-1]
    return EigenDecomposition(
        eigenvalues=eigenvalues[order], eigenvectors=v[:, order]
    )


def trace_product(a: SymMatrix, b: SymMatrix) -> float:
    """Tr(AB) for symmetric A, B via the elementwise sum A_ij * B_ij."""
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.sum(a.entries * b.entries))


def _gershgorin_lower_bound(a: np.ndarray) -> float:
    radii = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
    return float(np.min(np.diag(a) - radii))


def _power_iteration_top(a: np.ndarray) -> float:
    """Largest eigenvalue of symmetric a by shifted power iteration.

    Shifting by the Gershgorin lower bound makes the spectrum nonnegative,
    so the algebraically largest eigenvalue is also the dominant one.
    Convergence is judged on the Rayleigh residual, which is accurate for
    the eigenvalue even when the top of the spectrum is clustered.
    """
    d = a.shape[0]
    scale = float(np.linalg.norm(a))
    if scale == 0.0:
        return 0.0
    lo = _gershgorin_lower_bound(a)
    shifted = a - lo * np.eye(d)
    rng = np.random.default_rng(np.random.SeedSequence((0x5EED, d)))
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    theta = 0.0
    for _ in range(_POWER_MAX_ITER):
        w = shifted @ v
        theta = float(np.dot(v, w))
        residual = float(np.linalg.norm(w - theta * v))
        if residual <= _POWER_TOL * max(1.0, scale):
            return theta + lo
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            # v landed in the null space of the shifted matrix; restart.
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
    raise ConvergenceError(
        "power iteration exhausted its budget",
        residual=residual / max(1.0, scale),
    )


def max_eigenvalue(m: SymMatrix) -> float:
    """Largest eigenvalue; exact Jacobi for small matrices, power iteration above."""
    if m.dim <= _SMALL_DIM:
        return float(sym_eig(m).eigenvalues[0])
    return _power_iteration_top(np.array(m.entries))


def min_eigenvalue(m: SymMatrix) -> float:
    if m.dim <= _SMALL_DIM:
        return float(sym_eig(m).eigenvalues[-1])
    return -_power_iteration_top(-np.array(m.entries))


def is_psd(m: SymMatrix, tol: float = 1e-9) -> bool:
    """True iff lambda_min >= -tol * max(1, |lambda_max|)."""
    if m.dim <= _SMALL_DIM:
        eig = sym_eig(m)
        lam_max = float(eig.eigenvalues[0])
        lam_min = float(eig.eigenvalues[-1])
    else:
        lam_max = max_eigenvalue(m)
        lam_min = min_eigenvalue(m)
    return lam_min >= -tol * max(1.0, abs(lam_max))
