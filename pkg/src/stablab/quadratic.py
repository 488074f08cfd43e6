"""Per-example curvature families, coherence matrices, and stability thresholds.

A family holds n PSD matrices H_1..H_n plus their mean H. Families come in
two internal representations: an explicit dense stack, or rank-one factors
g_1..g_n with H_i = g_i g_i^T. The factored form is what per-sample gradient
outer products produce, and it admits Gram-matrix shortcuts that keep the
n = 1000 regimes cheap; both representations satisfy the same contracts and
the tests cross-check them on small instances.

The closed-form divergence/convergence thresholds live here too, as pure
functions of a BoundInputs record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError
from .spectra import (
    SymMatrix,
    is_psd,
    max_eigenvalue,
    sym_eig,
    sym_matrix,
)

# Relative magnitude beyond which a negative trace product is treated as a
# real error instead of roundoff before the sqrt clamp.
_CLAMP_GUARD = 1e-10


class HessianFamily:
    """n PSD curvature matrices of dimension d with their cached mean."""

    def __init__(self, *, dense: np.ndarray | None = None,
                 factors: np.ndarray | None = None):
        if (dense is None) == (factors is None):
            raise InputError("exactly one of dense or factors must be given")
        if dense is not None:
            dense = np.asarray(dense, dtype=np.float64)
            if dense.ndim != 3 or dense.shape[1] != dense.shape[2]:
                raise InputError(f"dense stack must be (n, d, d), got {dense.shape}")
            dense.flags.writeable = False
        else:
            factors = np.asarray(factors, dtype=np.float64)
            if factors.ndim != 2:
                raise InputError(f"factors must be (n, d), got {factors.shape}")
            factors.flags.writeable = False
        self._dense = dense
        self._factors = factors
        self._aggregate: SymMatrix | None = None
        self._gram: np.ndarray | None = None

    @classmethod
    def from_members(cls, members: Sequence, psd_tol: float = 1e-9) -> "HessianFamily":
        """Validating constructor; rejects non-PSD members by index."""
        mats = [m.entries if isinstance(m, SymMatrix) else np.asarray(m, dtype=np.float64)
                for m in members]
        if not mats:
            raise InputError("family needs at least one member")
        d = mats[0].shape[0]
        for i, m in enumerate(mats):
            if m.shape != (d, d):
                raise InputError(f"member {i} has shape {m.shape}, expected {(d, d)}")
        stack = np.stack(mats)
        for i in range(len(mats)):
            if not is_psd(sym_matrix(stack[i]), tol=psd_tol):
                raise InputError(f"member {i} is not positive semidefinite")
        return cls(dense=stack)

    @classmethod
    def from_gradient_factors(cls, factors: np.ndarray) -> "HessianFamily":
        """Family of outer products g_i g_i^T given the rows g_i (PSD by construction)."""
        return cls(factors=factors)

    @property
    def n(self) -> int:
        source = self._dense if self._dense is not None else self._factors
        return source.shape[0]

    @property
    def d(self) -> int:
        if self._dense is not None:
            return self._dense.shape[1]
        return self._factors.shape[1]

    @property
    def factors(self) -> np.ndarray | None:
        return self._factors

    def member(self, i: int) -> SymMatrix:
        if self._dense is not None:
            return sym_matrix(self._dense[i])
        g = self._factors[i]
        return sym_matrix(np.outer(g, g))

    @property
    def members(self) -> tuple:
        """All members as SymMatrix values; materializes outer products for
        factored families, so only use at small n*d."""
        return tuple(self.member(i) for i in range(self.n))

    @property
    def aggregate(self) -> SymMatrix:
        """H = (1/n) sum_i H_i, cached."""
        if self._aggregate is None:
            if self._dense is not None:
                mean = self._dense.mean(axis=0)
                self._aggregate = sym_matrix((mean + mean.T) / 2.0)
            else:
                g = self._factors
                self._aggregate = sym_matrix(g.T @ g / self.n)
        return self._aggregate

    def gram(self) -> np.ndarray:
        """G G^T for factored families, cached; None-safe only when factored."""
        if self._factors is None:
            raise InputError("gram matrix requires a factored family")
        if self._gram is None:
            self._gram = self._factors @ self._factors.T
        return self._gram

    def batch_matvec(self, weights: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """(sum_i weights_i H_i) @ vec without forming the weighted sum."""
        if self._factors is not None:
            g = self._factors
            return g.T @ (weights * (g @ vec))
        return weights @ (self._dense @ vec)

    def aggregate_matvec(self, vec: np.ndarray) -> np.ndarray:
        """H @ vec for the cached mean H."""
        if self._factors is not None:
            g = self._factors
            return g.T @ (g @ vec) / self.n
        return self.aggregate.entries @ vec

    def member_lambda_max(self) -> np.ndarray:
        """lambda_max(H_i) for every member."""
        if self._factors is not None:
            return np.sum(self._factors * self._factors, axis=1)
        return np.array([max_eigenvalue(sym_matrix(m)) for m in self._dense])


@dataclass(frozen=True)
class CoherenceMatrix:
    """n x n matrix of pairwise curvature alignment entries sqrt(Tr(...))."""

    n: int
    entries: SymMatrix
    flavor: str  # "plain" or "sam"
    rho_over_alpha: float


@dataclass(frozen=True)
class CoherenceSummary:
    lambda_max_s: float
    max_elementwise: float
    sigma: float


@dataclass(frozen=True)
class BoundInputs:
    """Hyperparameters and spectrum statistics consumed by the thresholds."""

    n: int
    batch_size: int
    eta: float
    lambda_max: float
    sigma: float
    lambda_min: float = 0.0
    rho_over_alpha: float = 0.0
    epsilon: float = 0.5

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.n:
            raise InputError(
                f"batch size {self.batch_size} outside [1, {self.n}]"
            )
        if self.lambda_min > self.lambda_max:
            raise InputError("lambda_min exceeds lambda_max")
        if self.eta <= 0.0:
            raise InputError("step size must be positive")
        if self.rho_over_alpha < 0.0:
            raise InputError("rho/alpha must be nonnegative")


def build_family(members: Sequence) -> HessianFamily:
    """Validated family from explicit members (PSD tol 1e-9)."""
    return HessianFamily.from_members(members, psd_tol=1e-9)


def build_spike_family(n: int, sigma: int, d: int,
                       target_sharpness: float) -> HessianFamily:
    """Family with sigma aligned spikes and n - sigma orthogonal ones.

    The first sigma members are m e_1 e_1^T and member i > sigma is
    m e_{i-sigma+1} e_{i-sigma+1}^T with m = target_sharpness * n / sigma,
    which pins lambda_max(H) to target_sharpness and the coherence measure
    to exactly sigma.
    """
    _check_family_args(n, sigma, target_sharpness)
    if d < n - sigma + 1:
        raise InputError(
            f"d={d} cannot host {n - sigma} distinct off-spike directions "
            f"(need d >= {n - sigma + 1})"
        )
    m = target_sharpness * n / sigma
    root = math.sqrt(m)
    factors = np.zeros((n, d))
    factors[:sigma, 0] = root
    for i in range(sigma, n):
        factors[i, i - sigma + 1] = root
    return HessianFamily.from_gradient_factors(factors)


def build_lower_bound_family(n: int, sigma: int, d: int,
                             lambda1: float) -> HessianFamily:
    """Family with sigma aligned spikes and n - sigma zero members.

    m = lambda1 * n / sigma keeps lambda_max(H) = lambda1; the zero members
    contribute sampling noise only through their absence.
    """
    _check_family_args(n, sigma, lambda1)
    if d < 1:
        raise InputError("d must be at least 1")
    m = lambda1 * n / sigma
    factors = np.zeros((n, d))
    factors[:sigma, 0] = math.sqrt(m)
    return HessianFamily.from_gradient_factors(factors)


def _check_family_args(n: int, sigma: int, scale: float) -> None:
    if n < 1:
        raise InputError("n must be at least 1")
    if not 1 <= sigma <= n:
        raise InputError(f"sigma={sigma} outside [1, {n}]")
    if scale <= 0.0:
        raise InputError("target eigenvalue must be positive")


def _sam_alignment_gram(family: HessianFamily, kappa: float) -> np.ndarray:
    """Matrix of g_i^T (I + kappa H) g_j for a factored family.

    Uses H = (1/n) G^T G, so G (I + kappa H) G^T = P + (kappa / n) P^2
    with P the plain Gram matrix; entries of the coherence matrix are the
    absolute values and the diagonal equals lambda_max((I + kappa H) H_i).
    """
    p = family.gram()
    if kappa == 0.0:
        return p
    return p + (kappa / family.n) * (p @ p)


def _sam_square_root(aggregate: SymMatrix, kappa: float) -> np.ndarray:
    """(I + kappa H)^(1/2) for PSD H via the eigendecomposition."""
    eig = sym_eig(aggregate)
    lifted = 1.0 + kappa * eig.eigenvalues
    if np.any(lifted < 0.0):
        raise InputError(
            "I + (rho/alpha) H is indefinite; family members must be PSD"
        )
    v = eig.eigenvectors
    return (v * np.sqrt(lifted)) @ v.T


def coherence_matrix(family: HessianFamily,
                     rho_over_alpha: float = 0.0) -> CoherenceMatrix:
    """Pairwise alignment matrix S, plain or in the SAM-weighted flavor.

    Plain entries are sqrt(Tr(H_i H_j)); with kappa = rho_over_alpha > 0
    they become sqrt(Tr((I + kappa H) H_i (I + kappa H) H_j)). Negative
    trace products can only arise from roundoff and are clamped to zero
    before the square root (guarded at 1e-10 relative).
    """
    if rho_over_alpha < 0.0:
        raise InputError("rho/alpha must be nonnegative")
    kappa = float(rho_over_alpha)
    if family.factors is not None:
        s = np.abs(_sam_alignment_gram(family, kappa))
    else:
        stack = np.asarray(family._dense)
        if kappa > 0.0:
            r = _sam_square_root(family.aggregate, kappa)
            stack = np.einsum("ab,nbc,cd->nad", r, stack, r, optimize=True)
        n = stack.shape[0]
        flat = stack.reshape(n, -1)
        raw = flat @ flat.T
        raw = (raw + raw.T) / 2.0
        norms = np.sqrt(np.maximum(np.diag(raw), 0.0))
        guard = _CLAMP_GUARD * np.outer(norms, norms)
        if np.any(raw < -guard - 1e-300):
            raise InputError("trace products negative beyond roundoff; "
                             "family members must be PSD")
        s = np.sqrt(np.maximum(raw, 0.0))
    flavor = "plain" if kappa == 0.0 else "sam"
    return CoherenceMatrix(n=family.n, entries=sym_matrix(s),
                           flavor=flavor, rho_over_alpha=kappa)


def coherence_summary(family: HessianFamily,
                      rho_over_alpha: float = 0.0) -> CoherenceSummary:
    """lambda_max(S) over the largest per-example eigenvalue.

    For the SAM flavor the denominator is max_i lambda_max((I + kappa H) H_i),
    evaluated through the similar symmetric matrix
    (I + kappa H)^(1/2) H_i (I + kappa H)^(1/2), which shares its spectrum.
    """
    kappa = float(rho_over_alpha)
    s = coherence_matrix(family, kappa)
    lam_s = max_eigenvalue(s.entries)
    if family.factors is not None:
        max_elem = float(np.max(np.diag(_sam_alignment_gram(family, kappa))))
    else:
        if kappa == 0.0:
            max_elem = float(np.max(family.member_lambda_max()))
        else:
            r = _sam_square_root(family.aggregate, kappa)
            stack = np.einsum("ab,nbc,cd->nad", r, np.asarray(family._dense), r,
                              optimize=True)
            max_elem = max(
                max_eigenvalue(sym_matrix((m + m.T) / 2.0)) for m in stack
            )
    if max_elem <= 0.0:
        raise InputError("coherence measure undefined for an all-zero family")
    return CoherenceSummary(lambda_max_s=lam_s, max_elementwise=max_elem,
                            sigma=lam_s / max_elem)


def sam_effective_hessian(h: SymMatrix, rho_over_alpha: float) -> SymMatrix:
    """H + kappa H^2; eigenvalues map lambda -> lambda + kappa lambda^2."""
    if rho_over_alpha < 0.0:
        raise InputError("rho/alpha must be nonnegative")
    a = np.array(h.entries)
    out = a + rho_over_alpha * (a @ a)
    return sym_matrix((out + out.T) / 2.0)


def sgd_divergence_threshold(inputs: BoundInputs) -> float:
    """Step size eta* above which the aligned-spike dynamics diverge.

    eta* = (sigma / lambda_max) * (n/B - 1)^(-1/2). Full batch has no
    sampling noise, so B = n returns +inf.
    """
    if inputs.lambda_max <= 0.0:
        raise InputError("lambda_max must be positive")
    if inputs.batch_size == inputs.n:
        return math.inf
    noise = inputs.n / inputs.batch_size - 1.0
    return (inputs.sigma / inputs.lambda_max) / math.sqrt(noise)


def sam_divergence_threshold(inputs: BoundInputs) -> float:
    """SGD threshold shrunk by (1 + kappa lambda_min)^(-1).

    Reduces to the SGD threshold when kappa = 0 or lambda_min = 0.
    """
    base = sgd_divergence_threshold(inputs)
    lift = 1.0 + inputs.rho_over_alpha * inputs.lambda_min
    if lift <= 0.0:
        raise InputError("1 + (rho/alpha) lambda_min must be positive")
    return base / lift


def sam_lower_bound_stable(inputs: BoundInputs) -> bool:
    """Whether the matching-lower-bound construction stays non-divergent.

    True iff lambda_1 (1 + kappa lambda_1) <= (2 sigma / eta)
    (sigma + n/B - 1)^(-1).
    """
    if inputs.lambda_max <= 0.0:
        raise InputError("lambda_max must be positive")
    lam = inputs.lambda_max
    lhs = lam * (1.0 + inputs.rho_over_alpha * lam)
    rhs = (2.0 * inputs.sigma / inputs.eta) / (
        inputs.sigma + inputs.n / inputs.batch_size - 1.0
    )
    return lhs <= rhs


def sam_convergence_band(eigenvalues: Sequence[float],
                         inputs: BoundInputs) -> bool:
    """Check eps/eta <= lambda + kappa lambda^2 <= (2 - eps)/eta for all lambda."""
    eps = inputs.epsilon
    if not 0.0 < eps < 1.0:
        raise InputError("epsilon must lie in (0, 1)")
    kappa = inputs.rho_over_alpha
    lam = np.asarray(eigenvalues, dtype=np.float64)
    lifted = lam + kappa * lam * lam
    lower = eps / inputs.eta
    upper = (2.0 - eps) / inputs.eta
    return bool(np.all(lifted >= lower) and np.all(lifted <= upper))
