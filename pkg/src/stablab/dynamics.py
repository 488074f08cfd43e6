"""Stochastic linearized training dynamics and the divergence protocol.

The update rules operate on a quadratic loss whose curvature is a
HessianFamily: plain SGD, SGD with fresh Gaussian perturbations, the
linearized SAM update with a fixed normalizer, and the exact-normalizer SAM
variant. classify_stability runs the boundary protocol (fixed horizon,
norm-ratio divergence test, majority vote over trials); norm_growth_curve
estimates the expected squared norm trajectory by Monte Carlo.

Trajectories are tracked internally as a unit direction plus a log norm
ratio, so growth by hundreds of orders of magnitude never overflows. Each
trial draws from three dedicated streams (init, batch, noise) derived from
(seed, trial), which makes trials order-independent and lets different
algorithms share batch sequences for paired comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import InputError
from .quadratic import HessianFamily
from .spectra import SymMatrix, sym_matrix

_EXACT_SAM_FALLBACK = 1e-12
# Below this log ratio, exp(-logr) would overflow; additive terms then
# dominate the linear part by hundreds of orders of magnitude.
_LOG_UNDERFLOW = -700.0


@dataclass(frozen=True)
class Sgd:
    name: str = field(default="sgd", init=False)


@dataclass(frozen=True)
class RandomPerturb:
    """SGD with a fresh Gaussian offset added to the evaluation point."""

    noise_scale: float = 1.0
    name: str = field(default="random_perturb", init=False)

    def __post_init__(self):
        if self.noise_scale < 0.0:
            raise InputError("noise scale must be nonnegative")


@dataclass(frozen=True)
class SamLinearized:
    """SAM with the gradient-norm denominator frozen to a constant alpha."""

    rho: float
    alpha: float = 1.0
    name: str = field(default="sam_linearized", init=False)

    @property
    def kappa(self) -> float:
        return self.rho / self.alpha

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise InputError("alpha must be positive")
        if self.rho < 0.0:
            raise InputError("rho must be nonnegative")


@dataclass(frozen=True)
class SamExact:
    """SAM with the true ||Hw|| normalizer (falls back to SGD at ||Hw|| = 0)."""

    rho: float
    name: str = field(default="sam_exact", init=False)

    def __post_init__(self):
        if self.rho < 0.0:
            raise InputError("rho must be nonnegative")


Algorithm = Union[Sgd, RandomPerturb, SamLinearized, SamExact]


@dataclass(frozen=True)
class DynamicsConfig:
    """One simulated optimizer: step size, batching, algorithm, protocol knobs."""

    eta: float
    batch_size: int
    algorithm: Algorithm = Sgd()
    sampling: str = "bernoulli"  # or "fixed_size"
    steps: int = 1000
    trials: int = 10
    diverge_factor: float = 1000.0
    converge_factor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        # eta = 0 is allowed as the null experiment (flat norm curve).
        if self.eta < 0.0:
            raise InputError("step size must be nonnegative")
        if self.batch_size < 1:
            raise InputError("batch size must be at least 1")
        if self.sampling not in ("bernoulli", "fixed_size"):
            raise InputError(f"unknown sampling mode {self.sampling!r}")
        if self.steps < 1 or self.trials < 1:
            raise InputError("steps and trials must be at least 1")
        if self.seed < 0:
            raise InputError("seed must be nonnegative")


@dataclass(frozen=True)
class BatchDraw:
    """Inclusion weights so that sum_i weights_i H_i is the minibatch Hessian."""

    weights: np.ndarray
    mode: str


@dataclass(frozen=True)
class StabilityVerdict:
    label: str  # "diverged" | "converged" | "undetermined"
    trial_labels: tuple
    final_norm_ratios: tuple


def _trial_streams(seed: int, trial: int):
    """Independent (init, batch, noise) generators for one trial.

    Keyed by content, not call order, so trials reproduce bit for bit in
    any execution order.
    """
    make = lambda channel: np.random.default_rng(
        np.random.SeedSequence((seed, trial, channel))
    )
    return make(0), make(1), make(2)


def _draw_weights(n: int, config: DynamicsConfig,
                  rng: np.random.Generator) -> np.ndarray:
    b = config.batch_size
    if b > n:
        raise InputError(f"batch size {b} exceeds family size {n}")
    if config.sampling == "bernoulli":
        included = rng.random(n) < (b / n)
        return included.astype(np.float64) / b
    weights = np.zeros(n)
    weights[rng.permutation(n)[:b]] = 1.0 / b
    return weights


def draw_batch(n: int, config: DynamicsConfig,
               rng: np.random.Generator) -> BatchDraw:
    """One minibatch inclusion draw in the configured sampling mode."""
    return BatchDraw(weights=_draw_weights(n, config, rng), mode=config.sampling)


def batch_hessian(family: HessianFamily, draw: BatchDraw) -> SymMatrix:
    """The weighted member sum as an explicit matrix."""
    if draw.weights.shape[0] != family.n:
        raise InputError("draw size does not match family size")
    if family.factors is not None:
        g = family.factors
        out = (g * draw.weights[:, None]).T @ g
    else:
        out = np.tensordot(draw.weights, family._dense, axes=1)
    return sym_matrix((out + out.T) / 2.0)


def step_sgd(w: np.ndarray, family: HessianFamily, draw: BatchDraw,
             eta: float) -> np.ndarray:
    """w - eta * H_t w."""
    return w - eta * family.batch_matvec(draw.weights, w)


def step_random_perturb(w: np.ndarray, family: HessianFamily, draw: BatchDraw,
                        eta: float, noise_scale: float,
                        rng: np.random.Generator) -> np.ndarray:
    """w - eta * H_t (w + delta) with delta fresh N(0, noise_scale^2 I).

    noise_scale = 0 takes the SGD path without consuming the rng, so the
    noiseless limit reproduces step_sgd draw for draw.
    """
    if noise_scale < 0.0:
        raise InputError("noise scale must be nonnegative")
    if noise_scale == 0.0:
        return step_sgd(w, family, draw, eta)
    delta = rng.standard_normal(w.shape[0]) * noise_scale
    return w - eta * family.batch_matvec(draw.weights, w + delta)


def step_sam_linearized(w: np.ndarray, family: HessianFamily, draw: BatchDraw,
                        eta: float, rho: float, alpha: float) -> np.ndarray:
    """w - eta * H_t (w + (rho/alpha) H w) with H the family mean."""
    if alpha <= 0.0:
        raise InputError("alpha must be positive")
    kappa = rho / alpha
    if kappa == 0.0:
        return step_sgd(w, family, draw, eta)
    return w - eta * family.batch_matvec(
        draw.weights, w + kappa * family.aggregate_matvec(w)
    )


def step_sam_exact(w: np.ndarray, family: HessianFamily, draw: BatchDraw,
                   eta: float, rho: float) -> np.ndarray:
    """w - eta * H_t (w + rho * Hw / ||Hw||); SGD fallback when ||Hw|| vanishes."""
    if rho == 0.0:
        return step_sgd(w, family, draw, eta)
    hw = family.aggregate_matvec(w)
    norm_hw = float(np.linalg.norm(hw))
    if norm_hw <= _EXACT_SAM_FALLBACK * float(np.linalg.norm(w)):
        return step_sgd(w, family, draw, eta)
    return w - eta * family.batch_matvec(draw.weights, w + (rho / norm_hw) * hw)


def _run_trial(family: HessianFamily, config: DynamicsConfig, trial: int,
               steps: int, record: np.ndarray | None = None,
               stop_at_diverge: bool = True):
    """Advance one trajectory in (unit direction, log norm ratio) form.

    Returns (label, final_log_ratio). label is "diverged" when the ratio
    test fired or arithmetic overflowed, otherwise None and the caller
    classifies from the final ratio. A trajectory absorbed exactly at zero
    carries log ratio -inf. When `record` is given it receives the log norm
    ratio after every step (length steps + 1, index 0 = start). Curve
    estimation passes stop_at_diverge=False so every step is recorded; the
    classification protocol keeps the early divergence exit.

    The additive algorithms (random perturbation, exact SAM) inject a term
    scaled by exp(-logr) in this frame; once that factor would overflow the
    injection dwarfs the linear part entirely, so the step reduces to the
    injection alone.
    """
    init_rng, batch_rng, noise_rng = _trial_streams(config.seed, trial)
    n, d = family.n, family.d
    algo = config.algorithm
    eta = config.eta

    w0 = init_rng.standard_normal(d)
    w0_norm = float(np.linalg.norm(w0))
    u = w0 / w0_norm
    logr = 0.0
    log_diverge = math.log(config.diverge_factor)
    if record is not None:
        record[0] = 0.0

    kappa = algo.kappa if isinstance(algo, SamLinearized) else 0.0
    noise_scale = algo.noise_scale if isinstance(algo, RandomPerturb) else 0.0
    exact_rho = algo.rho if isinstance(algo, SamExact) else 0.0

    for step in range(1, steps + 1):
        weights = _draw_weights(n, config, batch_rng)

        injected_state = None
        if kappa != 0.0:
            arg = u + kappa * family.aggregate_matvec(u)
            v = u - eta * family.batch_matvec(weights, arg)
        elif noise_scale != 0.0:
            delta = noise_rng.standard_normal(d) * noise_scale
            v, injected_state = _additive_update(
                family, weights, u, logr, eta, delta, 1.0, w0_norm)
        elif exact_rho != 0.0:
            hu = family.aggregate_matvec(u)
            norm_hu = float(np.linalg.norm(hu))
            if norm_hu <= _EXACT_SAM_FALLBACK:
                v = u - eta * family.batch_matvec(weights, u)
            else:
                v, injected_state = _additive_update(
                    family, weights, u, logr, eta, hu / norm_hu, exact_rho,
                    w0_norm)
        else:
            v = u - eta * family.batch_matvec(weights, u)

        if injected_state is not None:
            u, logr = injected_state
        else:
            norm_v = float(np.linalg.norm(v))
            if not math.isfinite(norm_v):
                if record is not None:
                    record[step:] = math.inf
                return "diverged", math.inf
            if norm_v == 0.0:
                # Absorbed exactly at the minimum; the ratio stays zero.
                if record is not None:
                    record[step:] = -math.inf
                return None, -math.inf
            logr += math.log(norm_v)
            u = v / norm_v
        if record is not None:
            record[step] = logr
        if stop_at_diverge and logr >= log_diverge:
            return "diverged", logr
    return None, logr


def _additive_update(family, weights, u, logr, eta, direction, scale, w0_norm):
    """One step with an additive term -eta * scale * H_t(direction).

    Returns (v, None) with the update vector in the unit frame when the
    exp(-logr) coefficient is representable. When it would overflow, the
    injection dominates and the successor state (u', logr') is returned
    directly as (None, state).
    """
    lin = u - eta * family.batch_matvec(weights, u)
    hd = family.batch_matvec(weights, direction)
    if logr > _LOG_UNDERFLOW:
        coeff = (eta * scale / w0_norm) * math.exp(-logr)
        return lin - coeff * hd, None
    norm_hd = float(np.linalg.norm(hd))
    if norm_hd == 0.0:
        return lin, None
    new_logr = math.log(eta * scale * norm_hd / w0_norm)
    return None, (-hd / norm_hd, new_logr)


def classify_stability(family: HessianFamily,
                       config: DynamicsConfig) -> StabilityVerdict:
    """Run the boundary protocol and aggregate trials by majority vote.

    Per trial: start at w0 ~ N(0, I), iterate `steps` updates, mark diverged
    as soon as ||w|| / ||w0|| reaches diverge_factor, converged when the
    final ratio is at most converge_factor, undetermined otherwise. The
    family verdict needs a strict majority of trials; mixed outcomes stay
    undetermined. Numeric overflow counts as divergence (the ratio test
    must have been passed on the way up).
    """
    if config.batch_size > family.n:
        raise InputError(
            f"batch size {config.batch_size} exceeds family size {family.n}"
        )
    labels = []
    ratios = []
    log_converge = math.log(config.converge_factor)
    for trial in range(config.trials):
        label, logr = _run_trial(family, config, trial, config.steps)
        if label is None:
            label = "converged" if logr <= log_converge else "undetermined"
        labels.append(label)
        if logr == -math.inf:
            ratios.append(0.0)
        else:
            ratios.append(math.exp(logr) if logr < 709.0 else math.inf)
    majority = config.trials / 2.0
    if labels.count("diverged") > majority:
        overall = "diverged"
    elif labels.count("converged") > majority:
        overall = "converged"
    else:
        overall = "undetermined"
    return StabilityVerdict(label=overall, trial_labels=tuple(labels),
                            final_norm_ratios=tuple(ratios))


def log_norm_growth_curve(family: HessianFamily, config: DynamicsConfig,
                          horizon: int, mc_trials: int) -> np.ndarray:
    """log E||w_k||^2 estimated by Monte Carlo, overflow-free.

    Element k is the log of the sample mean of ||w_k||^2 over mc_trials
    independent trajectories (length horizon + 1, index 0 included). The
    mean is assembled with a shifted log-sum-exp so curves spanning
    thousands of orders of magnitude stay finite.
    """
    if horizon < 1 or mc_trials < 1:
        raise InputError("horizon and mc_trials must be at least 1")
    log_sq = np.empty((mc_trials, horizon + 1))
    for trial in range(mc_trials):
        record = np.empty(horizon + 1)
        init_rng, _, _ = _trial_streams(config.seed, trial)
        w0_norm = float(np.linalg.norm(init_rng.standard_normal(family.d)))
        _run_trial(family, config, trial, horizon, record=record,
                   stop_at_diverge=False)
        log_sq[trial] = 2.0 * (record + math.log(w0_norm))
    overflow = np.any(np.isposinf(log_sq), axis=0)
    shift = np.max(log_sq, axis=0)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        centered = np.where(log_sq == -np.inf, -np.inf, log_sq - shift[None, :])
        out = shift + np.log(np.mean(np.exp(centered), axis=0))
    out[overflow] = np.inf
    return out


def norm_growth_curve(family: HessianFamily, config: DynamicsConfig,
                      horizon: int, mc_trials: int) -> np.ndarray:
    """Sample mean of ||w_k||^2 per step; +inf where the mean overflows."""
    with np.errstate(over="ignore"):
        return np.exp(log_norm_growth_curve(family, config, horizon, mc_trials))
