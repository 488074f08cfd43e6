"""Two-layer scalar-output ReLU network laboratory.

Covers the synthetic parity task (inputs in {-1, +1}^d, label x0 * x1),
closed-form interpolating solutions of tunable complexity, analytic
per-sample gradients and their Gauss-Newton outer products, minibatch
SGD/SAM training with MSE loss, and the spectrum/coherence metrics tracked
along training.

A pattern-coding solution enumerates all sign patterns of the first
`pattern_bits` coordinates in its hidden layer; the bias is set so exactly
one hidden unit fires for any input, which makes the network interpolate
the parity labels exactly. The scale parameter trades first-layer against
second-layer magnitude and controls the curvature at the solution. A
memorizing solution instead dedicates one hidden unit to each training
point.

Parameter gradients are flattened in block order (W2, W1 row-major, b);
ReLU uses the strict indicator 1[z > 0] at the kink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .quadratic import HessianFamily, coherence_summary
from .spectra import max_eigenvalue, sym_eig, sym_matrix


@dataclass(frozen=True)
class TwoLayerNet:
    """Weights of f(x) = W2 . relu(W1 x + b); W2 is stored as a vector."""

    W1: np.ndarray  # (d2, d)
    W2: np.ndarray  # (d2,)
    b: np.ndarray   # (d2,)

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def d2(self) -> int:
        return self.W1.shape[0]

    @property
    def num_params(self) -> int:
        return self.d2 * (self.d + 2)

    def __post_init__(self):
        d2, d = self.W1.shape
        if self.W2.shape != (d2,) or self.b.shape != (d2,):
            raise InputError("W1, W2, b shapes are inconsistent")
        for block in (self.W1, self.W2, self.b):
            if not np.all(np.isfinite(block)):
                raise InputError("network weights must be finite")


@dataclass(frozen=True)
class Dataset:
    """Sign-vector inputs with parity labels y = x[0] * x[1]."""

    X: np.ndarray  # (n, d) entries in {-1, +1}
    y: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SampleGradient:
    """d f / d(W2, W1, b) flattened in that block order."""

    flat: np.ndarray
    d: int
    d2: int

    @property
    def w2_block(self) -> np.ndarray:
        return self.flat[: self.d2]

    @property
    def w1_block(self) -> np.ndarray:
        return self.flat[self.d2: self.d2 + self.d2 * self.d].reshape(
            self.d2, self.d
        )

    @property
    def b_block(self) -> np.ndarray:
        return self.flat[self.d2 + self.d2 * self.d:]


@dataclass(frozen=True)
class MetricRecord:
    """Curvature and coherence snapshot at one epoch."""

    coherence: float
    lambda_max_s: float
    max_member_lambda_max: float
    lambda_max_h: float
    trace_h: float
    effective_rank: int


@dataclass(frozen=True)
class TrainLog:
    losses: tuple            # length epochs + 1, index 0 = initial state
    metrics: tuple           # same length; None where not tracked
    diverged: bool


def generate_dataset(n: int, d: int, rng: np.random.Generator) -> Dataset:
    """n i.i.d. uniform sign vectors with labels y = x[0] * x[1]."""
    if d < 2:
        raise InputError("parity labels need at least two coordinates")
    if n < 1:
        raise InputError("need at least one sample")
    x = rng.integers(0, 2, size=(n, d)).astype(np.float64) * 2.0 - 1.0
    x.flags.writeable = False
    y = x[:, 0] * x[:, 1]
    y.flags.writeable = False
    return Dataset(X=x, y=y)


def build_cr_solution(pattern_bits: int, scale: float, d: int,
                      d2: int) -> TwoLayerNet:
    """Interpolating net whose hidden layer enumerates 2^pattern_bits sign
    patterns of the leading coordinates.

    Row j (0-based) encodes the binary tuple (a_1..a_C) with
    j = sum_i 2^(i-1) a_i: its leading entries are scale * (-1)^(a_i), the
    bias is -scale * (C - 1) so only the matching pattern clears zero, and
    the output weight (1/scale) * (-1)^(a_1 + a_2) reproduces the parity
    label. Rows past 2^C are zero.
    """
    c, r = pattern_bits, scale
    if not 2 <= c <= d:
        raise InputError(f"pattern_bits={c} outside [2, d={d}]")
    if r <= 0.0:
        raise InputError("scale must be positive")
    if d2 < 2 ** c:
        raise InputError(f"hidden width {d2} cannot hold {2 ** c} patterns")
    w1 = np.zeros((d2, d))
    w2 = np.zeros(d2)
    bias = np.zeros(d2)
    for j in range(2 ** c):
        bits = [(j >> i) & 1 for i in range(c)]
        w1[j, :c] = r * np.array([(-1.0) ** a for a in bits])
        w2[j] = (1.0 / r) * (-1.0) ** (bits[0] + bits[1])
        bias[j] = -r * (c - 1)
    return TwoLayerNet(W1=w1, W2=w2, b=bias)


def build_memorizing_solution(dataset: Dataset, scale: float,
                              d2: int | None = None) -> TwoLayerNet:
    """Interpolating net where hidden unit i fires for sample i only.

    Row i is (scale/d) * x_i, so its own sample scores scale while any other
    distinct sign vector scores at most scale * (d-2)/d; the bias sits a
    margin of scale/(2d) below the own-sample score and above the rest, and
    the output weight rescales the surviving activation to the label.
    """
    if scale <= 0.0:
        raise InputError("scale must be positive")
    x, y = dataset.X, dataset.y
    n, d = x.shape
    uniq = {tuple(row) for row in x.astype(int)}
    if len(uniq) != n:
        raise InputError("duplicate samples cannot be memorized")
    if d2 is None:
        d2 = n
    if d2 < n:
        raise InputError(f"hidden width {d2} below sample count {n}")
    margin = scale / (2.0 * d)
    w1 = np.zeros((d2, d))
    w1[:n] = (scale / d) * x
    bias = np.zeros(d2)
    bias[:n] = -scale * (d - 2.0) / d - margin
    activation = scale + bias[0]  # own-sample pre-activation, = 3 scale / (2d)
    w2 = np.zeros(d2)
    w2[:n] = y / activation
    return TwoLayerNet(W1=w1, W2=w2, b=bias)


def _forward_raw(w1, w2, bias, x):
    z = x @ w1.T + bias
    active = z > 0.0
    hidden = np.where(active, z, 0.0)
    return hidden @ w2, hidden, active


def _forward_batch(net: TwoLayerNet, x: np.ndarray):
    return _forward_raw(net.W1, net.W2, net.b, x)


def forward(net: TwoLayerNet, x: np.ndarray):
    """Scalar output and the strict activation pattern for one input."""
    z = net.W1 @ np.asarray(x, dtype=np.float64) + net.b
    active = z > 0.0
    value = float(np.dot(net.W2, np.where(active, z, 0.0)))
    return value, active


def _gradient_matrix_raw(w1, w2, bias, x) -> np.ndarray:
    """Per-sample gradients of f as rows, block order (W2, W1, b)."""
    n = x.shape[0]
    z = x @ w1.T + bias
    active = (z > 0.0).astype(np.float64)
    relu = np.where(z > 0.0, z, 0.0)
    gate = w2 * active                          # (n, d2)
    w1_part = gate[:, :, None] * x[:, None, :]  # (n, d2, d)
    return np.concatenate([relu, w1_part.reshape(n, -1), gate], axis=1)


def _gradient_matrix(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    return _gradient_matrix_raw(net.W1, net.W2, net.b, x)


def per_sample_gradient(net: TwoLayerNet, x: np.ndarray) -> SampleGradient:
    """Analytic gradient of the network output at one input."""
    flat = _gradient_matrix(net, np.asarray(x, dtype=np.float64)[None, :])[0]
    return SampleGradient(flat=flat, d=net.d, d2=net.d2)


def interpolation_residual(net: TwoLayerNet, dataset: Dataset) -> float:
    """max_i |f(x_i) - y_i|."""
    preds, _, _ = _forward_batch(net, dataset.X)
    return float(np.max(np.abs(preds - dataset.y)))


def is_memorizing(net: TwoLayerNet, dataset: Dataset) -> bool:
    """Every sample activates some unit and no unit is shared across samples."""
    _, _, active = _forward_batch(net, dataset.X)
    if not np.all(active.any(axis=1)):
        return False
    return not np.any(np.count_nonzero(active, axis=0) > 1)


def gauss_newton_family(net: TwoLayerNet, dataset: Dataset) -> HessianFamily:
    """Per-sample curvature surrogates g_i g_i^T from the output gradients.

    Exact for the MSE Hessian at interpolation and PSD everywhere, which is
    what makes it the quantity tracked during training.
    """
    return HessianFamily.from_gradient_factors(
        _gradient_matrix(net, dataset.X)
    )


def cluster_sizes(net: TwoLayerNet, dataset: Dataset) -> np.ndarray:
    """Samples per live hidden unit for a pattern-coding net.

    Live units are the nonzero rows of W1; for an exact pattern-coding
    solution each sample activates exactly one of them, so the counts sum
    to n.
    """
    live = np.flatnonzero(np.any(net.W1 != 0.0, axis=1))
    _, _, active = _forward_batch(net, dataset.X)
    return np.count_nonzero(active[:, live], axis=0)


def effective_rank(features: np.ndarray, threshold: float) -> int:
    """Principal components needed to reach the variance threshold.

    Columns are centered first; all-constant features have rank 0.
    """
    if not 0.0 < threshold <= 1.0:
        raise InputError("threshold must lie in (0, 1]")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InputError("need a (n >= 2, width) feature matrix")
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / (feats.shape[0] - 1)
    spectrum = sym_eig(sym_matrix((cov + cov.T) / 2.0)).eigenvalues
    spectrum = np.maximum(spectrum, 0.0)
    total = float(spectrum.sum())
    # Constant features leave only rounding dust after centering.
    if total <= 1e-18 * max(1.0, float(np.mean(feats * feats))):
        return 0
    cumulative = np.cumsum(spectrum)
    return int(np.searchsorted(cumulative, threshold * total - 1e-15) + 1)


def perturb_net(net: TwoLayerNet, noise_std: float,
                rng: np.random.Generator) -> TwoLayerNet:
    """Fresh net with i.i.d. Gaussian noise added to every parameter."""
    if noise_std < 0.0:
        raise InputError("noise_std must be nonnegative")
    if noise_std == 0.0:
        return TwoLayerNet(W1=net.W1.copy(), W2=net.W2.copy(), b=net.b.copy())
    return TwoLayerNet(
        W1=net.W1 + rng.standard_normal(net.W1.shape) * noise_std,
        W2=net.W2 + rng.standard_normal(net.W2.shape) * noise_std,
        b=net.b + rng.standard_normal(net.b.shape) * noise_std,
    )


def random_net(d: int, d2: int, rng: np.random.Generator) -> TwoLayerNet:
    """From-scratch initialization with 1/sqrt(fan_in) weight scales."""
    return TwoLayerNet(
        W1=rng.standard_normal((d2, d)) / math.sqrt(d),
        W2=rng.standard_normal(d2) / math.sqrt(d2),
        b=np.zeros(d2),
    )


def _mse_raw(w1, w2, bias, x, y) -> float:
    preds, _, _ = _forward_raw(w1, w2, bias, x)
    return float(np.mean((preds - y) ** 2))


def mse_loss(net: TwoLayerNet, dataset: Dataset) -> float:
    """(1/n) sum_i (f(x_i) - y_i)^2."""
    return _mse_raw(net.W1, net.W2, net.b, dataset.X, dataset.y)


def _loss_gradient_raw(w1, w2, bias, x, y):
    """Gradient of the minibatch MSE loss with respect to (W1, W2, b)."""
    preds, hidden, active = _forward_raw(w1, w2, bias, x)
    coeff = 2.0 * (preds - y) / x.shape[0]
    g_w2 = coeff @ hidden
    gate = (coeff[:, None] * w2[None, :]) * active
    g_w1 = gate.T @ x
    g_b = gate.sum(axis=0)
    return g_w1, g_w2, g_b


def _flatten_blocks(g_w1, g_w2, g_b) -> np.ndarray:
    return np.concatenate([g_w2, g_w1.reshape(-1), g_b])


def _sam_gradient_raw(w1, w2, bias, x, y, rho):
    g_w1, g_w2, g_b = _loss_gradient_raw(w1, w2, bias, x, y)
    flat = _flatten_blocks(g_w1, g_w2, g_b)
    norm = float(np.linalg.norm(flat))
    if rho == 0.0 or not math.isfinite(norm) or norm <= 1e-12:
        return g_w1, g_w2, g_b
    step = rho / norm
    return _loss_gradient_raw(
        w1 + step * g_w1, w2 + step * g_w2, bias + step * g_b, x, y
    )


def sam_gradient(net: TwoLayerNet, batch, rho: float) -> np.ndarray:
    """Minibatch MSE gradient re-evaluated at the ascent-perturbed weights.

    Returns the flat (W2, W1, b) gradient of the batch loss at
    net + rho * g / ||g||; a vanishing base gradient is returned as is.
    """
    if rho < 0.0:
        raise InputError("rho must be nonnegative")
    x, y = batch
    return _flatten_blocks(
        *_sam_gradient_raw(net.W1, net.W2, net.b, x, y, rho)
    )


def _metric_snapshot_raw(w1, w2, bias, dataset: Dataset,
                         er_threshold: float = 0.9) -> MetricRecord:
    grads = _gradient_matrix_raw(w1, w2, bias, dataset.X)
    family = HessianFamily.from_gradient_factors(grads)
    row_sq = np.sum(grads * grads, axis=1)
    if float(np.max(row_sq)) <= 0.0:
        summary_sigma, lam_s, max_member, lam_h = 0.0, 0.0, 0.0, 0.0
    else:
        summary = coherence_summary(family)
        summary_sigma = summary.sigma
        lam_s = summary.lambda_max_s
        max_member = summary.max_elementwise
        # Nonzero spectrum of (1/n) G^T G equals that of (1/n) G G^T.
        gram = family.gram()
        lam_h = max_eigenvalue(sym_matrix((gram + gram.T) / (2.0 * dataset.n)))
    _, hidden, _ = _forward_raw(w1, w2, bias, dataset.X)
    return MetricRecord(
        coherence=summary_sigma,
        lambda_max_s=lam_s,
        max_member_lambda_max=max_member,
        lambda_max_h=lam_h,
        trace_h=float(np.mean(row_sq)),
        effective_rank=effective_rank(hidden, er_threshold),
    )


def metric_snapshot(net: TwoLayerNet, dataset: Dataset) -> MetricRecord:
    """Coherence/spectrum metrics of the Gauss-Newton family at `net`."""
    return _metric_snapshot_raw(net.W1, net.W2, net.b, dataset)


def train(net: TwoLayerNet, dataset: Dataset, optimizer: str = "sgd", *,
          rho: float = 0.0, eta: float = 0.01, batch_size: int = 10,
          epochs: int = 50, seed: int = 0, track_every: int = 1) -> TrainLog:
    """Minibatch training with MSE loss; returns the per-epoch log.

    Minibatches are drawn by uniform shuffling without replacement each
    epoch. optimizer is "sgd" or "sam"; "sam" re-evaluates each minibatch
    gradient at the ascent point of radius rho. The loss is logged at every
    epoch including the initial state; the curvature/coherence snapshot is
    computed every track_every epochs (and at the final epoch), or never
    when track_every = 0. A non-finite loss aborts training with the
    diverged flag set.
    """
    if optimizer not in ("sgd", "sam"):
        raise InputError(f"unknown optimizer {optimizer!r}")
    if rho < 0.0:
        raise InputError("rho must be nonnegative")
    if eta < 0.0 or epochs < 0:
        raise InputError("eta and epochs must be nonnegative")
    if not 1 <= batch_size <= dataset.n:
        raise InputError("batch size must lie in [1, n]")
    if track_every < 0:
        raise InputError("track_every must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence((seed,)))
    w1 = net.W1.copy()
    w2 = net.W2.copy()
    bias = net.b.copy()

    def tracked(epoch):
        if track_every == 0:
            return None
        if epoch % track_every == 0 or epoch == epochs:
            return _metric_snapshot_raw(w1, w2, bias, dataset)
        return None

    use_sam = optimizer == "sam" and rho > 0.0
    losses = [_mse_raw(w1, w2, bias, dataset.X, dataset.y)]
    metrics = [tracked(0)]
    diverged = False
    # Divergence is detected through the loss, so let overflow flow to it
    # as inf/nan instead of warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            order = rng.permutation(dataset.n)
            for start in range(0, dataset.n, batch_size):
                idx = order[start: start + batch_size]
                xb, yb = dataset.X[idx], dataset.y[idx]
                if use_sam:
                    g_w1, g_w2, g_b = _sam_gradient_raw(w1, w2, bias, xb, yb,
                                                        rho)
                else:
                    g_w1, g_w2, g_b = _loss_gradient_raw(w1, w2, bias, xb, yb)
                w1 -= eta * g_w1
                w2 -= eta * g_w2
                bias -= eta * g_b
            loss = _mse_raw(w1, w2, bias, dataset.X, dataset.y)
            losses.append(loss)
            if not math.isfinite(loss):
                diverged = True
                metrics.append(None)
                break
            metrics.append(tracked(epoch))
    return TrainLog(losses=tuple(losses), metrics=tuple(metrics),
                    diverged=diverged)
