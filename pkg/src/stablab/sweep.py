"""Experiment orchestration: phase-boundary grids, convergence races,
coherence tracking, and their deterministic CSV/JSON emission.

Every sweep is a pure function of its config record: per-cell randomness is
derived from (seed, batch_size, sigma) content rather than call order, so
reruns, reordered execution, and any worker count produce byte-identical
output. Cell streams deliberately ignore the algorithm, which lets paired
comparisons (SGD vs perturbed SGD vs SAM) share batch sequences.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import __version__
from .errors import InputError
from .dynamics import (
    Algorithm,
    DynamicsConfig,
    RandomPerturb,
    SamExact,
    SamLinearized,
    Sgd,
    classify_stability,
)
from .quadratic import (
    BoundInputs,
    build_lower_bound_family,
    build_spike_family,
    sam_divergence_threshold,
    sam_lower_bound_stable,
    sgd_divergence_threshold,
)
from .relu2 import (
    build_cr_solution,
    generate_dataset,
    perturb_net,
    random_net,
    train,
)
from .spectra import min_eigenvalue

DEFAULT_BATCH_SIZES = (1, 2, 5, 10, 20, 50, 100)
DEFAULT_SIGMAS = (1, 2, 5, 10, 20, 50, 100)

BOUNDARY_CSV_COLUMNS = (
    "algorithm", "B", "sigma", "eta", "rho_over_alpha", "label",
    "final_norm_ratio_median", "predicted_sgd_threshold",
    "predicted_sam_threshold", "lower_bound_stable",
)


@dataclass(frozen=True)
class SweepGrid:
    """Phase-boundary experiment: families indexed by (batch size, sigma)."""

    batch_sizes: tuple = DEFAULT_BATCH_SIZES
    sigmas: tuple = DEFAULT_SIGMAS
    eta: float = 0.5
    n: int = 100
    d: int = 100
    target_sharpness: float = 2.0
    family: str = "spike"  # or "lower_bound"
    algorithms: tuple = (Sgd(),)
    sampling: str = "bernoulli"
    steps: int = 1000
    trials: int = 10
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.family not in ("spike", "lower_bound"):
            raise InputError(f"unknown family {self.family!r}")
        if any(s > self.n for s in self.sigmas):
            raise InputError("sigma values cannot exceed n")
        if any(b > self.n for b in self.batch_sizes):
            raise InputError("batch sizes cannot exceed n")
        if self.threads < 1:
            raise InputError("threads must be at least 1")


@dataclass(frozen=True)
class CellResult:
    algorithm: str
    batch_size: int
    sigma: int
    eta: float
    rho_over_alpha: float
    label: str
    final_norm_ratio_median: float
    predicted_sgd_threshold: float
    predicted_sam_threshold: float
    lower_bound_stable: bool
    skipped_reason: str = ""


@dataclass(frozen=True)
class BoundaryReport:
    grid: SweepGrid
    cells: tuple  # of CellResult, ordered (algorithm, batch_size, sigma)

    def labels(self, algorithm: str) -> dict:
        return {(c.batch_size, c.sigma): c.label for c in self.cells
                if c.algorithm == algorithm and not c.skipped_reason}

    def overlap(self, algo_a: str, algo_b: str) -> float:
        """Fraction of cells where the diverged/non-diverged verdicts agree.

        Uses the binary boundary reading: bounded hovering (undetermined)
        counts as non-diverged, which is how perturbed runs that cannot hit
        the converged ratio are compared against plain SGD.
        """
        a, b = self.labels(algo_a), self.labels(algo_b)
        keys = sorted(set(a) & set(b))
        if not keys:
            raise InputError("no common cells between the two algorithms")
        same = sum((a[k] == "diverged") == (b[k] == "diverged") for k in keys)
        return same / len(keys)

    def stable_cell_count(self, algorithm: str) -> int:
        return sum(lab != "diverged" for lab in self.labels(algorithm).values())


def _cell_seed(master: int, batch_size: int, sigma: int) -> int:
    return int(np.random.SeedSequence(
        (master, batch_size, sigma)).generate_state(1, dtype=np.uint64)[0])


def _algorithm_kappa(algorithm: Algorithm) -> float:
    if isinstance(algorithm, SamLinearized):
        return algorithm.kappa
    return 0.0


def _run_cell(grid: SweepGrid, algorithm: Algorithm, batch_size: int,
              sigma: int) -> CellResult:
    kappa = _algorithm_kappa(algorithm)
    base = dict(
        algorithm=algorithm.name, batch_size=batch_size, sigma=sigma,
        eta=grid.eta, rho_over_alpha=kappa,
    )
    try:
        if grid.family == "spike":
            family = build_spike_family(grid.n, sigma, grid.d,
                                        grid.target_sharpness)
        else:
            family = build_lower_bound_family(grid.n, sigma, grid.d,
                                              grid.target_sharpness)
    except InputError as exc:
        return CellResult(label="skipped", final_norm_ratio_median=math.nan,
                          predicted_sgd_threshold=math.nan,
                          predicted_sam_threshold=math.nan,
                          lower_bound_stable=False,
                          skipped_reason=str(exc), **base)
    # Clamp roundoff: the aggregate spectrum lies in [0, target_sharpness].
    lam_min = min(grid.target_sharpness,
                  max(0.0, min_eigenvalue(family.aggregate)))
    inputs = BoundInputs(n=grid.n, batch_size=batch_size, eta=grid.eta,
                         lambda_max=grid.target_sharpness, sigma=float(sigma),
                         lambda_min=lam_min, rho_over_alpha=kappa)
    config = DynamicsConfig(
        eta=grid.eta, batch_size=batch_size, algorithm=algorithm,
        sampling=grid.sampling, steps=grid.steps, trials=grid.trials,
        seed=_cell_seed(grid.seed, batch_size, sigma),
    )
    verdict = classify_stability(family, config)
    return CellResult(
        label=verdict.label,
        final_norm_ratio_median=float(np.median(verdict.final_norm_ratios)),
        predicted_sgd_threshold=sgd_divergence_threshold(inputs),
        predicted_sam_threshold=sam_divergence_threshold(inputs),
        lower_bound_stable=sam_lower_bound_stable(inputs),
        **base,
    )


def _run_cell_payload(payload):
    return _run_cell(*payload)


def run_boundary_sweep(grid: SweepGrid) -> BoundaryReport:
    """Classify every (algorithm, batch size, sigma) cell of the grid.

    Each cell also records the closed-form divergence thresholds and the
    matching-lower-bound stability verdict for overlays. Infeasible cells
    (family dimension too small) are marked skipped with the reason.
    """
    tasks = [(grid, algo, b, s) for algo in grid.algorithms
             for b in grid.batch_sizes for s in grid.sigmas]
    if grid.threads > 1:
        with ProcessPoolExecutor(max_workers=grid.threads) as pool:
            cells = tuple(pool.map(_run_cell_payload, tasks, chunksize=1))
    else:
        cells = tuple(_run_cell_payload(t) for t in tasks)
    return BoundaryReport(grid=grid, cells=cells)


def run_sam_rho_sweep(grid: SweepGrid, rho_over_alpha_values) -> list:
    """One boundary report per rho/alpha ratio, ascending.

    Cell randomness ignores the algorithm, so the ratio-zero report matches
    a plain SGD sweep cell for cell.
    """
    values = list(rho_over_alpha_values)
    if any(v < 0 for v in values) or values != sorted(values):
        raise InputError("rho/alpha values must be nonnegative and ascending")
    reports = []
    for kappa in values:
        algo = SamLinearized(rho=float(kappa), alpha=1.0)
        reports.append(run_boundary_sweep(replace(grid, algorithms=(algo,))))
    return reports


# Appendix-style defaults for the network experiments.
RACE_DEFAULTS = dict(d=100, d2=50, n=100, eta=0.01, batch_size=10, epochs=50,
                     seeds=5)
TRACKING_DEFAULTS = dict(d=15, d2=10, n=50, eta=0.05, batch_size=10,
                         epochs=50, seeds=5)


@dataclass(frozen=True)
class RaceResult:
    """Mean/std loss curves per (pattern_bits, optimizer) over seeds."""

    pattern_values: tuple
    optimizers: tuple          # of (name, rho)
    epochs: int
    loss_mean: dict            # (pattern_bits, label) -> np.ndarray
    loss_std: dict
    final_losses: dict         # (pattern_bits, label) -> per-seed tuple
    config: dict


@dataclass(frozen=True)
class TrackingResult:
    """Per-epoch metric series and the final-state median table."""

    optimizers: tuple          # of (name, rho)
    epochs: int
    series: dict               # (label, seed) -> list of per-epoch rows
    final_table: tuple         # of dict rows, one per optimizer
    config: dict


def _optimizer_label(name: str, rho: float) -> str:
    return name if name == "sgd" else f"sam[{rho:g}]"


def run_cr_race(pattern_values=(2, 4, 5), scale=None, *, d=None, d2=None,
                n=None, optimizers=(("sgd", 0.0), ("sam", 0.01)), eta=None,
                batch_size=None, epochs=None, seeds=None, init_noise=0.1,
                seed=0) -> RaceResult:
    """Convergence race across pattern complexities from perturbed starts.

    For every (pattern_bits, optimizer, seed): build the pattern-coding
    solution, add Gaussian noise to all weights, train, and collect the
    loss curve. Datasets, starting points, and minibatch orders are shared
    across pattern values and optimizers seed for seed, so the comparison
    is paired.
    """
    cfg = dict(RACE_DEFAULTS)
    for key, val in dict(d=d, d2=d2, n=n, eta=eta, batch_size=batch_size,
                         epochs=epochs, seeds=seeds).items():
        if val is not None:
            cfg[key] = val
    if scale is None:
        scale = (cfg["d"] + 1) ** 0.25
    if max(pattern_values) > math.log2(cfg["d2"]):
        raise InputError("hidden width cannot hold the largest pattern count")
    loss_mean, loss_std, finals = {}, {}, {}
    for bits in pattern_values:
        base = build_cr_solution(bits, scale, cfg["d"], cfg["d2"])
        for name, rho in optimizers:
            curves = []
            for s_idx in range(cfg["seeds"]):
                ds = generate_dataset(
                    cfg["n"], cfg["d"],
                    np.random.default_rng(np.random.SeedSequence((seed, s_idx, 0))))
                net = perturb_net(
                    base, init_noise,
                    np.random.default_rng(np.random.SeedSequence((seed, s_idx, 1, bits))))
                log = train(net, ds, name, rho=rho, eta=cfg["eta"],
                            batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                            seed=_cell_seed(seed, s_idx, 2), track_every=0)
                curves.append(log.losses)
            curves = np.array(curves)
            key = (bits, _optimizer_label(name, rho))
            loss_mean[key] = curves.mean(axis=0)
            loss_std[key] = curves.std(axis=0, ddof=1)
            finals[key] = tuple(curves[:, -1])
    return RaceResult(
        pattern_values=tuple(pattern_values),
        optimizers=tuple(optimizers), epochs=cfg["epochs"],
        loss_mean=loss_mean, loss_std=loss_std, final_losses=finals,
        config={**cfg, "scale": scale, "init_noise": init_noise,
                "seed": seed, "optimizers": list(optimizers),
                "pattern_values": list(pattern_values)},
    )


def run_coherence_tracking(rhos=(0.01, 0.05, 0.1), *, d=None, d2=None,
                           n=None, eta=None, batch_size=None, epochs=None,
                           seeds=None, track_every=1, seed=0) -> TrackingResult:
    """Train SGD and SAM at several radii, tracking coherence and spectrum.

    Starts from scratch (random init) and records the full metric set every
    track_every epochs; the final table reports the median over seeds of
    each metric per optimizer.
    """
    cfg = dict(TRACKING_DEFAULTS)
    for key, val in dict(d=d, d2=d2, n=n, eta=eta, batch_size=batch_size,
                         epochs=epochs, seeds=seeds).items():
        if val is not None:
            cfg[key] = val
    optimizers = [("sgd", 0.0)] + [("sam", r) for r in rhos]
    series = {}
    final_rows = []
    for name, rho in optimizers:
        label = _optimizer_label(name, rho)
        final_metrics = []
        for s_idx in range(cfg["seeds"]):
            ds = generate_dataset(
                cfg["n"], cfg["d"],
                np.random.default_rng(np.random.SeedSequence((seed, s_idx, 0))))
            net = random_net(
                cfg["d"], cfg["d2"],
                np.random.default_rng(np.random.SeedSequence((seed, s_idx, 1))))
            log = train(net, ds, name, rho=rho, eta=cfg["eta"],
                        batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                        seed=_cell_seed(seed, s_idx, 3),
                        track_every=track_every)
            rows = []
            for epoch, (loss, metric) in enumerate(zip(log.losses, log.metrics)):
                if metric is None:
                    continue
                rows.append({
                    "epoch": epoch, "loss": loss,
                    "coherence": metric.coherence,
                    "lambda_max_S": metric.lambda_max_s,
                    "max_member_lambda_max": metric.max_member_lambda_max,
                    "lambda_max_H": metric.lambda_max_h,
                    "trace_H": metric.trace_h,
                    "effective_rank": metric.effective_rank,
                })
            series[(label, s_idx)] = rows
            final_metrics.append(rows[-1] if rows else None)
            if log.diverged:
                final_metrics[-1] = None
        finite = [m for m in final_metrics if m is not None]
        row = {"optimizer": label, "rho": rho,
               "diverged_runs": sum(m is None for m in final_metrics)}
        for column in ("coherence", "lambda_max_S", "max_member_lambda_max",
                       "lambda_max_H", "trace_H", "effective_rank", "loss"):
            row[column] = (float(np.median([m[column] for m in finite]))
                           if finite else math.nan)
        final_rows.append(row)
    return TrackingResult(
        optimizers=tuple(optimizers), epochs=cfg["epochs"], series=series,
        final_table=tuple(final_rows),
        config={**cfg, "rhos": list(rhos), "track_every": track_every,
                "seed": seed},
    )


def _fmt(value) -> str:
    """Stable scalar formatting: 9 significant digits for floats."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return format(v, ".9g")
    return str(value)


def _write_rows(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def emit_csv(report, path) -> None:
    """Write a result object as CSV with a fixed, documented header."""
    if isinstance(report, BoundaryReport):
        rows = [
            (c.algorithm, c.batch_size, c.sigma, c.eta, c.rho_over_alpha,
             c.label if not c.skipped_reason else "skipped",
             c.final_norm_ratio_median, c.predicted_sgd_threshold,
             c.predicted_sam_threshold, c.lower_bound_stable)
            for c in report.cells
        ]
        _write_rows(path, BOUNDARY_CSV_COLUMNS, rows)
    elif isinstance(report, RaceResult):
        header = ("pattern_bits", "optimizer", "epoch", "loss_mean", "loss_std")
        rows = []
        for (bits, label), mean in sorted(report.loss_mean.items()):
            std = report.loss_std[(bits, label)]
            for epoch in range(len(mean)):
                rows.append((bits, label, epoch, mean[epoch], std[epoch]))
        _write_rows(path, header, rows)
    elif isinstance(report, TrackingResult):
        header = ("optimizer", "rho", "diverged_runs", "coherence",
                  "lambda_max_S", "max_member_lambda_max", "lambda_max_H",
                  "trace_H", "effective_rank", "loss")
        rows = [tuple(row[k] for k in header) for row in report.final_table]
        _write_rows(path, header, rows)
    else:
        raise InputError(f"cannot serialize {type(report).__name__} to CSV")


def emit_tracking_series_csv(result: TrackingResult, path) -> None:
    """Per-epoch metric series behind the tracking figure."""
    header = ("optimizer", "seed", "epoch", "loss", "coherence",
              "lambda_max_S", "max_member_lambda_max", "lambda_max_H",
              "trace_H", "effective_rank")
    rows = []
    for (label, s_idx) in sorted(result.series):
        for rec in result.series[(label, s_idx)]:
            rows.append((label, s_idx) + tuple(rec[k] for k in header[2:]))
    _write_rows(path, header, rows)


def parse_boundary_csv(path) -> list:
    """Read back an emitted boundary CSV (round-trip partner of emit_csv)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames) != BOUNDARY_CSV_COLUMNS:
            raise InputError(f"unexpected header in {path}")
        out = []
        for rec in reader:
            out.append(CellResult(
                algorithm=rec["algorithm"],
                batch_size=int(rec["B"]),
                sigma=int(rec["sigma"]),
                eta=float(rec["eta"]),
                rho_over_alpha=float(rec["rho_over_alpha"]),
                label=rec["label"],
                final_norm_ratio_median=float(rec["final_norm_ratio_median"]),
                predicted_sgd_threshold=float(rec["predicted_sgd_threshold"]),
                predicted_sam_threshold=float(rec["predicted_sam_threshold"]),
                lower_bound_stable=rec["lower_bound_stable"] == "true",
            ))
        return out


def emit_json(config, path) -> None:
    """Echo a run configuration with seed and software version."""
    if hasattr(config, "__dataclass_fields__"):
        payload = asdict(config)
    elif isinstance(config, dict):
        payload = dict(config)
    else:
        raise InputError(f"cannot serialize {type(config).__name__} to JSON")
    payload["software_version"] = __version__
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_fmt)
            fh.write("\n")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
