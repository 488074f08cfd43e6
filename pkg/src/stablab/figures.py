"""Figure rendering for the CLI report path.

Renders the emitted tables as PNG files next to the CSV output: phase
diagrams with theoretical boundary overlays, convergence-race loss curves,
and the coherence-tracking series. The sweep library itself stays
plot-free; only the CLI calls into this module.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .sweep import BoundaryReport, RaceResult, TrackingResult

_LABEL_COLORS = {
    "diverged": (0.84, 0.23, 0.18),
    "converged": (0.17, 0.35, 0.78),
    "undetermined": (0.55, 0.63, 0.80),
    "skipped": (0.85, 0.85, 0.85),
}


def _index_of(values, target):
    """Fractional index of `target` on a log-spaced tick axis."""
    logs = np.log(np.asarray(values, dtype=float))
    t = math.log(max(target, 1e-300))
    return float(np.interp(t, logs, np.arange(len(values))))


def _draw_grid(ax, report: BoundaryReport, algorithm: str) -> None:
    grid = report.grid
    bs, sigmas = list(grid.batch_sizes), list(grid.sigmas)
    img = np.zeros((len(bs), len(sigmas), 3))
    labels = {(c.batch_size, c.sigma): c for c in report.cells
              if c.algorithm == algorithm}
    kappa = 0.0
    for (i, b) in enumerate(bs):
        for (j, s) in enumerate(sigmas):
            cell = labels[(b, s)]
            state = "skipped" if cell.skipped_reason else cell.label
            img[i, j] = _LABEL_COLORS[state]
            kappa = cell.rho_over_alpha
    ax.imshow(img, origin="lower", aspect="auto")
    # Sufficient-divergence boundary: cells with sigma below the curve
    # satisfy eta >= threshold(sigma).
    lam = grid.target_sharpness
    star = []
    for b in bs:
        noise = grid.n / b - 1.0
        star.append(grid.eta * lam * math.sqrt(noise) if noise > 0 else
                    float("inf"))
    ys = np.arange(len(bs))
    xs = [_index_of(sigmas, s) for s in star]
    ax.plot(xs, ys, color="black", lw=1.6, label="divergence threshold")
    # Matching-lower-bound stability boundary (dashed).
    lam_lifted = lam * (1.0 + kappa * lam)
    xs_lb = []
    for b in bs:
        denom = 2.0 - grid.eta * lam_lifted
        if denom <= 0:
            xs_lb.append(float("nan"))
            continue
        sigma_star = grid.eta * lam_lifted * (grid.n / b - 1.0) / denom
        xs_lb.append(_index_of(sigmas, max(sigma_star, sigmas[0])))
    ax.plot(xs_lb, ys, color="black", lw=1.4, ls="--",
            label="lower-bound boundary")
    ax.set_xticks(range(len(sigmas)), [str(s) for s in sigmas])
    ax.set_yticks(range(len(bs)), [str(b) for b in bs])
    ax.set_xlabel(r"coherence level $\sigma$")
    ax.set_ylabel("batch size B")
    title = algorithm if kappa == 0.0 else f"{algorithm} ($\\rho/\\alpha$={kappa:g})"
    ax.set_title(title, fontsize=10)


def save_boundary_figure(report: BoundaryReport, path) -> None:
    """Phase diagram per algorithm with threshold overlays."""
    algos = sorted({c.algorithm for c in report.cells})
    fig, axes = plt.subplots(1, len(algos), figsize=(4.2 * len(algos), 3.6),
                             squeeze=False)
    for ax, algo in zip(axes[0], algos):
        _draw_grid(ax, report, algo)
    handles = [plt.Rectangle((0, 0), 1, 1, color=_LABEL_COLORS[k])
               for k in ("diverged", "converged", "undetermined")]
    fig.legend(handles, ["diverged", "converged", "undetermined"],
               loc="lower center", ncol=3, fontsize=8, frameon=False)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(path, dpi=160)
    plt.close(fig)


def save_rho_sweep_figure(reports, rho_over_alpha_values, path) -> None:
    """Row of phase diagrams, one per rho/alpha ratio."""
    fig, axes = plt.subplots(1, len(reports),
                             figsize=(4.2 * len(reports), 3.6), squeeze=False)
    for ax, report in zip(axes[0], reports):
        algo = report.cells[0].algorithm
        _draw_grid(ax, report, algo)
    fig.tight_layout()
    fig.savefig(path, dpi=160)
    plt.close(fig)


def save_race_figure(result: RaceResult, path) -> None:
    """Mean loss curves with one-std bands per (pattern count, optimizer)."""
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    cmap = plt.get_cmap("viridis")
    bits_values = list(result.pattern_values)
    styles = {}
    for i, (name, rho) in enumerate(result.optimizers):
        label = name if name == "sgd" else f"sam[{rho:g}]"
        styles[label] = ["-", "--", ":", "-."][i % 4]
    for (bits, label), mean in sorted(result.loss_mean.items()):
        std = result.loss_std[(bits, label)]
        color = cmap(bits_values.index(bits) / max(1, len(bits_values) - 1) * 0.8)
        epochs = np.arange(len(mean))
        ax.plot(epochs, mean, styles[label], color=color,
                label=f"C={bits} {label}", lw=1.6)
        ax.fill_between(epochs, mean - std, mean + std, color=color,
                        alpha=0.15, lw=0)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (MSE)")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=160)
    plt.close(fig)


def save_tracking_figure(result: TrackingResult, path) -> None:
    """Median-over-seeds series of the tracked coherence/spectrum metrics."""
    metrics = [("coherence", "coherence measure"),
               ("lambda_max_S", r"$\lambda_{max}$(alignment matrix)"),
               ("max_member_lambda_max", "max per-sample sharpness")]
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.4))
    labels = []
    for name, rho in result.optimizers:
        labels.append(name if name == "sgd" else f"sam[{rho:g}]")
    for ax, (key, title) in zip(axes, metrics):
        for label in labels:
            seeds = sorted(s for (lab, s) in result.series if lab == label)
            per_seed = [result.series[(label, s)] for s in seeds]
            epochs = [rec["epoch"] for rec in per_seed[0]]
            stacked = np.array([[rec[key] for rec in rows]
                                for rows in per_seed])
            ax.plot(epochs, np.median(stacked, axis=0), label=label, lw=1.5)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=160)
    plt.close(fig)
