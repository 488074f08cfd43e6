"""Command line interface.

Subcommands reproduce the desk-scale experiments and write deterministic
CSV/JSON tables plus matplotlib figures into the output directory:

    stablab sweep-quadratic   phase-boundary grid for several algorithms
    stablab sam-rho-sweep     boundary grids across rho/alpha ratios
    stablab cr-race           convergence race across pattern complexities
    stablab track-coherence   coherence/spectrum tracking along training
    stablab bounds            print the closed-form thresholds

Common flags: --seed, --out, --config (JSON overrides), --threads,
--format csv|json, --no-figures. Exit code 0 on success, 2 on input errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .errors import InputError
from .dynamics import RandomPerturb, SamExact, SamLinearized, Sgd
from .quadratic import (
    BoundInputs,
    sam_convergence_band,
    sam_divergence_threshold,
    sam_lower_bound_stable,
    sgd_divergence_threshold,
)
from .sweep import (
    BoundaryReport,
    RACE_DEFAULTS,
    TRACKING_DEFAULTS,
    SweepGrid,
    emit_csv,
    emit_json,
    emit_tracking_series_csv,
    run_boundary_sweep,
    run_coherence_tracking,
    run_cr_race,
    run_sam_rho_sweep,
)


def _parse_algorithms(spec: str):
    """Parse 'sgd,random_perturb:1.0,sam:0.5,sam_exact:0.1' into algorithms."""
    out = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        name, _, param = token.partition(":")
        if name == "sgd":
            out.append(Sgd())
        elif name == "random_perturb":
            out.append(RandomPerturb(noise_scale=float(param or 1.0)))
        elif name == "sam":
            out.append(SamLinearized(rho=float(param or 0.5), alpha=1.0))
        elif name == "sam_exact":
            out.append(SamExact(rho=float(param or 0.5)))
        else:
            raise InputError(f"unknown algorithm {name!r}")
    if not out:
        raise InputError("no algorithms given")
    return tuple(out)


def _parse_floats(spec: str):
    return tuple(float(tok) for tok in spec.split(",") if tok.strip())


def _parse_ints(spec: str):
    return tuple(int(tok) for tok in spec.split(",") if tok.strip())


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def _merged(config: dict, args, keys) -> dict:
    """Config-file values overridden by explicitly passed CLI flags."""
    out = {}
    for key in keys:
        if key in config:
            out[key] = config[key]
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            out[key] = cli_val
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_table(obj, out: Path, stem: str, fmt: str) -> Path:
    if fmt == "csv":
        path = out / f"{stem}.csv"
        emit_csv(obj, path)
        return path
    path = out / f"{stem}.json"
    csv_path = out / f"{stem}.tmp.csv"
    emit_csv(obj, csv_path)
    import csv as csv_mod

    with open(csv_path, newline="") as fh:
        rows = list(csv_mod.DictReader(fh))
    csv_path.unlink()
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return path


def cmd_sweep_quadratic(args) -> int:
    config = _load_config(args.config)
    fields = _merged(config, args, (
        "batch_sizes", "sigmas", "eta", "n", "d", "target_sharpness",
        "family", "sampling", "steps", "trials", "seed", "threads"))
    if "batch_sizes" in fields:
        fields["batch_sizes"] = tuple(fields["batch_sizes"])
    if "sigmas" in fields:
        fields["sigmas"] = tuple(fields["sigmas"])
    algorithms = _parse_algorithms(
        args.algorithms or config.get("algorithms", "sgd,random_perturb:1.0,sam:1.0"))
    grid = SweepGrid(algorithms=algorithms, **fields)
    report = run_boundary_sweep(grid)
    out = _out_dir(args)
    table = _write_table(report, out, "boundary", args.format)
    emit_json(grid, out / "boundary_config.json")
    print(f"wrote {table}")
    names = [a.name for a in algorithms]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            frac = report.overlap(names[i], names[j])
            print(f"boundary agreement {names[i]} vs {names[j]}: {frac:.3f}")
    if not args.no_figures:
        from .figures import save_boundary_figure

        save_boundary_figure(report, out / "boundary.png")
        print(f"wrote {out / 'boundary.png'}")
    return 0


def cmd_sam_rho_sweep(args) -> int:
    config = _load_config(args.config)
    fields = _merged(config, args, (
        "batch_sizes", "sigmas", "eta", "n", "d", "target_sharpness",
        "family", "sampling", "steps", "trials", "seed", "threads"))
    if "batch_sizes" in fields:
        fields["batch_sizes"] = tuple(fields["batch_sizes"])
    if "sigmas" in fields:
        fields["sigmas"] = tuple(fields["sigmas"])
    kappas = _parse_floats(args.kappas or config.get("kappas", "0,0.1,0.5,1.0"))
    grid = SweepGrid(**fields)
    reports = run_sam_rho_sweep(grid, kappas)
    out = _out_dir(args)
    for kappa, report in zip(kappas, reports):
        stem = f"sam_rho_{kappa:g}".replace(".", "p")
        table = _write_table(report, out, stem, args.format)
        count = report.stable_cell_count(report.cells[0].algorithm)
        print(f"rho/alpha={kappa:g}: stable cells={count}  -> {table}")
    emit_json(grid, out / "sam_rho_config.json")
    if not args.no_figures:
        from .figures import save_rho_sweep_figure

        save_rho_sweep_figure(reports, kappas, out / "sam_rho_sweep.png")
        print(f"wrote {out / 'sam_rho_sweep.png'}")
    return 0


def cmd_cr_race(args) -> int:
    config = _load_config(args.config)
    fields = _merged(config, args, (
        "d", "d2", "n", "eta", "batch_size", "epochs", "seeds", "seed"))
    pattern_values = _parse_ints(
        args.pattern_values or config.get("pattern_values", "2,4,5"))
    rho = args.rho if args.rho is not None else config.get("rho", 0.01)
    seed = fields.pop("seed", 0)
    result = run_cr_race(pattern_values,
                         optimizers=(("sgd", 0.0), ("sam", rho)),
                         seed=seed, **fields)
    out = _out_dir(args)
    table = _write_table(result, out, "cr_race", args.format)
    emit_json(result.config, out / "cr_race_config.json")
    print(f"wrote {table}")
    for (bits, label), mean in sorted(result.loss_mean.items()):
        print(f"C={bits} {label}: final loss mean={mean[-1]:.6f}")
    if not args.no_figures:
        from .figures import save_race_figure

        save_race_figure(result, out / "cr_race.png")
        print(f"wrote {out / 'cr_race.png'}")
    return 0


def cmd_track_coherence(args) -> int:
    config = _load_config(args.config)
    fields = _merged(config, args, (
        "d", "d2", "n", "eta", "batch_size", "epochs", "seeds", "seed"))
    rhos = _parse_floats(args.rhos or config.get("rhos", "0.01,0.05,0.1"))
    seed = fields.pop("seed", 0)
    result = run_coherence_tracking(rhos, seed=seed, **fields)
    out = _out_dir(args)
    table = _write_table(result, out, "tracking_final", args.format)
    emit_tracking_series_csv(result, out / "tracking_series.csv")
    emit_json(result.config, out / "tracking_config.json")
    print(f"wrote {table} and {out / 'tracking_series.csv'}")
    header = ("optimizer", "coherence", "lambda_max_S",
              "max_member_lambda_max", "lambda_max_H", "trace_H",
              "effective_rank")
    print("  ".join(f"{h:>22s}" for h in header))
    for row in result.final_table:
        print("  ".join(f"{row[h]:>22.6g}" if isinstance(row[h], float)
                        else f"{str(row[h]):>22s}" for h in header))
    if not args.no_figures:
        from .figures import save_tracking_figure

        save_tracking_figure(result, out / "tracking.png")
        print(f"wrote {out / 'tracking.png'}")
    return 0


def cmd_bounds(args) -> int:
    inputs = BoundInputs(
        n=args.n, batch_size=args.batch_size, eta=args.eta,
        lambda_max=args.lambda_max, sigma=args.sigma,
        lambda_min=args.lambda_min, rho_over_alpha=args.kappa,
        epsilon=args.epsilon,
    )
    sgd_thr = sgd_divergence_threshold(inputs)
    sam_thr = sam_divergence_threshold(inputs)
    stable = sam_lower_bound_stable(inputs)
    print(f"sgd divergence threshold eta*  : {sgd_thr:.9g}")
    print(f"sam divergence threshold eta*  : {sam_thr:.9g}")
    print(f"eta {args.eta:g} above sgd threshold : {args.eta >= sgd_thr}")
    print(f"eta {args.eta:g} above sam threshold : {args.eta >= sam_thr}")
    print(f"lower-bound family stable      : {stable}")
    if args.eigenvalues:
        eig = _parse_floats(args.eigenvalues)
        band = sam_convergence_band(eig, inputs)
        print(f"convergence band satisfied     : {band}")
    return 0


def _add_common(parser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (default 0)")
    parser.add_argument("--out", default="stablab_out",
                        help="output directory (default stablab_out)")
    parser.add_argument("--config", default=None,
                        help="JSON file with run parameters")
    parser.add_argument("--threads", type=int, default=None,
                        help="parallel workers for grid cells")
    parser.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="table output format")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering")


def _add_grid_flags(parser) -> None:
    parser.add_argument("--batch-sizes", dest="batch_sizes",
                        type=_parse_ints, default=None)
    parser.add_argument("--sigmas", type=_parse_ints, default=None)
    parser.add_argument("--eta", type=float, default=None)
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--d", type=int, default=None)
    parser.add_argument("--target-sharpness", dest="target_sharpness",
                        type=float, default=None)
    parser.add_argument("--family", choices=("spike", "lower_bound"),
                        default=None)
    parser.add_argument("--sampling", choices=("bernoulli", "fixed_size"),
                        default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--trials", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablab",
        description="Stability laboratory for SGD, perturbed SGD, and SAM",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep-quadratic",
                       help="phase-boundary grid over (B, sigma)")
    _add_common(p)
    _add_grid_flags(p)
    p.add_argument("--algorithms", default=None,
                   help="comma list, e.g. sgd,random_perturb:1.0,sam:1.0")
    p.set_defaults(func=cmd_sweep_quadratic)

    p = sub.add_parser("sam-rho-sweep",
                       help="boundary grids across rho/alpha ratios")
    _add_common(p)
    _add_grid_flags(p)
    p.add_argument("--kappas", default=None,
                   help="comma list of rho/alpha ratios (default 0,0.1,0.5,1)")
    p.set_defaults(func=cmd_sam_rho_sweep)

    p = sub.add_parser("cr-race",
                       help="convergence race across pattern complexities")
    _add_common(p)
    p.add_argument("--pattern-values", dest="pattern_values", default=None,
                   help="comma list of pattern bit counts (default 2,4,5)")
    p.add_argument("--rho", type=float, default=None,
                   help="SAM radius for the race (default 0.01)")
    for flag, typ in (("--d", int), ("--d2", int), ("--n", int),
                      ("--eta", float), ("--batch-size", int),
                      ("--epochs", int), ("--seeds", int)):
        p.add_argument(flag, dest=flag.lstrip("-").replace("-", "_"),
                       type=typ, default=None)
    p.set_defaults(func=cmd_cr_race)

    p = sub.add_parser("track-coherence",
                       help="coherence/spectrum tracking along training")
    _add_common(p)
    p.add_argument("--rhos", default=None,
                   help="comma list of SAM radii (default 0.01,0.05,0.1)")
    for flag, typ in (("--d", int), ("--d2", int), ("--n", int),
                      ("--eta", float), ("--batch-size", int),
                      ("--epochs", int), ("--seeds", int)):
        p.add_argument(flag, dest=flag.lstrip("-").replace("-", "_"),
                       type=typ, default=None)
    p.set_defaults(func=cmd_track_coherence)

    p = sub.add_parser("bounds", help="print closed-form thresholds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--lambda-max", dest="lambda_max", type=float,
                   required=True)
    p.add_argument("--lambda-min", dest="lambda_min", type=float, default=0.0)
    p.add_argument("--kappa", type=float, default=0.0,
                   help="rho/alpha ratio (default 0)")
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--eigenvalues", default=None,
                   help="comma list to test the convergence band")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
