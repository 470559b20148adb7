"""Batch command-line front end.

Subcommands: ``synth`` (write synthetic scenario bundles), ``fuse-bayes``
(closed-form Bayesian fusion of one bundle), ``fuse-cpod`` (constrained-POD
ensemble fusion) and ``compare`` (both methods side by side with timings).

Exit codes: 0 success, 2 usage or input error, 3 numerical failure or
infeasible constraints. Output files are written atomically (temp file +
rename). ``FIELDFUSE_THREADS`` caps ensemble parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .bayes import (QoIMeasurement, bayes_summary, confidence_bands,
                    run_bayesian_fusion, write_bayes_result_csv)
from .cpod import cpod_ensemble, read_snapshot_bank, write_ensemble_csv
from .errors import (ConstraintInfeasibleError, DataError, GeometryError,
                     NumericalError, OperatorError)
from .prior import FlowCondition, Hyperparameters
from .synth import (ScenarioSpec, build_bundle, condition_spec,
                    generate_snapshot_bank, rae_table_conditions, read_bundle,
                    write_bundle)

__all__ = ["main"]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FIELDFUSE_THREADS", "1")))
    except ValueError:
        return 1


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_file(path: Path, writer) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    writer(tmp)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_hyper(args, default_tau_sq: float) -> Hyperparameters:
    hyper = Hyperparameters()
    if args.config:
        hyper = Hyperparameters.from_file(args.config)
    updates = {"tau_sq": default_tau_sq if args.tau2 is None else args.tau2}
    if args.sigma1sq is not None:
        updates["sigma1_sq"] = args.sigma1sq
    if args.sigma2sq is not None:
        updates["sigma2_sq"] = args.sigma2sq
    if args.ell is not None:
        updates["length_scale"] = args.ell
    if args.nugget is not None:
        updates["nugget"] = args.nugget
    return hyper.replace(**updates)


def _load_bank(args, bundle, bundle_dir: Path):
    if args.bank:
        bank = read_snapshot_bank(args.bank)
        if bank.n != bundle.grid.n:
            raise ValueError("snapshot bank does not match the bundle grid")
        return bank
    campaign_file = bundle_dir.parent / "campaign.json"
    if campaign_file.exists():
        with open(campaign_file) as f:
            campaign = json.load(f)
        base = ScenarioSpec.from_dict(campaign["scenario"])
        conditions = [FlowCondition(**c) for c in campaign["conditions"]]
    else:
        base = bundle.spec
        conditions = list(rae_table_conditions())
    return generate_snapshot_bank(base, conditions, fidelities=("measurement",),
                                  lhs_size=args.lhs_size, grid=bundle.grid)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = ScenarioSpec.from_file(args.config) if args.config else ScenarioSpec()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n is not None:
        overrides["n"] = args.n
    if overrides:
        spec = ScenarioSpec.from_dict({**spec.as_dict(), **overrides})
    out = Path(args.out)

    if args.conditions == "table-1":
        conditions = rae_table_conditions()
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, cond in enumerate(conditions):
            spec_i = condition_spec(spec, cond, i)
            bundle_dir = out / f"case_{i + 1:02d}"
            _write_bundle_atomic(build_bundle(spec_i), bundle_dir)
            rows.append([i + 1, cond.mach, cond.reynolds, cond.alpha_deg])
        def write_rows(path):
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["case", "mach", "reynolds", "alpha_deg"])
                w.writerows(rows)
        _atomic_write_file(out / "conditions.csv", write_rows)
        _write_json(out / "campaign.json", {
            "scenario": spec.as_dict(),
            "conditions": [c.as_dict() for c in conditions],
        })
        print(f"wrote {len(conditions)} bundles under {out}")
    else:
        _write_bundle_atomic(build_bundle(spec), out)
        print(f"wrote bundle {out} (n={spec.n})")
    return 0


def _write_bundle_atomic(bundle, directory: Path) -> None:
    tmp = directory.with_name(directory.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    write_bundle(bundle, tmp)
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def cmd_fuse_bayes(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = read_bundle(bundle_dir)
    hyper = _load_hyper(args, bundle.spec.tau_sq)
    z = QoIMeasurement(bundle.z_measured, hyper.tau_sq)
    result = run_bayesian_fusion(bundle.mu_wt_filled, bundle.mu_cfd, z,
                                 bundle.operator, bundle.grid, hyper,
                                 theta_override=args.theta,
                                 diag_only=True if args.diag_only else None)
    out = Path(args.out) if args.out else bundle_dir / "bayes"
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_file(out / "field.csv",
                       lambda p: write_bayes_result_csv(result, p, args.level))
    summary = bayes_summary(result, bundle.operator, bundle.mu_wt_filled,
                            bundle.mu_cfd, z)
    summary["hyperparameters"] = hyper.as_dict()
    summary["level"] = args.level
    _write_json(out / "summary.json", summary)
    if args.plot:
        _plot_bayes(out / "plot.svg", bundle, result, args.level)
    print(f"fuse-bayes: theta={result.theta:.4f} misfit={result.misfit:.3e} -> {out}")
    return 0


def cmd_fuse_cpod(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = read_bundle(bundle_dir)
    bank = _load_bank(args, bundle, bundle_dir)
    ensemble = cpod_ensemble(bank, bundle.mu_cfd, bundle.mu_wt_filled,
                             bundle.z_measured, bundle.operator,
                             T=args.T, beta=args.beta, seed=args.seed,
                             c=args.c, eps_c=args.eps_c,
                             max_iter=args.max_iter, max_workers=_threads())
    out = Path(args.out) if args.out else bundle_dir / "cpod"
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_file(out / "ensemble.csv",
                       lambda p: write_ensemble_csv(ensemble, p))

    def write_costs(path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["replicate", "iteration", "cost"])
            for r, history in enumerate(ensemble.cost_histories):
                for i, cost in enumerate(history):
                    w.writerow([r, i + 1, f"{cost:.17g}"])
    _atomic_write_file(out / "cost_history.csv", write_costs)

    _write_json(out / "summary.json", {
        "T": ensemble.T,
        "dof": ensemble.dof,
        "beta": args.beta,
        "t_value": ensemble.t_value,
        "stopping": {"c": args.c, "eps_c": args.eps_c, "max_iter": args.max_iter},
        "bank": {"q": bank.q,
                 "fidelities": {f: bank.fidelities.count(f)
                                for f in set(bank.fidelities)}},
        "cost_histories": [list(h) for h in ensemble.cost_histories],
        "failures": [list(f) for f in ensemble.failures],
    })
    print(f"fuse-cpod: T={ensemble.T} q={bank.q} -> {out}")
    return 0


def cmd_compare(args) -> int:
    bundle_dir = Path(args.bundle)
    bundle = read_bundle(bundle_dir)
    hyper = _load_hyper(args, bundle.spec.tau_sq)
    out = Path(args.out) if args.out else bundle_dir / "compare"
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    z = QoIMeasurement(bundle.z_measured, hyper.tau_sq)
    bayes = run_bayesian_fusion(bundle.mu_wt_filled, bundle.mu_cfd, z,
                                bundle.operator, bundle.grid, hyper,
                                theta_override=args.theta)
    t_bayes = time.perf_counter() - t0

    t1 = time.perf_counter()
    bank = _load_bank(args, bundle, bundle_dir)
    ensemble = cpod_ensemble(bank, bundle.mu_cfd, bundle.mu_wt_filled,
                             bundle.z_measured, bundle.operator,
                             T=args.T, beta=args.beta, seed=args.seed,
                             c=args.c, eps_c=args.eps_c,
                             max_iter=args.max_iter, max_workers=_threads())
    t_cpod = time.perf_counter() - t1

    def l2(v):
        return float(np.linalg.norm(v))

    qoi_map = bayes.qoi_fit
    qoi_cpod = bundle.operator.matrix.T @ ensemble.mean + bundle.operator.offset
    report = {
        "theta": bayes.theta,
        "rel_l2_cpod_vs_map": l2(ensemble.mean - bayes.y_map) / l2(bayes.y_map),
        "error_vs_truth": {
            "map": l2(bayes.y_map - bundle.y_true),
            "cpod_mean": l2(ensemble.mean - bundle.y_true),
            "measurement": l2(bundle.mu_wt_filled - bundle.y_true),
            "simulation": l2(bundle.mu_cfd - bundle.y_true),
        },
        "qoi_misfit": {
            "map": l2(bundle.z_measured - qoi_map),
            "cpod_mean": l2(bundle.z_measured - qoi_cpod),
        },
        "wall_clock_seconds": {"bayes": t_bayes, "cpod": t_cpod,
                               "total": time.perf_counter() - t0},
        "ensemble": {"T": ensemble.T, "bank_q": bank.q},
    }
    _atomic_write_file(out / "map_field.csv",
                       lambda p: write_bayes_result_csv(bayes, p, args.level))
    _atomic_write_file(out / "cpod_ensemble.csv",
                       lambda p: write_ensemble_csv(ensemble, p))
    _write_json(out / "compare.json", report)
    print(f"compare: rel L2 (cpod vs map) = {report['rel_l2_cpod_vs_map']:.4f} -> {out}")
    return 0


def _plot_bayes(path: Path, bundle, result, level: float) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lower, upper = confidence_bands(result, level)
    idx = np.arange(result.n)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.fill_between(idx, lower, upper, alpha=0.3, color="tab:blue",
                    label=f"{level:.0%} band")
    ax.plot(idx, bundle.mu_wt_filled, lw=0.8, color="tab:orange",
            label="measurement")
    ax.plot(idx, bundle.mu_cfd, lw=0.8, color="tab:green", label="simulation")
    ax.plot(idx, result.y_map, lw=1.4, color="tab:blue", label="fused (MAP)")
    ax.set_xlabel("cell index along surface loop")
    ax.set_ylabel("pressure coefficient")
    ax.invert_yaxis()
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# parser


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON/TOML file with a hyperparameters block")
    p.add_argument("--tau2", type=float, default=None,
                   help="QoI noise variance (default: the bundle's)")
    p.add_argument("--sigma1sq", type=float, default=None,
                   help="measurement-field variance")
    p.add_argument("--sigma2sq", type=float, default=None,
                   help="simulation-field variance")
    p.add_argument("--ell", type=float, default=None, help="kernel length scale")
    p.add_argument("--nugget", type=float, default=None, help="relative jitter")


def _add_cpod_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bank", help="read a snapshot bank directory instead of "
                                  "generating one")
    p.add_argument("--lhs-size", type=int, default=80,
                   help="extra Latin-hypercube simulation snapshots when "
                        "generating a bank (default 80)")
    p.add_argument("--T", type=int, default=1000,
                   help="ensemble replicates (default 1000)")
    p.add_argument("--beta", type=float, default=0.05,
                   help="two-sided bound miss probability (default 0.05)")
    p.add_argument("--c", type=int, default=5, help="stopping window length")
    p.add_argument("--eps-c", type=float, default=1e-6, dest="eps_c",
                   help="stopping threshold on the cost dispersion")
    p.add_argument("--max-iter", type=int, default=50, dest="max_iter")
    p.add_argument("--seed", type=int, default=0, help="ensemble master seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldfuse",
        description="Fuse simulation and measurement fields against measured "
                    "integral quantities.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scenario bundle")
    p.add_argument("--config", help="scenario JSON/TOML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="grid cell count")
    p.add_argument("--conditions", choices=["single", "table-1"],
                   default="single",
                   help="'table-1' writes one bundle per tabulated condition")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse-bayes", help="closed-form Bayesian fusion")
    p.add_argument("--bundle", required=True, help="scenario bundle directory")
    p.add_argument("--out", default=None)
    _add_hyper_flags(p)
    p.add_argument("--theta", type=float, default=None,
                   help="pin the fusion weight instead of estimating it")
    p.add_argument("--diag-only", action="store_true",
                   help="never materialize the full posterior covariance")
    p.add_argument("--level", type=float, default=0.95,
                   help="confidence level for the bands (default 0.95)")
    p.add_argument("--plot", action="store_true", help="write an SVG overview")
    p.set_defaults(func=cmd_fuse_bayes)

    p = sub.add_parser("fuse-cpod", help="constrained-POD ensemble fusion")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    _add_cpod_flags(p)
    p.set_defaults(func=cmd_fuse_cpod)

    p = sub.add_parser("compare", help="run both methods on one bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    _add_hyper_flags(p)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--level", type=float, default=0.95)
    _add_cpod_flags_compare(p)
    p.set_defaults(func=cmd_compare)

    return parser


def _add_cpod_flags_compare(p: argparse.ArgumentParser) -> None:
    # compare defaults to a lighter ensemble than the dedicated subcommand
    p.add_argument("--bank", help="snapshot bank directory")
    p.add_argument("--lhs-size", type=int, default=80)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--c", type=int, default=5)
    p.add_argument("--eps-c", type=float, default=1e-6, dest="eps_c")
    p.add_argument("--max-iter", type=int, default=50, dest="max_iter")
    p.add_argument("--seed", type=int, default=0)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError, KeyError,
            json.JSONDecodeError, ValueError, DataError, GeometryError) as exc:
        print(f"fieldfuse: input error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, OperatorError, ConstraintInfeasibleError) as exc:
        print(f"fieldfuse: numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
