"""Command-line entry point.

Exit codes: 0 success, 2 invalid input data or configuration, 3 numerical
failure (rank deficiency, separation, too many failed simulation runs).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .control import balance_diagnostic, export_density_data, fit_de_model
from .errors import NumericalError, ValidationError
from .estimators import (
    WorkingModelSpec,
    ancova_adjusted,
    bootstrap_se,
    composite_adjusted_means,
    composite_de_er,
    linear_dr_fit,
    residual_inclusion,
    unadjusted_means,
)
from .simulation import DETAIL_COLUMNS, TABLE_COLUMNS, detail_table, report_table, run_monte_carlo, true_means

LABELS = {
    "ancova2": "ANCOVA II",
    "ancova1": "ANCOVA I",
    "unadjusted": "No adjustment",
    "composite_de_er": "Composite DE-ER",
}
ESTIMATE_COLUMNS = ["method", "label", "arm_index", "dose_value", "n", "estimate", "se", "ci_low", "ci_high"]
CONTRAST_COLUMNS = ["method", "arm_j", "arm_k", "estimate", "se", "ci_low", "ci_high"]
COEF_COLUMNS = ["method", "term", "estimate", "se"]


class _ListHandler(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def _mean_estimator(method: str, working: WorkingModelSpec):
    if method == "unadjusted":
        return lambda ds, cv: unadjusted_means(ds)
    if method == "composite_de_er":
        return lambda ds, cv: composite_adjusted_means(ds, cv, working)
    spec = WorkingModelSpec(working.family, method, working.include_covariates, working.include_cv)
    return lambda ds, cv: ancova_adjusted(ds, cv, spec)


def cmd_analyze(args) -> int:
    cfg = io.load_analysis_config(args.config)
    ds = io.parse_dataset(args.dataset, outcome_kind=cfg.outcome_kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    handler = _ListHandler()
    logging.getLogger("cvdose").addHandler(handler)
    try:
        cv = fit_de_model(ds, cfg.de_spec)
        est_rows, con_rows, coef_rows = [], [], []
        for method in cfg.methods:
            if method in io.MEAN_METHODS:
                estimator = _mean_estimator(method, cfg.working)
                est = estimator(ds, cv)
                boot = None
                if cfg.bootstrap:
                    boot = bootstrap_se(ds, cfg.de_spec, estimator, cfg.bootstrap, args.seed)
                for k in range(ds.n_arms):
                    row = {
                        "method": method,
                        "label": LABELS[method],
                        "arm_index": k,
                        "dose_value": ds.dose_values[k],
                        "n": int(est.n_per_arm[k]),
                        "estimate": est.mu[k],
                        "se": est.se[k],
                        "ci_low": est.ci_low[k],
                        "ci_high": est.ci_high[k],
                    }
                    if boot is not None:
                        row["bootstrap_se"] = boot[k]
                    est_rows.append(row)
                for c in est.contrasts:
                    con_rows.append({"method": method, "arm_j": c.j, "arm_k": c.k, "estimate": c.estimate,
                                     "se": c.se, "ci_low": c.ci_low, "ci_high": c.ci_high})  # fmt: skip
            else:
                fit = {
                    "linear_dr": linear_dr_fit,
                    "residual_inclusion": residual_inclusion,
                    "composite_slope": composite_de_er,
                }[method](ds, cv)
                for term, b, se in zip(fit.labels, fit.coefficients, fit.se):
                    coef_rows.append({"method": method, "term": term, "estimate": b, "se": se})
    finally:
        logging.getLogger("cvdose").removeHandler(handler)

    columns = ESTIMATE_COLUMNS + (["bootstrap_se"] if cfg.bootstrap else [])
    io.write_rows(out / "estimates.csv", columns, est_rows)
    if con_rows:
        io.write_rows(out / "contrasts.csv", CONTRAST_COLUMNS, con_rows)
    if coef_rows:
        io.write_rows(out / "coefficients.csv", COEF_COLUMNS, coef_rows)
    w = cfg.working
    lines = [
        f"dataset: {args.dataset} (n={ds.n}, arms={ds.n_arms}, outcome={ds.outcome_kind.value})",
        f"de_spec: form={cfg.de_spec.form.value} gamma_hat={' '.join(io.fmt(g) for g in cv.gamma_hat)}",
        f"working: family={w.family.value} include_cv={w.include_cv} include_covariates={w.include_covariates}",
        f"methods: {', '.join(cfg.methods)}",
        f"ci_level: {cfg.ci_level}",
        f"bootstrap: {cfg.bootstrap or 'off'}" + (f" (seed {args.seed})" if cfg.bootstrap else ""),
    ]
    lines += [f"warning: {m}" for m in handler.messages] or ["warnings: none"]
    (out / "analyze.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'estimates.csv'}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = io.load_analysis_config(args.config)
    ds = io.parse_dataset(args.dataset, outcome_kind=cfg.outcome_kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cv = fit_de_model(ds, cfg.de_spec)
    report = balance_diagnostic(cv, ds)
    arms = [
        {"arm_index": k, "dose_value": ds.dose_values[k], "n": len(report.arm_residuals[k]),
         "residual_mean": report.means[k], "residual_sd": report.sds[k]}
        for k in range(ds.n_arms)
    ]  # fmt: skip
    io.write_rows(out / "balance_arms.csv", ["arm_index", "dose_value", "n", "residual_mean", "residual_sd"], arms)
    pairs = [
        {"arm_j": j, "arm_k": k, "ks_statistic": report.ks[i], "t_statistic": report.t[i]}
        for i, (j, k) in enumerate(report.pairs)
    ]
    io.write_rows(out / "balance_pairs.csv", ["arm_j", "arm_k", "ks_statistic", "t_statistic"], pairs)
    dens = export_density_data(report, args.bandwidth)
    rows = ({"arm_index": k, "grid_value": g, "density": f} for k, g, f in dens.rows())
    io.write_rows(out / "density.csv", ["arm_index", "grid_value", "density"], rows)
    print(f"wrote balance and density tables to {out} (bandwidth {dens.bandwidth:.4g})")
    return 0


def _scenarios(args):
    scenarios = io.load_scenarios(args.scenario)
    if args.seed is not None:
        scenarios = [type(s).from_dict({**s.to_dict(), "seed": args.seed}) for s in scenarios]
    return scenarios


def cmd_simulate(args) -> int:
    scenarios = _scenarios(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = [run_monte_carlo(s, threads=args.threads, max_failure_fraction=args.max_failure_rate) for s in scenarios]
    io.write_rows(out / "simulation_report.csv", TABLE_COLUMNS, report_table(reports, bias=args.bias))
    io.write_rows(out / "simulation_detail.csv", DETAIL_COLUMNS, detail_table(reports))
    print(f"wrote {len(reports)} scenario row(s) to {out / 'simulation_report.csv'}")
    return 0


def cmd_true_means(args) -> int:
    scenarios = _scenarios(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(scenarios):
        tm = true_means(s)
        for k, d in enumerate((1.0, 2.0, 3.0)):
            rows.append({"scenario": i, "n": s.n, "b1": s.b1, "b2": s.b2, "outcome_kind": s.outcome_kind,
                         "arm_index": k, "dose_value": d, "true_mu": tm.mu[k], "mc_se": tm.mc_se[k]})  # fmt: skip
    cols = ["scenario", "n", "b1", "b2", "outcome_kind", "arm_index", "dose_value", "true_mu", "mc_se"]
    io.write_rows(out / "true_means.csv", cols, rows)
    print(f"wrote {out / 'true_means.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (bootstrap; overrides scenario seeds)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes for simulation")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: current directory)")

    parser = argparse.ArgumentParser(prog="cvdose", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="estimate mean response per dose")
    p.add_argument("dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("diagnose", parents=[common], help="control-variable balance and density tables")
    p.add_argument("dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--bandwidth", type=float, default=None, help="KDE bandwidth (default: Silverman, max over arms)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo comparison of estimators")
    p.add_argument("scenario")
    p.add_argument("--bias", choices=("relative", "absolute"), default="relative")
    p.add_argument("--max-failure-rate", type=float, default=0.05)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("true-means", parents=[common], help="Monte Carlo true mean response per dose")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_true_means)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("threads", 1), ("out", ".")):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.command == "analyze" and args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
