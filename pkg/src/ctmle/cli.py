"""Command-line entry point: ``ctmle estimate`` and ``ctmle simulate``.

Exit codes: 0 success, 1 estimation failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

from ctmle.data import DataError
from ctmle.estimators import (ESTIMATOR_NAMES, TSM_ESTIMATORS, EstimatorConfig, multiarm_means,
                              run_estimator)
from ctmle.io import (LABELS, AnalysisConfig, ConfigError, dumps, estimate_table, load_csv,
                      simulation_table, write_text)
from ctmle.simulation import run_mc

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _common(p):
    p.add_argument("--estimator", help="comma-separated estimator names "
                   f"({', '.join(ESTIMATOR_NAMES)})")
    p.add_argument("--or-learner", help="outcome learner spec, e.g. glm or hal:max_knots=5")
    p.add_argument("--ps-learner", help="propensity learner spec for standard estimators")
    p.add_argument("--smoother-df", type=int, help="spline df of the adaptive propensity")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 5)")
    p.add_argument("--level", type=float, help="confidence level (default 0.95)")
    p.add_argument("--ps-floor", type=float, help="lower bound on propensity scores")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", default=".", help="output directory (default: current)")


def build_parser():
    parser = argparse.ArgumentParser(prog="ctmle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate treatment effects from a CSV file")
    est.add_argument("data", help="CSV file with a header row")
    est.add_argument("--config", help="INI configuration file; flags override it")
    est.add_argument("--treatment", help="treatment column (default A)")
    est.add_argument("--outcome", help="outcome column (default Y)")
    est.add_argument("--covariates", help="comma-separated covariate columns (default: rest)")
    est.add_argument("--estimand", choices=("ate", "tsm"), help="default ate")
    est.add_argument("--arm", type=int, help="arm for --estimand tsm (default 1)")
    est.add_argument("--multiarm", action="store_true", default=None,
                     help="estimate every arm's mean and test equality")
    est.add_argument("--impute", action="store_true", default=None,
                     help="mean/mode-impute missing covariates with indicator columns")
    _common(est)

    sim = sub.add_parser("simulate", help="Monte Carlo study on a built-in design")
    sim.add_argument("--dgp", required=True, choices=("sim1", "sim2"))
    sim.add_argument("--gamma", type=float, default=0.0, help="positivity knob for sim1")
    sim.add_argument("--n", type=int, default=100, help="sample size")
    sim.add_argument("--reps", type=int, default=100, help="replicates (at least 2)")
    sim.add_argument("--workers", type=int, default=1, help="worker processes")
    sim.add_argument("--estimand", choices=("ate", "tsm"), default="ate")
    sim.add_argument("--variance", choices=("cv", "eif", "none"), default="cv",
                     help="standard-error method inside each replicate")
    _common(sim)
    return parser


def _overrides(args):
    return {
        "estimators": args.estimator,
        "or_learner": args.or_learner,
        "ps_learner": args.ps_learner,
        "smoother_df": args.smoother_df,
        "folds": args.folds,
        "level": args.level,
        "ps_floor": args.ps_floor,
        "seed": args.seed,
        "treatment": args.treatment,
        "outcome": args.outcome,
        "covariates": args.covariates,
        "estimand": args.estimand,
        "arm": args.arm,
        "impute": args.impute,
        "multiarm": args.multiarm,
    }


def _estimator_config(cfg):
    return EstimatorConfig(ps_floor=cfg.ps_floor, level=cfg.level, V=cfg.folds, seed=cfg.seed)


def cmd_estimate(args) -> int:
    try:
        cfg = AnalysisConfig.from_sources(args.config, _overrides(args))
        ds, ingestion = load_csv(args.data, cfg.treatment, cfg.outcome, cfg.covariates,
                                 cfg.impute)
        if cfg.multiarm:
            bad = [e for e in cfg.estimators if e not in TSM_ESTIMATORS]
            if bad:
                raise ConfigError(f"--multiarm supports {sorted(TSM_ESTIMATORS)}, not {bad}")
        elif set(ds.arms) != {0, 1}:
            raise ConfigError(f"treatment labels {ds.arms} are not binary; use --multiarm")
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    econfig = _estimator_config(cfg)
    payload = {"config": cfg.to_dict(), "ingestion": ingestion.to_dict(), "n": ds.n}
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if cfg.multiarm:
                results, table = _run_multiarm(ds, cfg, econfig)
            else:
                results, table = _run_binary(ds, cfg, econfig)
        payload["warnings"] = sorted({str(w.message) for w in caught})
    except Exception as exc:  # any estimation failure is reported, not raised
        payload.update(status="error", error=f"{type(exc).__name__}: {exc}")
        write_text(os.path.join(args.out, "estimate.json"), dumps(payload) + "\n")
        print(f"estimation failed: {payload['error']}", file=sys.stderr)
        return EXIT_FAILURE
    payload.update(status="ok", results=results)
    write_text(os.path.join(args.out, "estimate.json"), dumps(payload) + "\n")
    write_text(os.path.join(args.out, "estimate.txt"), table)
    sys.stdout.write(table)
    return EXIT_OK


def _result(report, cfg):
    out = report.to_dict()
    out["seed"] = cfg.seed
    return out


def _run_binary(ds, cfg, econfig):
    results, rows = [], {}
    learners = {"or_spec": cfg.or_learner, "ps_spec": cfg.ps_learner,
                "smoother_spec": cfg.smoother}
    for name in cfg.estimators:
        report = run_estimator(name, ds, config=econfig, estimand=cfg.estimand, arm=cfg.arm,
                               **learners)
        results.append(_result(report, cfg))
        rows[LABELS[name]] = [(report.psi, report.ci)]
    column = "ATE" if cfg.estimand == "ate" else f"Arm {cfg.arm}"
    what = ("average treatment effect" if cfg.estimand == "ate"
            else f"mean outcome under arm {cfg.arm}")
    return results, estimate_table(rows, [column], what, cfg.level)


def _run_multiarm(ds, cfg, econfig):
    results, rows, p_values = [], {}, {}
    for name in cfg.estimators:
        report = multiarm_means(ds, cfg.or_learner, cfg.smoother, econfig, estimator=name,
                                ps_spec=cfg.ps_learner)
        entry = report.to_dict()
        entry["estimator"] = name
        entry["seed"] = cfg.seed
        results.append(entry)
        label = LABELS[name]
        rows[label] = [(r.psi, r.ci) for r in report.reports]
        p_values[label] = report.wald.p_value
    columns = [f"Arm {k}" for k in ds.arms]
    return results, estimate_table(rows, columns, "mean outcome by arm", cfg.level,
                                   p_values=p_values)


def cmd_simulate(args) -> int:
    names = tuple(s.strip() for s in (args.estimator or "ctmle,tmle").split(",") if s.strip())
    unknown = [n for n in names if n not in ESTIMATOR_NAMES]
    if unknown:
        print(f"error: unknown estimator(s) {unknown}", file=sys.stderr)
        return EXIT_USAGE
    if args.reps < 2:
        print("error: --reps must be at least 2 (variance is undefined otherwise)",
              file=sys.stderr)
        return EXIT_USAGE
    options = {"variance": args.variance}
    if args.or_learner:
        options["or_spec"] = args.or_learner
    if args.ps_learner:
        options["ps_spec"] = args.ps_learner
    if args.smoother_df is not None:
        options["smoother_spec"] = f"spline:df={args.smoother_df}"
    for key, value in (("V", args.folds), ("level", args.level), ("ps_floor", args.ps_floor)):
        if value is not None:
            options[key] = value
    try:
        report = run_mc(args.dgp, names, reps=args.reps, base_seed=args.seed or 0, n=args.n,
                        gamma=args.gamma, workers=args.workers, estimand=args.estimand,
                        **options)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"simulation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    os.makedirs(args.out, exist_ok=True)
    write_text(os.path.join(args.out, "simulation.json"), report.to_json() + "\n")
    write_text(os.path.join(args.out, "simulation.csv"), report.to_csv())
    for name in report.kde:
        write_text(os.path.join(args.out, f"kde_{name}.csv"), report.kde_csv(name))
    table = simulation_table(report)
    write_text(os.path.join(args.out, "simulation.txt"), table)
    sys.stdout.write(table)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if args.command == "estimate":
        return cmd_estimate(args)
    return cmd_simulate(args)


if __name__ == "__main__":
    sys.exit(main())
