"""Command-line interface: design, assign, analyze, ci, test, simulate.

Machine-readable JSON goes to standard out (or ``--out``); human summaries
go to standard error.  Every JSON payload embeds the tool version, master
seed, criterion parameters, and draw counts, which is enough to replay a run
bit for bit.  Exit codes: 0 success, 2 argument or configuration errors,
3 acceptance timeout, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .assignment import AcceptanceTimeout, rejection_rerandomize
from .balance import Assignment, make_criterion
from .datafiles import (
    read_assignment_csv,
    read_matrix_csv,
    read_outcome_csv,
    read_table_csv,
    write_assignment_csv,
    write_json,
)
from .estimators import ObservedExperiment, tau_d, tau_dr, tau_l
from .finite_pop import ExperimentFrame, SingularCovariance
from .inference import confidence_interval, randomization_test
from .missing_data import (
    MaskedMatrix,
    ResponseRecord,
    augment_missing_indicators,
    mask_missing_outcomes,
    tau_dr_missing_outcomes,
)
from .outcome_models import OutcomeModelSpec
from .simulate import (
    FIGURE_FAMILIES,
    EstimatorPlan,
    SimulationConfig,
    emit_report,
    run_scenario,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TIMEOUT = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


def _say(msg: str):
    print(msg, file=sys.stderr)


def _check_keys(block: dict, allowed: set[str], where: str):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, {"seed", "criterion", "columns", "model", "inference", "simulation"}, "config")
    _check_keys(cfg.get("criterion", {}), {"metric", "pa", "threshold_source", "mc_draws", "a_matrix_csv"}, "criterion")
    _check_keys(cfg.get("columns", {}), {"rr", "adj"}, "columns")
    _check_keys(cfg.get("model", {}), {"kind", "n_trees", "max_depth", "min_leaf", "columns"}, "model")
    _check_keys(cfg.get("inference", {}), {"alpha", "mixture_draws", "test_draws"}, "inference")
    _check_keys(
        cfg.get("simulation", {}),
        {"dgp", "n_grid", "d", "scenarios", "replications", "pa", "metric",
         "threshold_source", "mc_draws", "estimators", "k_folds", "alpha", "mixture_draws"},
        "simulation",
    )
    return cfg


def _resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("RERAND_SEED")
    if env is not None:
        return int(env)
    raise ConfigError("no seed given: pass --seed, put 'seed' in the config, or set RERAND_SEED")


def _cols_by_name(names, wanted, what) -> tuple[int, ...]:
    index = {nm: i for i, nm in enumerate(names)}
    out = []
    for w in wanted:
        if w not in index:
            raise ConfigError(f"{what} column {w!r} not in the covariate file")
        out.append(index[w])
    return tuple(out)


def _load_frame(args, cfg: dict) -> ExperimentFrame:
    names, values, unit_ids = read_table_csv(args.covariates)
    n_missing = np.isnan(values).sum(axis=0)
    if n_missing.any():
        for nm, cnt in zip(names, n_missing):
            if cnt:
                _say(f"column {nm!r}: {int(cnt)} missing cells")
        _say("applying missingness-indicator augmentation")
        frame = augment_missing_indicators(MaskedMatrix.from_values(values, names))
        names = frame.names
    else:
        frame = ExperimentFrame(values, names)
    cols = cfg.get("columns", {})
    rr = _cols_by_name(names, cols["rr"], "rr") if "rr" in cols else None
    adj = _cols_by_name(names, cols["adj"], "adj") if "adj" in cols else None
    return frame.with_cols(rr_cols=rr, adj_cols=adj), unit_ids


def _make_criterion(args, cfg: dict, frame: ExperimentFrame, seed: int, n1: int | None):
    crit_cfg = dict(cfg.get("criterion", {}))
    metric = getattr(args, "metric", None) or crit_cfg.get("metric", "mahalanobis")
    pa = getattr(args, "pa", None) or crit_cfg.get("pa", 0.01)
    source = getattr(args, "threshold_source", None) or crit_cfg.get("threshold_source", "chisq")
    mc_draws = getattr(args, "mc_draws", None) or crit_cfg.get("mc_draws", 100_000)
    a_matrix = None
    if crit_cfg.get("a_matrix_csv"):
        a_matrix = read_matrix_csv(crit_cfg["a_matrix_csv"])
    return make_criterion(
        frame,
        metric=metric,
        pa=float(pa),
        threshold_source=source,
        a_matrix=a_matrix,
        mc_draws=int(mc_draws),
        mc_seed=seed,
        n1=n1,
    )


def _model_spec(cfg: dict) -> OutcomeModelSpec:
    m = dict(cfg.get("model", {}))
    cols = m.get("columns")
    if isinstance(cols, list):
        cols = tuple(cols)
    return OutcomeModelSpec(
        kind=m.get("kind", "forest"),
        columns=cols,
        n_trees=int(m.get("n_trees", 15)),
        max_depth=m.get("max_depth"),
        min_leaf=int(m.get("min_leaf", 5)),
    )


def _meta(seed: int, criterion=None, **extra) -> dict:
    meta = {"tool": "rerand", "version": __version__, "seed": seed}
    if criterion is not None:
        meta["criterion"] = {
            "metric": criterion.metric,
            "threshold": criterion.threshold,
            "pa": criterion.target_pa,
            "threshold_source": criterion.threshold_source,
            "mc_draws": criterion.mc_draws,
        }
    meta.update(extra)
    return meta


def _cmd_design(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    frame, _ = _load_frame(args, cfg)
    criterion = _make_criterion(args, cfg, frame, seed, args.n1)
    payload = _meta(seed, criterion, d=frame.d, n=frame.n, rr_cols=list(frame.rr_cols))
    write_json(payload, args.out)
    _say(
        f"resolved threshold a={criterion.threshold:.6g} for d={frame.d} "
        f"covariates at pa={criterion.target_pa} ({criterion.threshold_source})"
    )
    return EXIT_OK


def _cmd_assign(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    frame, unit_ids = _load_frame(args, cfg)
    n1 = args.n1 if args.n1 is not None else frame.n // 2
    criterion = _make_criterion(args, cfg, frame, seed, n1)
    from .rng import substream

    log = rejection_rerandomize(
        criterion, frame, n1, substream(seed, "assign"), max_attempts=args.max_attempts
    )
    write_assignment_csv(args.assignment_out, log.accepted.z, unit_ids)
    payload = _meta(
        seed, criterion, attempts=log.attempts, final_metric=log.final_metric,
        n1=n1, assignment_csv=args.assignment_out,
    )
    write_json(payload, args.out)
    _say(f"accepted after {log.attempts} attempts; metric {log.final_metric:.6g}")
    return EXIT_OK


def _load_experiment(args, cfg):
    frame, _ = _load_frame(args, cfg)
    z = Assignment(read_assignment_csv(args.assignment))
    y_raw = read_outcome_csv(args.outcomes)
    y, observed = mask_missing_outcomes(y_raw)
    exp = ObservedExperiment(frame, z, y)
    return exp, observed


def _analyze(args, cfg, exp, observed, seed):
    method = args.method.upper()
    if method == "D":
        report = tau_d(exp)
        eif = None
    elif method == "L":
        report = tau_l(exp)
        eif = None
    elif method == "DR":
        from .rng import substream

        spec = _model_spec(cfg)
        k = args.k_folds
        if observed.all():
            report, eif = tau_dr(exp, spec, k=k, rng=substream(seed, "dr"))
        else:
            _say(f"{int((~observed).sum())} outcomes missing; using response reweighting")
            report = tau_dr_missing_outcomes(
                exp, ResponseRecord(observed), spec, k=k, rng=substream(seed, "dr")
            )
            eif = None
    else:
        raise ConfigError("method must be D, L, or DR")
    if method != "DR" and not observed.all():
        raise ConfigError("methods D and L need fully observed outcomes")
    return report, eif


def _cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    exp, observed = _load_experiment(args, cfg)
    report, eif = _analyze(args, cfg, exp, observed, seed)
    if args.eif_out and eif is not None:
        with open(args.eif_out, "w", encoding="utf-8") as fh:
            fh.write("eif1,eif0,eif\n")
            for a, b, c in zip(eif.eif1, eif.eif0, eif.eif):
                fh.write(f"{float(a)!r},{float(b)!r},{float(c)!r}\n")
    payload = _meta(
        seed,
        method=report.method,
        tau_hat=report.tau_hat,
        v_hat=report.v_hat,
        r2_hat=report.r2_hat,
        diagnostics={k: v for k, v in report.diagnostics.items() if not isinstance(v, np.ndarray)},
    )
    write_json(payload, args.out)
    _say(f"tau_hat[{report.method}] = {report.tau_hat:.6g}")
    return EXIT_OK


def _cmd_ci(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    exp, observed = _load_experiment(args, cfg)
    criterion = _make_criterion(args, cfg, exp.frame, seed, exp.z.n1)
    report, _ = _analyze(args, cfg, exp, observed, seed)
    inf_cfg = cfg.get("inference", {})
    alpha = args.alpha if args.alpha is not None else float(inf_cfg.get("alpha", 0.05))
    draws = args.mixture_draws if args.mixture_draws is not None else int(
        inf_cfg.get("mixture_draws", 1_000_000)
    )
    lo, hi = confidence_interval(
        report, exp.frame.d, criterion.threshold, exp.frame.n, alpha, draws, seed
    )
    report.ci = (lo, hi)
    payload = _meta(
        seed, criterion,
        method=report.method, tau_hat=report.tau_hat, v_hat=report.v_hat,
        r2_hat=report.r2_hat, alpha=alpha, mixture_draws=draws, ci=[lo, hi],
    )
    write_json(payload, args.out)
    _say(f"{100 * (1 - alpha):g}% CI [{lo:.6g}, {hi:.6g}]")
    return EXIT_OK


def _cmd_test(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    exp, observed = _load_experiment(args, cfg)
    if not observed.all():
        raise ConfigError("randomization tests need fully observed outcomes")
    criterion = _make_criterion(args, cfg, exp.frame, seed, exp.z.n1)
    statistic = args.statistic.upper()
    stat_arg = _model_spec(cfg) if statistic == "DR" else statistic
    draws = args.test_draws if args.test_draws is not None else int(
        cfg.get("inference", {}).get("test_draws", 999)
    )
    result = randomization_test(exp, criterion, stat_arg, b=draws, seed=seed, k=args.k_folds)
    payload = _meta(
        seed, criterion,
        statistic=statistic, p_value=result.p_value,
        observed_stat=result.observed_stat, null_draws=result.null_draws,
    )
    write_json(payload, args.out)
    _say(f"p = {result.p_value:.4g} over {result.null_draws} null draws")
    return EXIT_OK


def _sim_config(cfg: dict, seed: int) -> SimulationConfig:
    sim = dict(cfg.get("simulation", {}))
    plans = []
    for p in sim.get("estimators", []):
        _check_keys(p, {"name", "kind", "model", "stepwise"}, "estimator")
        model = None
        if "model" in p:
            model = _model_spec({"model": p["model"]})
        plans.append(
            EstimatorPlan(p["name"], p["kind"], model, bool(p.get("stepwise", False)))
        )
    kwargs = dict(
        dgp=sim.get("dgp", "linear"),
        n_grid=tuple(sim.get("n_grid", (100, 200, 500, 1000))),
        d=int(sim.get("d", 10)),
        scenarios=tuple(sim.get("scenarios", (1, 2, 3, 4))),
        replications=int(sim.get("replications", 1000)),
        pa=float(sim.get("pa", 0.01)),
        metric=sim.get("metric", "mahalanobis"),
        threshold_source=sim.get("threshold_source", "chisq"),
        mc_draws=int(sim.get("mc_draws", 100_000)),
        k_folds=int(sim.get("k_folds", 2)),
        alpha=float(sim.get("alpha", 0.05)),
        mixture_draws=int(sim.get("mixture_draws", 400_000)),
        seed=seed,
    )
    if plans:
        kwargs["estimators"] = tuple(plans)
    return SimulationConfig(**kwargs)


def _cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    sim_config = _sim_config(cfg, seed)
    table = run_scenario(sim_config, workers=args.workers)
    figures = tuple(args.figure) if args.figure else None
    paths = emit_report(table, args.out_dir, figures)
    _say(f"wrote {len(paths)} files to {args.out_dir}")
    write_json(_meta(seed, files=paths, rows=len(table.rows)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rerand",
        description="Design, run, and analyze rerandomized experiments.",
    )
    parser.add_argument("--version", action="version", version=f"rerand {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, covariates=True):
        if covariates:
            p.add_argument("--covariates", required=True, help="covariate CSV (header row required)")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (RERAND_SEED is the fallback)")
        p.add_argument("--out", help="write JSON here instead of stdout")

    def criterion_flags(p):
        p.add_argument("--metric", choices=("mahalanobis", "euclidean", "quadratic_form"))
        p.add_argument("--pa", type=float, help="target acceptance probability")
        p.add_argument("--threshold-source", dest="threshold_source", choices=("chisq", "monte_carlo"))
        p.add_argument("--mc-draws", dest="mc_draws", type=int)

    p = sub.add_parser("design", help="resolve a balance criterion and threshold")
    common(p)
    criterion_flags(p)
    p.add_argument("--n1", type=int, help="treated-arm size (default n/2)")
    p.set_defaults(fn=_cmd_design)

    p = sub.add_parser("assign", help="draw an acceptable assignment by rejection sampling")
    common(p)
    criterion_flags(p)
    p.add_argument("--n1", type=int)
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--assignment-out", dest="assignment_out", required=True)
    p.set_defaults(fn=_cmd_assign)

    def analysis_flags(p):
        p.add_argument("--assignment", required=True, help="assignment CSV with a z column")
        p.add_argument("--outcomes", required=True, help="outcome CSV (one column)")
        p.add_argument("--k-folds", dest="k_folds", type=int, default=2)

    p = sub.add_parser("analyze", help="point estimate with variance and R-squared")
    common(p)
    analysis_flags(p)
    p.add_argument("--method", required=True, choices=("D", "L", "DR", "d", "l", "dr"))
    p.add_argument("--eif-out", dest="eif_out", help="CSV dump of influence values (DR only)")
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("ci", help="mixture-distribution confidence interval")
    common(p)
    analysis_flags(p)
    criterion_flags(p)
    p.add_argument("--method", required=True, choices=("D", "L", "DR", "d", "l", "dr"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--mixture-draws", dest="mixture_draws", type=int)
    p.set_defaults(fn=_cmd_ci)

    p = sub.add_parser("test", help="randomization test of the sharp null")
    common(p)
    analysis_flags(p)
    criterion_flags(p)
    p.add_argument("--statistic", default="D", choices=("D", "L", "DR", "d", "l", "dr"))
    p.add_argument("--test-draws", dest="test_draws", type=int)
    p.set_defaults(fn=_cmd_test)

    p = sub.add_parser("simulate", help="run the finite-sample simulation study")
    common(p, covariates=False)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--figure", action="append", choices=FIGURE_FAMILIES,
                   help="emit only these figure families (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AcceptanceTimeout as err:
        write_json(
            {
                "error": "acceptance_timeout",
                "attempts": err.attempts,
                "best_metric": err.best_metric,
                "threshold": err.threshold,
            },
            getattr(args, "out", None),
        )
        _say(str(err))
        return EXIT_TIMEOUT
    except (SingularCovariance, np.linalg.LinAlgError, ArithmeticError) as err:
        _say(f"numerical failure: {err}")
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as err:
        _say(f"error: {err}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
