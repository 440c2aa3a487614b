"""Finite-sample simulation harness.

One fixed dataset per (sample size, outcome setting); the only randomness
across replications is the treatment assignment, drawn under complete
randomization and under rerandomization.  Four covariate-availability
scenarios control which columns the design and analysis stages see.  Metrics
per cell: estimator mean and variance, coverage, power, pairwise mean squared
differences, and the rerandomization/complete-randomization ratios (precision
gain, coherence gain).  Everything is deterministic given the master seed,
independent of the worker count.
"""

from __future__ import annotations

import itertools
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .assignment import complete_randomization, rejection_rerandomize
from .balance import BalanceCriterion, make_criterion, metric_value
from .chisq import normal_quantile
from .estimators import ObservedExperiment, tau_d, tau_dr, tau_l
from .finite_pop import ExperimentFrame, PotentialOutcomes
from .inference import MixtureQuantileGrid
from .outcome_models import OutcomeModelSpec, make_folds, stepwise_select
from .rng import substream

__all__ = [
    "DgpSetting",
    "ScenarioSpec",
    "EstimatorPlan",
    "SimulationConfig",
    "MetricsTable",
    "generate_dgp",
    "run_scenario",
    "emit_report",
    "FIGURE_FAMILIES",
]

FIGURE_FAMILIES = ("precision", "coherence", "coverage", "power")

_RATIO_FLOOR = 1e-12
_REP_CHUNK = 100


@dataclass(frozen=True)
class DgpSetting:
    """Outcome-generating setting: linear or piecewise non-linear."""

    kind: str = "linear"
    n: int = 1000
    d: int = 10

    def __post_init__(self):
        if self.kind not in ("linear", "nonlinear"):
            raise ValueError("dgp kind must be 'linear' or 'nonlinear'")
        if self.d < 1:
            raise ValueError("d must be positive")


def _g(x: np.ndarray) -> np.ndarray:
    # Branch order matters: the quadratic branch covers [-1, 1).
    return np.where(x < -1.0, x + 0.4, np.where(x < 1.0, x * x - 1.6, np.sin(x) - 1.45))


def generate_dgp(setting: DgpSetting, rng) -> tuple[ExperimentFrame, PotentialOutcomes]:
    """Draw covariates and potential outcomes for one dataset.

    Covariates are equicorrelated standard Gaussians (unit variance, 0.7
    cross-correlation).  The control outcome is the row sum of the columns
    (optionally through the piecewise transform) plus Gaussian noise whose
    standard deviation is the sample SD of that sum divided by 5 (linear) or
    100 (non-linear); the treated outcome adds exactly 1, so the average
    effect is 1 by construction.
    """
    n, d = setting.n, setting.d
    common = rng.standard_normal(n)
    x = math.sqrt(0.7) * common[:, None] + math.sqrt(0.3) * rng.standard_normal((n, d))
    if setting.kind == "linear":
        signal = x.sum(axis=1)
        sigma = signal.std(ddof=1) / 5.0
    else:
        signal = _g(x).sum(axis=1)
        sigma = signal.std(ddof=1) / 100.0
    y0 = signal + rng.normal(0.0, sigma, n)
    return ExperimentFrame(x), PotentialOutcomes(y1=1.0 + y0, y0=y0)


@dataclass(frozen=True)
class ScenarioSpec:
    """Which columns the design stage and the analysis stage may use."""

    scenario_id: int
    rr_cols: tuple[int, ...]
    adj_cols: tuple[int, ...]

    @classmethod
    def for_dims(cls, scenario_id: int, d: int) -> "ScenarioSpec":
        """The four canonical overlap patterns, scaled to d columns.

        For ten columns: (1) both stages see all ten; (2) design sees the
        first six only; (3) analysis sees columns 4 through 10 only; (4) the
        two restrictions combined, leaving partial overlap.
        """
        first = tuple(range(math.ceil(0.6 * d)))
        last = tuple(range(int(0.3 * d), d))
        every = tuple(range(d))
        table = {
            1: (every, every),
            2: (first, every),
            3: (every, last),
            4: (first, last),
        }
        if scenario_id not in table:
            raise ValueError("scenario_id must be 1, 2, 3, or 4")
        rr, adj = table[scenario_id]
        return cls(scenario_id, rr, adj)


@dataclass(frozen=True)
class EstimatorPlan:
    """One estimator column in the metrics table."""

    name: str
    kind: str  # "D" | "L" | "DR"
    model: OutcomeModelSpec | None = None
    stepwise: bool = False

    def __post_init__(self):
        if self.kind not in ("D", "L", "DR"):
            raise ValueError("estimator kind must be 'D', 'L', or 'DR'")
        if self.kind == "DR" and self.model is None:
            raise ValueError("DR estimator needs an outcome model spec")


def default_estimators() -> tuple[EstimatorPlan, ...]:
    return (
        EstimatorPlan("D", "D"),
        EstimatorPlan("L", "L"),
        EstimatorPlan("DR-forest", "DR", OutcomeModelSpec(kind="forest")),
    )


@dataclass(frozen=True)
class SimulationConfig:
    dgp: str = "linear"
    n_grid: tuple[int, ...] = (100, 200, 500, 1000)
    d: int = 10
    scenarios: tuple[int, ...] = (1, 2, 3, 4)
    replications: int = 1000
    pa: float = 0.01
    metric: str = "mahalanobis"
    threshold_source: str = "chisq"
    mc_draws: int = 100_000
    estimators: tuple[EstimatorPlan, ...] = field(default_factory=default_estimators)
    k_folds: int = 2
    alpha: float = 0.05
    mixture_draws: int = 400_000
    seed: int = 0

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("need at least 2 replications")
        names = [p.name for p in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError("estimator names must be unique")


@dataclass
class MetricsTable:
    """Tidy metric rows: one value per (dgp, n, scenario, quantity, series, design)."""

    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("dgp", "n", "scenario", "quantity", "series", "design", "value")

    def add(self, **kw):
        self.rows.append({c: kw.get(c, "") for c in self.COLUMNS})

    def value(self, quantity, series, design, n=None, scenario=None):
        hits = [
            r
            for r in self.rows
            if r["quantity"] == quantity
            and r["series"] == series
            and r["design"] == design
            and (n is None or r["n"] == n)
            and (scenario is None or r["scenario"] == scenario)
        ]
        if len(hits) != 1:
            raise KeyError(
                f"{len(hits)} rows match ({quantity}, {series}, {design}, n={n}, scenario={scenario})"
            )
        v = hits[0]["value"]
        return v if v == "undefined" else float(v)

    def to_csv_text(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    repr(r[c]) if isinstance(r[c], float) else str(r[c])
                    for c in self.COLUMNS
                )
            )
        return "\n".join(lines) + "\n"


def _criterion_for(frame: ExperimentFrame, config: SimulationConfig, n1: int) -> BalanceCriterion:
    return make_criterion(
        frame,
        metric=config.metric,
        pa=config.pa,
        threshold_source=config.threshold_source,
        mc_draws=config.mc_draws,
        mc_seed=substream(config.seed, "mc-threshold").integers(1 << 31) if config.threshold_source == "monte_carlo" else None,
        n1=n1,
    )


def _estimate_one(plan: EstimatorPlan, exp: ObservedExperiment, config: SimulationConfig, rng):
    if plan.kind == "D":
        report = tau_d(exp)
    elif plan.kind == "L":
        if plan.stepwise:
            folds = make_folds(exp.z, config.k_folds, rng)
            chosen = stepwise_select(exp.frame.x_adj, exp.y, folds)
            sub = tuple(exp.frame.adj_cols[i] for i in chosen)
            report = tau_l(ObservedExperiment(exp.frame.with_cols(adj_cols=sub), exp.z, exp.y))
        else:
            report = tau_l(exp)
    else:
        model = plan.model
        if plan.stepwise and model.columns is None:
            model = replace(model, columns="stepwise")
        report, _ = tau_dr(exp, model, k=config.k_folds, rng=rng)
    return report.tau_hat, report.v_hat, report.r2_hat


def _rep_chunk(task: dict) -> dict:
    """Worker body: replications [lo, hi) of one (n, scenario) cell."""
    frame = ExperimentFrame(
        task["x"], rr_cols=task["rr_cols"], adj_cols=task["adj_cols"]
    )
    criterion = BalanceCriterion(
        task["metric"], task["threshold"], task["pa"], task["base_form"], "precomputed-cell"
    )
    config: SimulationConfig = task["config"]
    po = PotentialOutcomes(task["y1"], task["y0"])
    n1 = task["n1"]
    lo, hi = task["lo"], task["hi"]
    n_est = len(config.estimators)
    out = {
        design: np.empty((hi - lo, n_est, 3)) for design in ("cr", "rr")
    }
    attempts = np.zeros(hi - lo, dtype=np.int64)
    audit_ok = True
    key = (config.dgp, frame.n, task["scenario_id"])
    for r in range(lo, hi):
        z_cr = complete_randomization(frame.n, n1, substream(config.seed, "cr", *key, r))
        log = rejection_rerandomize(
            criterion, frame, n1, substream(config.seed, "rr", *key, r)
        )
        z_rr = log.accepted
        attempts[r - lo] = log.attempts
        audit_ok &= metric_value(criterion, frame, z_rr) < criterion.threshold
        for design, z in (("cr", z_cr), ("rr", z_rr)):
            exp = ObservedExperiment(frame, z, po.observed(z.z))
            for e, plan in enumerate(config.estimators):
                est_rng = substream(config.seed, "est", design, plan.name, *key, r)
                out[design][r - lo, e] = _estimate_one(plan, exp, config, est_rng)
    return {
        "lo": lo,
        "cr": out["cr"],
        "rr": out["rr"],
        "attempts": attempts,
        "audit_ok": bool(audit_ok),
    }


def _run_tasks(tasks: list[dict], workers: int) -> list[dict]:
    if workers <= 1:
        return [_rep_chunk(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_rep_chunk, tasks))


def _ratio(num: float, den: float):
    return num / den if den > _RATIO_FLOOR else "undefined"


def run_scenario(config: SimulationConfig, workers: int = 1) -> MetricsTable:
    """Execute the configured sweep and assemble the metrics table."""
    table = MetricsTable(meta={"config": config, "workers_independent": True})
    plans = config.estimators
    grids: dict = {}
    z975 = normal_quantile(1.0 - config.alpha / 2.0)

    for n in config.n_grid:
        setting = DgpSetting(config.dgp, n, config.d)
        frame0, po = generate_dgp(setting, substream(config.seed, "dgp", config.dgp, n, config.d))
        n1 = n // 2
        for scen_id in config.scenarios:
            scen = ScenarioSpec.for_dims(scen_id, config.d)
            frame = frame0.with_cols(rr_cols=scen.rr_cols, adj_cols=scen.adj_cols)
            criterion = _criterion_for(frame, config, n1)

            tasks = [
                {
                    "x": frame.covariates,
                    "y1": po.y1,
                    "y0": po.y0,
                    "rr_cols": scen.rr_cols,
                    "adj_cols": scen.adj_cols,
                    "metric": criterion.metric,
                    "threshold": criterion.threshold,
                    "pa": criterion.target_pa,
                    "base_form": criterion.base_form,
                    "scenario_id": scen_id,
                    "n1": n1,
                    "config": config,
                    "lo": lo,
                    "hi": min(lo + _REP_CHUNK, config.replications),
                }
                for lo in range(0, config.replications, _REP_CHUNK)
            ]
            results = _run_tasks(tasks, workers)
            results.sort(key=lambda r: r["lo"])
            if not all(r["audit_ok"] for r in results):
                raise RuntimeError("rerandomization audit failed: accepted draw above threshold")
            stats = {
                design: np.concatenate([r[design] for r in results]) for design in ("cr", "rr")
            }

            gkey = (criterion.d, round(criterion.threshold, 12))
            if gkey not in grids:
                grids[gkey] = MixtureQuantileGrid(
                    criterion.d,
                    criterion.threshold,
                    1.0 - config.alpha / 2.0,
                    draws=config.mixture_draws,
                    seed=config.seed,
                )
            grid = grids[gkey]

            for e, plan in enumerate(plans):
                for design in ("cr", "rr"):
                    tau, v, r2 = (stats[design][:, e, j] for j in range(3))
                    se = np.sqrt(np.maximum(v, 0.0) / n)
                    if design == "cr":
                        hw = z975 * se
                    else:
                        hw = np.array([grid(r) for r in r2]) * se
                    base = dict(dgp=config.dgp, n=n, scenario=scen_id, series=plan.name, design=design)
                    table.add(quantity="mean", value=float(tau.mean()), **base)
                    table.add(quantity="variance", value=float(tau.var(ddof=1)), **base)
                    table.add(quantity="coverage", value=float(np.mean(np.abs(tau - 1.0) <= hw)), **base)
                    table.add(quantity="power", value=float(np.mean(np.abs(tau) > hw)), **base)
                var_cr = float(stats["cr"][:, e, 0].var(ddof=1))
                var_rr = float(stats["rr"][:, e, 0].var(ddof=1))
                table.add(
                    quantity="precision_gain",
                    value=_ratio(var_rr, var_cr),
                    dgp=config.dgp, n=n, scenario=scen_id, series=plan.name, design="rr_over_cr",
                )

            pair_msd = {"cr": [], "rr": []}
            for (e1, p1), (e2, p2) in itertools.combinations(enumerate(plans), 2):
                label = f"{p1.name}|{p2.name}"
                msd = {}
                for design in ("cr", "rr"):
                    diff = stats[design][:, e1, 0] - stats[design][:, e2, 0]
                    msd[design] = float(np.mean(diff**2))
                    pair_msd[design].append(msd[design])
                    table.add(
                        quantity="msd", value=msd[design],
                        dgp=config.dgp, n=n, scenario=scen_id, series=label, design=design,
                    )
                table.add(
                    quantity="coherence_gain",
                    value=_ratio(msd["rr"], msd["cr"]),
                    dgp=config.dgp, n=n, scenario=scen_id, series=label, design="rr_over_cr",
                )
            if pair_msd["cr"]:
                overall = {d: float(np.mean(pair_msd[d])) for d in ("cr", "rr")}
                for design in ("cr", "rr"):
                    table.add(
                        quantity="msd", value=overall[design],
                        dgp=config.dgp, n=n, scenario=scen_id, series="overall", design=design,
                    )
                table.add(
                    quantity="coherence_gain",
                    value=_ratio(overall["rr"], overall["cr"]),
                    dgp=config.dgp, n=n, scenario=scen_id, series="overall", design="rr_over_cr",
                )
    return table


# ---------------------------------------------------------------------------
# Report emission: tidy CSV plus one SVG line chart per figure family.
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1b6ca8", "#d1495b", "#2e933c", "#f2a541", "#6d3b8e", "#3bb8c4",
               "#8a5a44", "#5c5c5c")


def _svg_chart(title: str, panels: dict, path: str):
    """panels: {panel_label: {series_label: [(x, y), ...]}}"""
    width, height = 320, 240
    pad = 42
    cols = min(len(panels), 2) or 1
    rows = math.ceil(len(panels) / cols) if panels else 1
    total_w = cols * width + 180
    total_h = rows * height + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="10" y="16" font-size="14">{title}</text>',
    ]
    series_names: list[str] = []
    for pdata in panels.values():
        for s in pdata:
            if s not in series_names:
                series_names.append(s)

    all_xy = [pt for pdata in panels.values() for pts in pdata.values() for pt in pts]
    if all_xy:
        xs = sorted({p[0] for p in all_xy})
        ys = [p[1] for p in all_xy]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys + [0.0]), max(ys + [1.0])
        if x_hi == x_lo:
            x_hi = x_lo + 1
        if y_hi == y_lo:
            y_hi = y_lo + 1
    else:
        x_lo, x_hi, y_lo, y_hi = 0, 1, 0, 1

    def sx(x, ox):
        return ox + pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y, oy):
        return oy + height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    for idx, (plabel, pdata) in enumerate(panels.items()):
        ox = (idx % cols) * width
        oy = 24 + (idx // cols) * height
        out.append(
            f'<rect x="{ox + pad}" y="{oy + pad}" width="{width - 2 * pad}" '
            f'height="{height - 2 * pad}" fill="none" stroke="#999"/>'
        )
        out.append(f'<text x="{ox + pad}" y="{oy + pad - 6}">{plabel}</text>')
        for lab, yv in ((f"{y_lo:.3g}", y_lo), (f"{y_hi:.3g}", y_hi)):
            out.append(f'<text x="{ox + 4}" y="{sy(yv, oy) + 4}">{lab}</text>')
        for xv in (x_lo, x_hi):
            out.append(
                f'<text x="{sx(xv, ox) - 8}" y="{oy + height - pad + 14}">{xv:g}</text>'
            )
        for s_idx, sname in enumerate(series_names):
            pts = pdata.get(sname)
            if not pts:
                continue
            color = _SVG_COLORS[s_idx % len(_SVG_COLORS)]
            coords = " ".join(f"{sx(x, ox):.2f},{sy(y, oy):.2f}" for x, y in sorted(pts))
            out.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
    lx = cols * width + 12
    for s_idx, sname in enumerate(series_names):
        color = _SVG_COLORS[s_idx % len(_SVG_COLORS)]
        ly = 40 + 16 * s_idx
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}">{sname}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


_FAMILY_QUANTITY = {
    "precision": ("precision_gain", ("rr_over_cr",)),
    "coherence": ("coherence_gain", ("rr_over_cr",)),
    "coverage": ("coverage", ("cr", "rr")),
    "power": ("power", ("cr", "rr")),
}


def emit_report(table: MetricsTable, out_dir: str, figures=None) -> list[str]:
    """Write metrics.csv and one SVG per requested figure family.

    Returns the list of written paths.  An empty table produces a
    header-only CSV and no figures.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_csv_text())
    paths.append(csv_path)
    if not table.rows:
        return paths
    for family in figures if figures is not None else FIGURE_FAMILIES:
        quantity, designs = _FAMILY_QUANTITY[family]
        panels: dict = {}
        for r in table.rows:
            if r["quantity"] != quantity or r["design"] not in designs:
                continue
            if r["value"] == "undefined":
                continue
            plabel = f"scenario {r['scenario']}"
            slabel = r["series"] if len(designs) == 1 else f"{r['series']} ({r['design']})"
            panels.setdefault(plabel, {}).setdefault(slabel, []).append(
                (float(r["n"]), float(r["value"]))
            )
        if not panels:
            continue
        svg_path = os.path.join(out_dir, f"{family}.svg")
        _svg_chart(f"{quantity} vs n ({table.rows[0]['dgp']})", panels, svg_path)
        paths.append(svg_path)
    return paths
