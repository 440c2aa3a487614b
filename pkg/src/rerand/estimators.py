"""Average-treatment-effect estimators and their variance machinery.

Three estimators: difference in means, arm-wise linear adjustment, and a
cross-fitted doubly robust estimator with a pluggable outcome model.  Every
report carries the variance of the sqrt(n)-scaled estimator and the estimated
fraction of that variance explained by a linear projection on the
design-stage covariates, which together drive mixture-distribution intervals.
Variance estimators substitute the projection-based heterogeneity term for
the inestimable treatment-effect variance, which over-estimates the truth
and keeps inference conservative.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .balance import Assignment
from .chisq import normal_cdf
from .finite_pop import (
    ExperimentFrame,
    arm_moments,
    column_moments,
    projection_variance,
    spd_solve,
    tau_projection_variance,
)
from .outcome_models import FoldPlan, OutcomeModelSpec, fit, fit_ols, make_folds, stepwise_select
from .rng import ensure_rng

__all__ = [
    "ObservedExperiment",
    "EstimateReport",
    "EifTable",
    "tau_d",
    "tau_l",
    "tau_dr",
    "coherence_stat",
    "phack_min_pvalue",
]


@dataclass(frozen=True, eq=False)
class ObservedExperiment:
    """One realized experiment: covariates, assignment, observed outcomes."""

    frame: ExperimentFrame
    z: Assignment
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 1 or y.shape[0] != self.frame.n or self.z.n != self.frame.n:
            raise ValueError("covariates, assignment, and outcomes must align")
        if not np.all(np.isfinite(y)):
            raise ValueError("observed outcomes must be finite")
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


@dataclass(eq=False)
class EstimateReport:
    """Point estimate plus the inputs a mixture confidence interval needs.

    ``v_hat`` is the variance of the sqrt(n)-scaled estimator; divide by n
    for the estimator's own variance.  ``r2_hat`` is clamped to [0, 1]; the
    raw value is kept under ``diagnostics["r2_raw"]``.
    """

    method: str
    tau_hat: float
    v_hat: float
    r2_hat: float
    ci: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.r2_hat <= 1.0:
            raise ValueError("r2_hat must lie in [0, 1]")
        if self.ci is not None and not self.ci[0] <= self.tau_hat <= self.ci[1]:
            raise ValueError("interval must contain the point estimate")


@dataclass(eq=False)
class EifTable:
    """Per-unit influence values from the doubly robust fit."""

    eif1: np.ndarray
    eif0: np.ndarray
    eif: np.ndarray
    pi: float
    c_hat: np.ndarray
    mu1: np.ndarray | None = None
    mu0: np.ndarray | None = None
    fold_of_unit: np.ndarray | None = None


def _clamp_r2(num: float, den: float, diagnostics: dict) -> float:
    raw = num / den if den > 0 else 0.0
    diagnostics["r2_raw"] = raw
    return min(max(raw, 0.0), 1.0)


def _split(exp: ObservedExperiment):
    z = exp.z.z
    t = np.flatnonzero(z == 1)
    c = np.flatnonzero(z == 0)
    return t, c


def tau_d(exp: ObservedExperiment, singular: str = "error") -> EstimateReport:
    """Difference in mean outcomes between arms.

    Arms of a single unit still yield the point estimate; the variance and
    projection estimates need two units per arm and come back as NaN and 0
    (with a diagnostics flag) below that.
    """
    t, c = _split(exp)
    if t.size < 1 or c.size < 1:
        raise ValueError("both arms must be nonempty")
    frame, y = exp.frame, exp.y
    n, n1, n0 = frame.n, t.size, c.size
    tau_hat = float(y[t].mean() - y[c].mean())
    if min(n1, n0) < 2:
        return EstimateReport(
            "D", tau_hat, float("nan"), 0.0,
            diagnostics={"n1": n1, "n0": n0, "variance_unavailable": True},
        )

    s2_rr = column_moments(frame, frame.rr_cols).cov_xx
    m1 = arm_moments(frame.x_rr[t], y[t])
    m0 = arm_moments(frame.x_rr[c], y[c])
    s2_tau_rr = tau_projection_variance(m1, m0, s2_rr, singular)
    v_hat = (n / n1) * m1.var_y + (n / n0) * m0.var_y - s2_tau_rr

    proj1 = projection_variance(m1.cov_yx, s2_rr, singular)
    proj0 = projection_variance(m0.cov_yx, s2_rr, singular)
    diagnostics: dict = {"n1": n1, "n0": n0}
    num = (n1 / n) * proj1 + (n0 / n) * proj0 - s2_tau_rr
    den = (n1 / n) * m1.var_y + (n0 / n) * m0.var_y - s2_tau_rr
    r2_hat = _clamp_r2(num, den, diagnostics)
    return EstimateReport("D", tau_hat, float(v_hat), r2_hat, diagnostics=diagnostics)


def _linear_adjusted(exp: ObservedExperiment, adj_cols: tuple[int, ...], singular: str = "error"):
    """Core of the linearly adjusted estimator for a given adjustment set."""
    t, c = _split(exp)
    frame, y = exp.frame, exp.y
    n, n1, n0 = frame.n, t.size, c.size
    p = len(adj_cols)
    if min(n1, n0) < p + 2:
        raise ValueError("each arm needs at least p + 2 units for adjustment")
    x_adj = frame.covariates[:, adj_cols]

    fit1 = fit_ols(x_adj[t], y[t])
    fit0 = fit_ols(x_adj[c], y[c])
    mu1 = fit1.predict(x_adj)
    mu0 = fit0.predict(x_adj)
    tau_hat = float(np.mean(mu1 - mu0))

    # Residuals of the fitted arm models stand in for the adjusted potential
    # outcomes; within the fitting arm they are orthogonal to the regressors.
    resid = np.where(exp.z.z == 1, y - mu1, y - mu0)
    m1 = arm_moments(frame.x_rr[t], resid[t])
    m0 = arm_moments(frame.x_rr[c], resid[c])

    diagnostics: dict = {
        "n1": n1,
        "n0": n0,
        "adj_cols": tuple(adj_cols),
        "rank_deficient": fit1.rank_deficient or fit0.rank_deficient,
    }

    if p:
        s2_adj = column_moments(frame, adj_cols).cov_xx
        a1 = arm_moments(x_adj[t], resid[t])
        a0 = arm_moments(x_adj[c], resid[c])
        s2_tau_adj = tau_projection_variance(a1, a0, s2_adj, singular)
    else:
        s2_tau_adj = 0.0
    var1 = float(np.var(resid[t], ddof=1))
    var0 = float(np.var(resid[c], ddof=1))
    v_hat = (n / n1) * var1 + (n / n0) * var0 - s2_tau_adj

    s2_rr = column_moments(frame, frame.rr_cols).cov_xx
    s2_tau_rr = tau_projection_variance(m1, m0, s2_rr, singular)
    proj1 = projection_variance(m1.cov_yx, s2_rr, singular)
    proj0 = projection_variance(m0.cov_yx, s2_rr, singular)
    num = (n1 / n) * proj1 + (n0 / n) * proj0 - s2_tau_rr
    den = (n1 / n) * var1 + (n0 / n) * var0 - s2_tau_adj
    r2_hat = _clamp_r2(num, den, diagnostics)
    return tau_hat, float(v_hat), r2_hat, diagnostics


def tau_l(exp: ObservedExperiment, singular: str = "error") -> EstimateReport:
    """Arm-wise linear adjustment on the analysis-stage covariates.

    Numerically identical to the treatment coefficient of one regression on
    intercept, treatment, centered covariates, and their interaction.
    An empty adjustment set reduces this to the difference in means.
    """
    tau_hat, v_hat, r2_hat, diag = _linear_adjusted(exp, exp.frame.adj_cols, singular)
    return EstimateReport("L", tau_hat, v_hat, r2_hat, diagnostics=diag)


def _dr_core(
    exp: ObservedExperiment,
    spec: OutcomeModelSpec,
    k: int,
    rng,
    response=None,
    singular: str = "error",
):
    """Cross-fitted doubly robust estimate with influence-function variance.

    ``response`` (from the missing-outcome extension) supplies an
    observation indicator and a response-probability model; the residual
    term of each unit is reweighted by r / P(observed | x).
    """
    rng = ensure_rng(rng)
    frame, z = exp.frame, exp.z
    n, n1 = frame.n, z.n1
    pi = n1 / n
    y = exp.y.copy()

    cols = spec.columns if isinstance(spec.columns, tuple) else frame.adj_cols
    folds = make_folds(z, k, rng) if k > 1 else FoldPlan(np.zeros(n, dtype=np.int64), 1)
    diagnostics: dict = {"k": folds.k, "pi": pi}

    if isinstance(spec.columns, str) and spec.columns == "stepwise":
        sel_folds = folds if folds.k > 1 else make_folds(z, 2, rng)
        chosen = stepwise_select(frame.covariates[:, frame.adj_cols], y, sel_folds)
        cols = tuple(frame.adj_cols[i] for i in chosen)
        diagnostics["stepwise_cols"] = cols

    x = frame.covariates[:, cols]

    if response is None:
        r = np.ones(n, dtype=bool)
        weight = np.ones(n)
    else:
        r = np.asarray(response.r, dtype=bool)
        y = np.where(r, y, 0.0)
        weight = np.empty(n)

    mu1 = np.empty(n)
    mu0 = np.empty(n)
    clipped = 0
    for j in range(folds.k):
        test = folds.members(j)
        in_train = folds.fold_of_unit != j if folds.k > 1 else np.ones(n, dtype=bool)
        for arm, out in ((1, mu1), (0, mu0)):
            rows = np.flatnonzero(in_train & (z.z == arm) & r)
            model = fit(spec, x[rows], y[rows], rng)
            out[test] = model.predict(x[test])
            if response is not None:
                # Response probabilities are needed only for a unit's own arm.
                rrows = np.flatnonzero(in_train & (z.z == arm))
                rmodel = fit(
                    response.response_model_spec, x[rrows], r[rrows].astype(np.float64), rng
                )
                own = test[z.z[test] == arm]
                probs = rmodel.predict(x[own])
                # Capping at 1 is routine; only underflow below the floor is
                # worth surfacing.
                clipped += int(np.sum(probs < 0.01))
                weight[own] = r[own] / np.clip(probs, 0.01, 1.0)

    zf = z.z.astype(np.float64)
    eta1 = zf / pi * weight * (y - mu1) + mu1
    eta0 = (1.0 - zf) / (1.0 - pi) * weight * (y - mu0) + mu0
    tau_hat = float(np.mean(eta1 - eta0))

    eif1 = eta1 - eta1.mean()
    eif0 = eta0 - eta0.mean()
    eif = eif1 - eif0

    x_rr_c = frame.x_rr - frame.x_rr.mean(axis=0)
    score = (zf - pi) / (pi * (1.0 - pi))
    v_hat = 0.0
    c_hat = np.zeros(frame.d)
    for j in range(folds.k):
        members = folds.members(j)
        v_hat += float(np.mean(eif[members] ** 2))
        c_hat += (score[members] * eif[members]) @ x_rr_c[members] / members.size
    v_hat /= folds.k
    c_hat /= folds.k

    s2_rr = column_moments(frame, frame.rr_cols).cov_xx
    n_sigma = (n * n / (n1 * (n - n1))) * s2_rr
    num = float(c_hat @ spd_solve(n_sigma, c_hat, singular))
    if response is not None:
        diagnostics["clipped_response_probs"] = clipped
    r2_hat = _clamp_r2(num, v_hat, diagnostics)
    report = EstimateReport("DR", tau_hat, v_hat, r2_hat, diagnostics=diagnostics)
    table = EifTable(
        eif1=eif1, eif0=eif0, eif=eif, pi=pi, c_hat=c_hat,
        mu1=mu1, mu0=mu0, fold_of_unit=folds.fold_of_unit,
    )
    return report, table


def tau_dr(
    exp: ObservedExperiment,
    spec: OutcomeModelSpec,
    k: int = 2,
    rng=None,
    cross_fit: bool = True,
    singular: str = "error",
) -> tuple[EstimateReport, EifTable]:
    """Cross-fitted doubly robust estimator with a pluggable outcome model.

    Production runs always cross-fit; ``cross_fit=False`` (fit and evaluate
    on the full sample) exists for oracle tests only, since in-sample
    nuisance fits bias the estimate through overfitting.
    """
    if not cross_fit:
        k = 1
    elif k < 2:
        raise ValueError("cross-fitting needs k >= 2 (or pass cross_fit=False)")
    return _dr_core(exp, spec, k, rng, singular=singular)


def coherence_stat(reports_a, reports_b) -> float:
    """Mean squared difference between two replication-indexed estimate lists."""
    a = np.asarray([r.tau_hat if isinstance(r, EstimateReport) else r for r in reports_a])
    b = np.asarray([r.tau_hat if isinstance(r, EstimateReport) else r for r in reports_b])
    if a.shape != b.shape:
        raise ValueError("replication lists must have equal length")
    if a.size < 2:
        raise ValueError("need at least 2 replications")
    return float(np.mean((a - b) ** 2))


def _two_sided_p(tau_hat: float, v_hat: float, n: int) -> float:
    if v_hat <= 0:
        return 1.0
    t = abs(tau_hat) / np.sqrt(v_hat / n)
    return 2.0 * (1.0 - normal_cdf(t))


def phack_min_pvalue(exp: ObservedExperiment, max_columns: int = 12):
    """Smallest two-sided p-value over all adjustment subsets.

    Enumerates every subset of the analysis-stage covariates, computes the
    adjusted estimate and its normal-reference p-value under complete
    randomization, and returns the minimum with its achieving subset.  The
    normal reference is deliberate: the point of the statistic is that naive
    subset search over-rejects under complete randomization and not after
    rerandomization.
    """
    adj = exp.frame.adj_cols
    if len(adj) > max_columns:
        raise ValueError(
            f"{len(adj)} adjustment columns means 2^{len(adj)} subsets; "
            "pass an explicit smaller adjustment set"
        )
    n = exp.frame.n
    best_p, best_subset = np.inf, ()
    for size in range(len(adj) + 1):
        for subset in itertools.combinations(adj, size):
            # Pseudo-inverse mode: duplicated columns make some subsets rank
            # deficient, but the projection onto their span is well-defined.
            tau_hat, v_hat, _, _ = _linear_adjusted(exp, subset, singular="pseudo")
            p = _two_sided_p(tau_hat, v_hat, n)
            if p < best_p:
                best_p, best_subset = p, subset
    return float(best_p), best_subset
