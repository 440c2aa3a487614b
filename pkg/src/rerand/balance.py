"""Covariate-balance metrics, thresholds, and the acceptance predicate.

A randomization is acceptable when its balance metric falls strictly below
the threshold.  The shipped metrics are all quadratic forms of the
treated-minus-control covariate mean difference: the Mahalanobis form (the
default), the squared Euclidean distance, and a user-supplied PSD form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .chisq import chi2_quantile
from .finite_pop import ExperimentFrame, SingularCovariance, column_moments, spd_solve
from .rng import ensure_rng

__all__ = [
    "Assignment",
    "BalanceCriterion",
    "make_criterion",
    "mahalanobis_distance",
    "quadratic_form_distance",
    "threshold_from_chisq",
    "threshold_monte_carlo",
    "is_acceptable",
    "metric_value",
    "metric_values",
    "draw_assignment_batch",
]

METRICS = ("mahalanobis", "euclidean", "quadratic_form")


@dataclass(frozen=True, eq=False)
class Assignment:
    """Binary treatment vector with fixed arm sizes."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 1:
            raise ValueError("assignment must be a 1-D vector")
        if not np.all((z == 0) | (z == 1)):
            raise ValueError("assignment entries must be 0 or 1")
        z = z.astype(np.int8)
        if z.sum() < 1 or (1 - z).sum() < 1:
            raise ValueError("both arms must be nonempty")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def mirrored(self) -> "Assignment":
        return Assignment(1 - self.z)


@dataclass(frozen=True, eq=False)
class BalanceCriterion:
    """A resolved balance criterion: metric kind, form matrix, and threshold.

    ``base_form`` is the cached quadratic-form matrix; for the Mahalanobis
    metric it is the inverse covariate covariance, and the assignment-size
    factor n1*n0/n is applied at evaluation time so one criterion serves any
    arm split of the same dataset.
    """

    metric: str
    threshold: float
    target_pa: float
    base_form: np.ndarray
    threshold_source: str
    mc_draws: int = 0
    mc_seed: int | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not 0.0 < self.target_pa < 1.0:
            raise ValueError("target acceptance probability must lie in (0, 1)")
        form = np.ascontiguousarray(self.base_form, dtype=np.float64)
        form.setflags(write=False)
        object.__setattr__(self, "base_form", form)

    @property
    def d(self) -> int:
        return self.base_form.shape[0]


def _check_form_matrix(a: np.ndarray, d: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (d, d):
        raise ValueError(f"form matrix must be {d}x{d}, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValueError("form matrix must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (a + a.T))
    if w.min() < -1e-9 * max(1.0, w.max()):
        raise ValueError("form matrix must be positive semidefinite")
    return 0.5 * (a + a.T)


def _centered_rr(frame: ExperimentFrame) -> np.ndarray:
    x = frame.x_rr
    return np.ascontiguousarray(x - x.mean(axis=0))


def _scale(metric: str, n: int, n1: int, n0: int) -> float:
    # Mahalanobis form caches inv(S2); Sigma = (n / (n1 n0)) S2 brings in this factor.
    return n1 * n0 / n if metric == "mahalanobis" else 1.0


def _base_form(frame: ExperimentFrame, metric: str, a_matrix, singular: str) -> np.ndarray:
    d = frame.d
    if metric == "mahalanobis":
        s2 = column_moments(frame, frame.rr_cols).cov_xx
        return spd_solve(s2, np.eye(d), singular)
    if metric == "euclidean":
        return np.eye(d)
    if a_matrix is None:
        raise ValueError("quadratic_form metric requires a form matrix")
    return _check_form_matrix(a_matrix, d)


def metric_value(criterion: BalanceCriterion, frame: ExperimentFrame, z: Assignment) -> float:
    """Balance metric of one assignment under a resolved criterion."""
    xc = _centered_rr(frame)
    scale = _scale(criterion.metric, z.n, z.n1, z.n0)
    return float(_kernels.quad_form_one(z.z, xc, z.n1, z.n0, criterion.base_form, scale))


def metric_values(criterion: BalanceCriterion, frame: ExperimentFrame, zmat: np.ndarray) -> np.ndarray:
    """Balance metrics for a batch of assignments (one per row of ``zmat``)."""
    zmat = np.ascontiguousarray(zmat, dtype=np.int8)
    n1 = int(zmat[0].sum())
    scale = _scale(criterion.metric, zmat.shape[1], n1, zmat.shape[1] - n1)
    return _kernels.quad_form_batch(
        zmat, _centered_rr(frame), n1, zmat.shape[1] - n1, criterion.base_form, scale
    )


def mahalanobis_distance(frame: ExperimentFrame, z: Assignment, singular: str = "error") -> float:
    """Mahalanobis distance between arm means of the design-stage covariates.

    The scaling covariance is (n / (n1 n0)) times the sample covariance of
    the covariates, i.e. the randomization covariance of the mean difference
    under complete randomization.
    """
    if z.n != frame.n:
        raise ValueError("assignment length must match the frame")
    form = _base_form(frame, "mahalanobis", None, singular)
    xc = _centered_rr(frame)
    return float(_kernels.quad_form_one(z.z, xc, z.n1, z.n0, form, _scale("mahalanobis", z.n, z.n1, z.n0)))


def quadratic_form_distance(frame: ExperimentFrame, z: Assignment, a_matrix: np.ndarray) -> float:
    """General quadratic form (mean diff)' A (mean diff) of the rr columns."""
    if z.n != frame.n:
        raise ValueError("assignment length must match the frame")
    form = _check_form_matrix(a_matrix, frame.d)
    xc = _centered_rr(frame)
    return float(_kernels.quad_form_one(z.z, xc, z.n1, z.n0, form, 1.0))


def threshold_from_chisq(d: int, pa: float) -> float:
    """Threshold a with P(chi-square_d <= a) = pa.

    Valid for the Mahalanobis metric, whose null distribution is
    asymptotically chi-square with d degrees of freedom.
    """
    if d < 1:
        raise ValueError("d must be a positive integer")
    return chi2_quantile(pa, d)


def draw_assignment_batch(n: int, n1: int, b: int, rng) -> np.ndarray:
    """b complete randomizations as an int8 matrix (one row each)."""
    rng = ensure_rng(rng)
    template = np.zeros(n, dtype=np.int8)
    template[:n1] = 1
    zmat = np.tile(template, (b, 1))
    return rng.permuted(zmat, axis=1)


def threshold_monte_carlo(
    frame: ExperimentFrame,
    metric: str,
    pa: float,
    b: int,
    rng,
    n1: int | None = None,
    a_matrix=None,
    singular: str = "error",
) -> float:
    """Empirical pa-quantile of the metric over b complete randomizations.

    Returns the ceil(pa*b)-th order statistic; deterministic given the seed.
    """
    if b < 1000:
        raise ValueError("need at least 1000 Monte Carlo draws for a stable threshold")
    if not 0.0 < pa < 1.0:
        raise ValueError("target acceptance probability must lie in (0, 1)")
    n = frame.n
    n1 = n // 2 if n1 is None else int(n1)
    if not 1 <= n1 <= n - 1:
        raise ValueError("n1 out of range")
    form = _base_form(frame, metric, a_matrix, singular)
    xc = _centered_rr(frame)
    scale = _scale(metric, n, n1, n - n1)
    rng = ensure_rng(rng)
    vals = np.empty(b)
    chunk = 1 << 14
    done = 0
    while done < b:
        m = min(chunk, b - done)
        zmat = draw_assignment_batch(n, n1, m, rng)
        vals[done : done + m] = _kernels.quad_form_batch(zmat, xc, n1, n - n1, form, scale)
        done += m
    k = int(np.ceil(pa * b))
    return float(np.partition(vals, k - 1)[k - 1])


def make_criterion(
    frame: ExperimentFrame,
    metric: str = "mahalanobis",
    pa: float = 0.01,
    threshold_source: str = "chisq",
    a_matrix=None,
    mc_draws: int = 100_000,
    mc_seed=None,
    n1: int | None = None,
    singular: str = "error",
) -> BalanceCriterion:
    """Resolve a criterion: cache the form matrix and fix the threshold.

    ``threshold_source="chisq"`` uses the chi-square quantile (Mahalanobis
    only); ``"monte_carlo"`` estimates the pa-quantile of the metric over
    ``mc_draws`` complete randomizations seeded by ``mc_seed``.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    form = _base_form(frame, metric, a_matrix, singular)
    if threshold_source == "chisq":
        if metric != "mahalanobis":
            raise ValueError(
                "the chi-square threshold applies to the Mahalanobis metric; "
                "use threshold_source='monte_carlo' for other metrics"
            )
        a = threshold_from_chisq(frame.d, pa)
        return BalanceCriterion(metric, a, pa, form, "chisq")
    if threshold_source == "monte_carlo":
        if mc_seed is None:
            raise ValueError("monte_carlo threshold needs a seed")
        a = threshold_monte_carlo(
            frame, metric, pa, mc_draws, mc_seed, n1=n1, a_matrix=a_matrix, singular=singular
        )
        if a <= 0:
            raise SingularCovariance("Monte Carlo threshold collapsed to zero")
        seed_note = int(mc_seed) if isinstance(mc_seed, (int, np.integer)) else None
        return BalanceCriterion(metric, a, pa, form, "monte_carlo", mc_draws, seed_note)
    raise ValueError("threshold_source must be 'chisq' or 'monte_carlo'")


def is_acceptable(criterion: BalanceCriterion, frame: ExperimentFrame, z: Assignment) -> bool:
    """True iff the metric is strictly below the threshold.

    The acceptance region is defined with strict inequality, so an
    assignment landing exactly on the threshold is rejected.
    """
    return metric_value(criterion, frame, z) < criterion.threshold
