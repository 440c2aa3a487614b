"""Finite-population moments and linear-projection variances.

Shared by every estimator: column means, covariance matrices with the n-1
divisor (per-arm quantities use the arm size minus one), and the
quadratic-form projection variances that appear in the variance and R-squared
estimators.  All functions are pure and safe to call from parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SingularCovariance",
    "ExperimentFrame",
    "PotentialOutcomes",
    "SampleMoments",
    "column_moments",
    "arm_moments",
    "projection_variance",
    "tau_projection_variance",
    "spd_solve",
]


class SingularCovariance(np.linalg.LinAlgError):
    """Covariate covariance matrix is singular (or numerically so)."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_cols(cols, k: int, what: str) -> tuple[int, ...]:
    cols = tuple(int(c) for c in cols)
    if any(c < 0 or c >= k for c in cols):
        raise ValueError(f"{what} indices must lie in [0, {k})")
    if len(set(cols)) != len(cols):
        raise ValueError(f"duplicate {what} indices")
    return cols


@dataclass(frozen=True, eq=False)
class ExperimentFrame:
    """Covariate matrix plus the column subsets used for design and analysis.

    ``rr_cols`` are balanced in the design stage, ``adj_cols`` are adjusted
    for in the analysis stage.  The adjustment subset may be empty; the
    design subset may not.
    """

    covariates: np.ndarray
    names: tuple[str, ...] | None = None
    rr_cols: tuple[int, ...] | None = None
    adj_cols: tuple[int, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("covariates must be a 2-D matrix")
        n, k = x.shape
        if n < 2:
            raise ValueError("need at least 2 units")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        names = tuple(self.names) if self.names is not None else tuple(f"x{j}" for j in range(k))
        if len(names) != k:
            raise ValueError("one name per column required")
        rr = _check_cols(self.rr_cols if self.rr_cols is not None else range(k), k, "rr_cols")
        adj = _check_cols(self.adj_cols if self.adj_cols is not None else range(k), k, "adj_cols")
        if not rr:
            raise ValueError("rr_cols must be nonempty")
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "rr_cols", rr)
        object.__setattr__(self, "adj_cols", adj)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def k(self) -> int:
        return self.covariates.shape[1]

    @property
    def d(self) -> int:
        return len(self.rr_cols)

    @property
    def p(self) -> int:
        return len(self.adj_cols)

    @property
    def x_rr(self) -> np.ndarray:
        return self.covariates[:, self.rr_cols]

    @property
    def x_adj(self) -> np.ndarray:
        return self.covariates[:, self.adj_cols]

    def with_cols(self, rr_cols=None, adj_cols=None) -> "ExperimentFrame":
        """Same covariates, different design/analysis designations."""
        return ExperimentFrame(
            self.covariates,
            self.names,
            tuple(rr_cols) if rr_cols is not None else self.rr_cols,
            tuple(adj_cols) if adj_cols is not None else self.adj_cols,
        )


@dataclass(frozen=True, eq=False)
class PotentialOutcomes:
    """Both potential outcome vectors; available in simulations only."""

    y1: np.ndarray
    y0: np.ndarray

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=np.float64)
        y0 = np.asarray(self.y0, dtype=np.float64)
        if y1.shape != y0.shape or y1.ndim != 1:
            raise ValueError("y1 and y0 must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y0))):
            raise ValueError("potential outcomes must be finite")
        object.__setattr__(self, "y1", _readonly(y1))
        object.__setattr__(self, "y0", _readonly(y0))

    @property
    def tau_i(self) -> np.ndarray:
        return self.y1 - self.y0

    @property
    def tau(self) -> float:
        return float(np.mean(self.y1 - self.y0))

    def observed(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        return np.where(z == 1, self.y1, self.y0)


@dataclass(eq=False)
class SampleMoments:
    """Mean vector and covariance matrix of a column block.

    When built from an arm's data via :func:`arm_moments`, ``cov_yx`` holds
    the outcome-covariate covariance row and ``var_y`` the outcome variance.
    """

    mean_x: np.ndarray
    cov_xx: np.ndarray
    cov_yx: np.ndarray | None = None
    var_y: float | None = None
    n_obs: int = field(default=0)


def _two_pass_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def column_moments(frame: ExperimentFrame, cols) -> SampleMoments:
    """Mean and covariance (divisor n-1) of the selected covariate columns."""
    cols = _check_cols(cols, frame.k, "column")
    if not cols:
        raise ValueError("column subset must be nonempty")
    if frame.n < 2:
        raise ValueError("need at least 2 rows for a covariance")
    x = frame.covariates[:, cols]
    mean, cov = _two_pass_cov(x)
    return SampleMoments(mean_x=mean, cov_xx=cov, n_obs=frame.n)


def arm_moments(x: np.ndarray, y: np.ndarray) -> SampleMoments:
    """Within-arm moments of (y, x): means, x covariance, y-x covariance row."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 units in the arm")
    mean, cov = _two_pass_cov(x)
    yc = y - y.mean()
    xc = x - mean
    cov_yx = yc @ xc / (n - 1)
    var_y = float(yc @ yc / (n - 1))
    return SampleMoments(mean_x=mean, cov_xx=cov, cov_yx=cov_yx, var_y=var_y, n_obs=n)


def spd_solve(cov: np.ndarray, rhs: np.ndarray, singular: str = "error") -> np.ndarray:
    """Solve cov @ b = rhs for a symmetric PSD covariance.

    ``singular="error"`` fails loudly on rank deficiency (a Cholesky probe,
    so near-singular matrices fail too rather than returning garbage);
    ``singular="pseudo"`` opts into a pseudo-inverse with cutoff
    1e-10 times the largest singular value.
    """
    if singular not in ("error", "pseudo"):
        raise ValueError("singular mode must be 'error' or 'pseudo'")
    cov = np.asarray(cov, dtype=np.float64)
    if singular == "pseudo":
        return np.linalg.pinv(cov, rcond=1e-10, hermitian=True) @ rhs
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance(
            "covariate covariance is singular; drop collinear columns "
            "or pass singular='pseudo'"
        ) from err
    # A tiny Cholesky pivot means numerical rank deficiency even when the
    # factorization formally succeeds; squared pivots track singular values,
    # so this matches the 1e-10 pseudo-inverse cutoff.
    diag = np.diag(c)
    if diag.min() ** 2 <= 1e-10 * diag.max() ** 2:
        raise SingularCovariance(
            "covariate covariance is numerically singular; drop collinear "
            "columns or pass singular='pseudo'"
        )
    b = np.linalg.solve(c, np.atleast_1d(rhs).T if rhs.ndim == 1 else rhs)
    b = np.linalg.solve(c.T, b)
    return b.ravel() if rhs.ndim == 1 else b


def projection_variance(cov_yx: np.ndarray, cov_xx: np.ndarray, singular: str = "error") -> float:
    """Variance of the linear projection: cov_yx (cov_xx)^-1 cov_yx'."""
    cov_yx = np.asarray(cov_yx, dtype=np.float64).ravel()
    out = float(cov_yx @ spd_solve(cov_xx, cov_yx, singular))
    return max(out, 0.0)


def tau_projection_variance(
    m1: SampleMoments, m0: SampleMoments, cov_xx: np.ndarray, singular: str = "error"
) -> float:
    """Projection variance of the arm covariance-row difference.

    This is the estimable stand-in for the treatment-effect heterogeneity
    variance; it equals :func:`projection_variance` applied to the difference
    of the per-arm outcome-covariate covariance rows.
    """
    if m1.cov_yx is None or m0.cov_yx is None:
        raise ValueError("arm moments must carry outcome covariance rows")
    if m1.cov_yx.shape != m0.cov_yx.shape:
        raise ValueError("arm covariance rows must share the same columns")
    return projection_variance(m1.cov_yx - m0.cov_yx, cov_xx, singular)
