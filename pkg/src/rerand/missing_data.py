"""Missing-data handling: indicator augmentation and response reweighting.

Covariate gaps get the missingness-indicator treatment: impute a fixed zero
and add a binary is-missing column, after which every design and analysis
routine in the package applies unchanged.  Outcomes missing at random are
handled inside the doubly robust estimator by reweighting each observed
residual with the inverse of an estimated response probability.  When both
kinds of gaps occur, apply augmentation first and reweighting second.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimateReport, ObservedExperiment, _dr_core
from .finite_pop import ExperimentFrame
from .outcome_models import OutcomeModelSpec

__all__ = [
    "MaskedMatrix",
    "ResponseRecord",
    "augment_missing_indicators",
    "mask_missing_outcomes",
    "tau_dr_missing_outcomes",
]

IMPUTE_VALUE = 0.0  # fixed; the indicator column absorbs any constant choice


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    """Covariate values with an explicit observed mask (False = missing)."""

    values: np.ndarray
    observed: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        o = np.asarray(self.observed, dtype=bool)
        if v.ndim != 2 or v.shape != o.shape:
            raise ValueError("values and observed mask must be equal-shape matrices")
        if np.any(np.isnan(v) & o):
            raise ValueError("NaN cells must be marked missing in the mask")
        names = tuple(self.names) if self.names is not None else tuple(
            f"x{j}" for j in range(v.shape[1])
        )
        if len(names) != v.shape[1]:
            raise ValueError("one name per column required")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "observed", o)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_values(cls, values, names=None) -> "MaskedMatrix":
        """Build from a matrix whose missing cells are NaN."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, ~np.isnan(values), names)


@dataclass(frozen=True, eq=False)
class ResponseRecord:
    """Outcome-observed indicators plus the response-probability model."""

    r: np.ndarray
    response_model_spec: OutcomeModelSpec = field(
        default_factory=lambda: OutcomeModelSpec(kind="ols")
    )

    def __post_init__(self):
        r = np.asarray(self.r, dtype=bool)
        if r.ndim != 1:
            raise ValueError("response indicators must be a 1-D vector")
        object.__setattr__(self, "r", r)


def augment_missing_indicators(m: MaskedMatrix) -> ExperimentFrame:
    """Impute missing covariate cells with zero and add is-missing columns.

    Fully observed columns pass through untouched.  A column with every cell
    missing keeps only its indicator (the value column would be constant
    zero); a warning notes the drop.  The output frame designates all
    columns for both design and analysis; callers narrow as needed.
    """
    if m.values.shape[1] < 1:
        raise ValueError("need at least one column")
    cols: list[np.ndarray] = []
    names: list[str] = []
    for j in range(m.values.shape[1]):
        obs = m.observed[:, j]
        if obs.all():
            cols.append(m.values[:, j])
            names.append(m.names[j])
            continue
        if not obs.any():
            warnings.warn(
                f"column {m.names[j]!r} has no observed values; keeping only its "
                "missingness indicator"
            )
        else:
            cols.append(np.where(obs, m.values[:, j], IMPUTE_VALUE))
            names.append(m.names[j])
        cols.append((~obs).astype(np.float64))
        names.append(f"{m.names[j]}_missing")
    return ExperimentFrame(np.column_stack(cols), tuple(names))


def mask_missing_outcomes(y) -> tuple[np.ndarray, np.ndarray]:
    """Split an outcome vector with NaN gaps into (zero-filled values, observed mask).

    The fill value never reaches an estimate: outcome models train on
    observed units only and the residual weight is zero where the mask is
    False.  The zero-filled vector satisfies the finite-outcomes invariant
    of :class:`ObservedExperiment`.
    """
    y = np.asarray(y, dtype=np.float64)
    observed = ~np.isnan(y)
    return np.where(observed, y, 0.0), observed


def tau_dr_missing_outcomes(
    exp: ObservedExperiment,
    response: ResponseRecord,
    spec: OutcomeModelSpec,
    k: int = 2,
    rng=None,
    singular: str = "error",
) -> EstimateReport:
    """Doubly robust estimate when some outcomes are missing at random.

    The residual term of each unit is scaled by r / P(observed | covariates),
    with the response probability fit within the same cross-fitting folds and
    clipped below at 0.01 (clip activations are counted in the diagnostics).
    Outcome models fit on observed-outcome units only.  With every outcome
    observed and a response model that predicts 1, this reduces exactly to
    the standard doubly robust estimator.
    """
    r = np.asarray(response.r, dtype=bool)
    if r.shape[0] != exp.frame.n:
        raise ValueError("response indicators must align with the experiment")
    for arm in (1, 0):
        if np.sum(r & (exp.z.z == arm)) < 2:
            raise ValueError("need at least 2 observed outcomes per arm")
    report, _ = _dr_core(exp, spec, k, rng, response=response, singular=singular)
    report.diagnostics["missing_outcomes"] = int((~r).sum())
    return report
