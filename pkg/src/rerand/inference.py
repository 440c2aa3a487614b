"""Mixture-distribution inference and the randomization test.

After rerandomization the scaled estimator converges to
sqrt(1 - R2) * normal + sqrt(R2) * L, where L is the first coordinate of a
standard Gaussian vector conditioned on its squared norm falling below the
threshold.  L is sampled through the identity L = chi * sign * sqrt(beta)
with chi a truncated chi draw, and quantiles of the mixture come from Monte
Carlo draws, matching how practitioners compute these intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assignment import rejection_rerandomize
from .balance import BalanceCriterion
from .chisq import chi2_cdf, normal_quantile
from .estimators import EstimateReport, ObservedExperiment, tau_d, tau_dr, tau_l
from .outcome_models import OutcomeModelSpec
from .rng import ensure_rng, substream

__all__ = [
    "MixtureSpec",
    "TestResult",
    "v_da",
    "sample_l_da",
    "mixture_quantile",
    "MixtureQuantileGrid",
    "confidence_interval",
    "normal_interval",
    "randomization_test",
]


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of the normal/truncated-normal mixture."""

    d: int
    a: float
    r2: float
    draws: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not self.a > 0:
            raise ValueError("threshold must be positive")
        if not 0.0 <= self.r2 <= 1.0:
            raise ValueError("r2 must lie in [0, 1]")
        if self.draws < 1:
            raise ValueError("draw count must be positive")


@dataclass(frozen=True)
class TestResult:
    """Randomization-test outcome; p = (1 + #{|T_j| >= |T_obs|}) / (B + 1)."""

    p_value: float
    observed_stat: float
    null_draws: int
    seed: int


def v_da(d: int, a: float) -> float:
    """Variance of the truncated component: P(chi2_{d+2} <= a) / P(chi2_d <= a).

    Always at most 1; approaches 1 as the threshold loosens, which is why
    balancing many covariates loosely buys little precision.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if not a > 0:
        raise ValueError("threshold must be positive")
    den = chi2_cdf(a, d)
    if den <= 0.0:
        raise ValueError("threshold so small that the acceptance region has no mass")
    return min(chi2_cdf(a, d + 2) / den, 1.0)


_GUARD_RATE = 1e-6


def _truncation_rates(d: int, a: float) -> tuple[float, float]:
    """Acceptance rates of the two exact samplers for chi2_d given chi2_d <= a."""
    naive = chi2_cdf(a, d)
    nu = d / 2.0
    # Proposal density proportional to x^(nu-1) on [0, a], acceptance e^(-x/2):
    # overall rate = nu * (2/a)^nu * gamma(nu) * P(nu, a/2).
    p_half = chi2_cdf(a, d)  # P(nu, a/2) with nu = d/2 is exactly the chi2 CDF
    log_rate = math.log(nu) + nu * math.log(2.0 / a) + math.lgamma(nu) + math.log(p_half)
    power = math.exp(min(log_rate, 0.0))
    return naive, power


def _truncated_chisq(d: int, a: float, size: int, rng) -> np.ndarray:
    """Exact draws of chi2_d conditioned on chi2_d <= a.

    Chooses between plain rejection (draw chi2, keep values <= a) and
    rejection from the power-density proposal a*u^(2/d) with acceptance
    e^(-x/2); the latter keeps tight thresholds cheap.  Both produce the
    same law, only the work per draw differs.
    """
    naive, power = _truncation_rates(d, a)
    rate = max(naive, power)
    if rate < _GUARD_RATE:
        raise ValueError(
            f"expected attempts per draw exceed {1 / _GUARD_RATE:.0e}; "
            "increase the threshold"
        )
    out = np.empty(size)
    have = 0
    nu = d / 2.0
    while have < size:
        need = size - have
        n_prop = min(int(need / rate * 1.2) + 64, 40_000_000)
        if naive >= power:
            draws = rng.chisquare(d, n_prop)
            kept = draws[draws <= a]
        else:
            x = a * rng.random(n_prop) ** (1.0 / nu)
            u = rng.random(n_prop)
            kept = x[u <= np.exp(-x / 2.0)]
        take = min(kept.shape[0], need)
        out[have : have + take] = kept[:take]
        have += take
    return out


def sample_l_da(d: int, a: float, b: int, rng) -> np.ndarray:
    """Draws of the truncated component L.

    Truncated chi draws (square root of chi-square conditioned below the
    threshold) times an independent random sign and the square root of a
    Beta(1/2, (d-1)/2) variable; for d = 1 the Beta factor degenerates to a
    point mass at 1.
    """
    if b < 1:
        raise ValueError("draw count must be positive")
    rng = ensure_rng(rng)
    chi = np.sqrt(_truncated_chisq(d, a, b, rng))
    sign = np.where(rng.random(b) < 0.5, -1.0, 1.0)
    if d == 1:
        beta = 1.0
    else:
        beta = rng.beta(0.5, (d - 1) / 2.0, b)
    return chi * sign * np.sqrt(beta)


def _mixture_draws(spec: MixtureSpec) -> np.ndarray:
    rng = ensure_rng(np.random.SeedSequence([spec.seed, 0x6D69_78]))
    eps = rng.standard_normal(spec.draws)
    l_draws = sample_l_da(spec.d, spec.a, spec.draws, rng)
    return math.sqrt(1.0 - spec.r2) * eps + math.sqrt(spec.r2) * l_draws


def mixture_quantile(spec: MixtureSpec, q: float) -> float:
    """Monte Carlo q-quantile of the mixture; deterministic given the seed."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    return float(np.quantile(_mixture_draws(spec), q))


class MixtureQuantileGrid:
    """Quantiles of the mixture as a function of r2, precomputed on a grid.

    Simulation sweeps need the same (d, a, q) quantile at a different
    estimated r2 every replication; interpolating a shared-draw grid is a
    few hundred times cheaper than fresh Monte Carlo per replication and
    keeps the interval widths deterministic.
    """

    def __init__(self, d: int, a: float, q: float, draws: int = 400_000, seed: int = 0,
                 grid_points: int = 101):
        rng = ensure_rng(np.random.SeedSequence([seed, 0x6772_6964]))
        eps = rng.standard_normal(draws)
        l_draws = sample_l_da(d, a, draws, rng)
        self.r2_grid = np.linspace(0.0, 1.0, grid_points)
        self.values = np.array(
            [
                np.quantile(np.sqrt(1.0 - r2) * eps + np.sqrt(r2) * l_draws, q)
                for r2 in self.r2_grid
            ]
        )

    def __call__(self, r2: float) -> float:
        return float(np.interp(r2, self.r2_grid, self.values))


def confidence_interval(
    report: EstimateReport,
    d: int,
    a: float,
    n: int,
    alpha: float = 0.05,
    draws: int = 1_000_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Two-sided mixture interval: estimate +/- quantile * sqrt(v_hat / n).

    ``v_hat`` follows the sqrt(n)-scaled convention, so the half-width is
    the (1 - alpha/2) mixture quantile times sqrt(v_hat / n).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    spec = MixtureSpec(d=d, a=a, r2=report.r2_hat, draws=draws, seed=seed)
    nu = mixture_quantile(spec, 1.0 - alpha / 2.0)
    hw = nu * math.sqrt(report.v_hat / n)
    return (report.tau_hat - hw, report.tau_hat + hw)


def normal_interval(report: EstimateReport, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Normal-reference interval, appropriate under complete randomization."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    hw = normal_quantile(1.0 - alpha / 2.0) * math.sqrt(report.v_hat / n)
    return (report.tau_hat - hw, report.tau_hat + hw)


def _statistic_fn(statistic, k: int, seed):
    if statistic == "D":
        return lambda exp, j: tau_d(exp).tau_hat
    if statistic == "L":
        return lambda exp, j: tau_l(exp).tau_hat
    if isinstance(statistic, OutcomeModelSpec):
        def dr_stat(exp, j):
            report, _ = tau_dr(exp, statistic, k=k, rng=substream(seed, "test-stat", j))
            return report.tau_hat
        return dr_stat
    raise ValueError("statistic must be 'D', 'L', or an OutcomeModelSpec")


def randomization_test(
    exp: ObservedExperiment,
    criterion: BalanceCriterion,
    statistic="D",
    b: int = 999,
    seed: int = 0,
    k: int = 2,
    max_attempts: int | None = None,
) -> TestResult:
    """Randomization test of the sharp null of no effect for any unit.

    Under the sharp null the observed outcomes double as both potential
    outcomes, so the statistic is recomputed over fresh acceptable
    randomizations drawn by rejection sampling.  Null draws tied with the
    observed statistic count as at least as extreme, pushing p upward; a
    statistic that ignores the assignment therefore yields p = 1, and the
    test stays valid.
    """
    if b + 1 < 100:
        raise ValueError("need at least 100 datasets (observed plus null draws)")
    stat = _statistic_fn(statistic, k, seed)
    t_obs = stat(exp, "obs")
    exceed = 0
    n1 = exp.z.n1
    for j in range(b):
        draw = rejection_rerandomize(
            criterion, exp.frame, n1, substream(seed, "null-draw", j), max_attempts
        )
        null_exp = ObservedExperiment(exp.frame, draw.accepted, exp.y)
        if abs(stat(null_exp, j)) >= abs(t_obs):
            exceed += 1
    return TestResult(
        p_value=(1 + exceed) / (b + 1),
        observed_stat=float(t_obs),
        null_draws=b,
        seed=int(seed),
    )
