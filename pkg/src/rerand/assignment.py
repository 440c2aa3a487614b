"""Treatment assignment generators.

Complete randomization, rejection-sampling rerandomization (uniform on the
acceptance set), mirror-allocation batches, and a greedy pair-switching
search.  Pair switching finds an acceptable assignment quickly but does not
sample the acceptance set uniformly, so randomization tests here always use
rejection sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .balance import Assignment, BalanceCriterion, _centered_rr, _scale
from .finite_pop import ExperimentFrame
from .rng import ensure_rng, substream

__all__ = [
    "AcceptanceTimeout",
    "DrawLog",
    "complete_randomization",
    "rejection_rerandomize",
    "sample_acceptable_batch",
    "pair_switch_rerandomize",
]


class AcceptanceTimeout(RuntimeError):
    """No acceptable assignment found within the attempt budget."""

    def __init__(self, attempts: int, best_metric: float, threshold: float):
        self.attempts = attempts
        self.best_metric = best_metric
        self.threshold = threshold
        super().__init__(
            f"no acceptable assignment in {attempts} attempts "
            f"(best metric {best_metric:.6g} vs threshold {threshold:.6g})"
        )


@dataclass(frozen=True)
class DrawLog:
    """An accepted assignment plus how much work it took."""

    accepted: Assignment
    attempts: int
    final_metric: float


def complete_randomization(n: int, n1: int, rng) -> Assignment:
    """Uniform draw over all assignments with exactly n1 treated units."""
    if not 1 <= n1 <= n - 1:
        raise ValueError("n1 must lie in [1, n-1]")
    rng = ensure_rng(rng)
    z = np.zeros(n, dtype=np.int8)
    z[rng.permutation(n)[:n1]] = 1
    return Assignment(z)


def default_max_attempts(pa: float) -> int:
    # Failure after 1000/pa tries signals a misconfigured threshold, not bad luck.
    return int(math.ceil(1000.0 / pa))


def rejection_rerandomize(
    criterion: BalanceCriterion,
    frame: ExperimentFrame,
    n1: int,
    rng,
    max_attempts: int | None = None,
) -> DrawLog:
    """Redraw complete randomizations until one meets the criterion.

    The accepted assignment is uniform on the acceptance set; expected
    attempts are 1/pa.  Raises :class:`AcceptanceTimeout` (carrying the best
    metric seen) if the budget runs out.
    """
    rng = ensure_rng(rng)
    if max_attempts is None:
        max_attempts = default_max_attempts(criterion.target_pa)
    if max_attempts < 1:
        raise ValueError("max_attempts must be positive")
    n = frame.n
    if not 1 <= n1 <= n - 1:
        raise ValueError("n1 must lie in [1, n-1]")
    xc = _centered_rr(frame)
    n0 = n - n1
    scale = _scale(criterion.metric, n, n1, n0)
    form = criterion.base_form
    a = criterion.threshold
    best = np.inf
    z = np.zeros(n, dtype=np.int8)
    for attempt in range(1, max_attempts + 1):
        z[:] = 0
        z[rng.permutation(n)[:n1]] = 1
        m = _kernels.quad_form_one(z, xc, n1, n0, form, scale)
        if m < best:
            best = m
        if m < a:
            return DrawLog(Assignment(z.copy()), attempt, float(m))
    raise AcceptanceTimeout(max_attempts, float(best), a)


def sample_acceptable_batch(
    criterion: BalanceCriterion,
    frame: ExperimentFrame,
    n1: int,
    b: int,
    seed,
    use_mirrors: bool = False,
    max_attempts: int | None = None,
    return_stats: bool = False,
):
    """b acceptable assignments, one independent stream per draw index.

    With ``use_mirrors`` every accepted draw also contributes its bit
    complement (acceptable by metric symmetry), halving the number of metric
    evaluations; this requires equal arms so the mirror keeps the arm sizes.
    """
    if b < 1:
        raise ValueError("batch size must be positive")
    if use_mirrors and 2 * n1 != frame.n:
        raise ValueError("mirror allocations need equal arm sizes")
    draws: list[Assignment] = []
    evals = 0
    n_runs = (b + 1) // 2 if use_mirrors else b
    for i in range(n_runs):
        log = rejection_rerandomize(
            criterion, frame, n1, substream(seed, "batch-draw", i), max_attempts
        )
        evals += log.attempts
        draws.append(log.accepted)
        if use_mirrors:
            draws.append(log.accepted.mirrored())
    draws = draws[:b]
    if return_stats:
        return draws, {"metric_evaluations": evals, "rejection_runs": n_runs}
    return draws


def pair_switch_rerandomize(
    criterion: BalanceCriterion,
    frame: ExperimentFrame,
    z0: Assignment,
    rng,
    max_switches: int = 100_000,
) -> DrawLog:
    """Greedy pair switching: swap random treated/control pairs downhill.

    Starting from ``z0``, repeatedly pick one treated and one control unit
    uniformly at random and swap their arms whenever the swap does not
    increase the metric, stopping as soon as the metric falls below the
    threshold.  Arm sizes are preserved throughout.  The output lands in the
    acceptance set but is not a uniform draw from it.
    """
    rng = ensure_rng(rng)
    if z0.n != frame.n:
        raise ValueError("assignment length must match the frame")
    xc = _centered_rr(frame)
    n = xc.shape[0]
    n1, n0 = z0.n1, z0.n0
    scale = _scale(criterion.metric, n, n1, n0)
    form = criterion.base_form
    a = criterion.threshold

    z = z0.z.astype(np.int8).copy()
    treated = np.flatnonzero(z == 1)
    control = np.flatnonzero(z == 0)
    diff = xc[treated].sum(axis=0) / n1 - xc[control].sum(axis=0) / n0
    m = float(scale * diff @ form @ diff)
    attempts = 1
    best = m
    step = 1.0 / n1 + 1.0 / n0
    while m >= a:
        if attempts >= max_switches:
            raise AcceptanceTimeout(attempts, best, a)
        ti = rng.integers(n1)
        ci = rng.integers(n0)
        i, j = treated[ti], control[ci]
        cand_diff = diff + (xc[j] - xc[i]) * step
        cand_m = float(scale * cand_diff @ form @ cand_diff)
        attempts += 1
        if cand_m <= m:
            diff = cand_diff
            m = cand_m
            z[i], z[j] = 0, 1
            treated[ti], control[ci] = j, i
            if m < best:
                best = m
    return DrawLog(Assignment(z), attempts, m)
