"""Acceptance gate: every shipped claim checked at its stated tolerance.

Each criterion prints one PASS/FAIL line (run with ``pytest -s`` to see them
all).  The heavy sweeps share module-scoped runs; altogether the module is
sized for a desk machine, well inside the per-criterion runtime budgets.
"""

import itertools
import math

import numpy as np
import pytest

from rerand.assignment import rejection_rerandomize
from rerand.balance import (
    draw_assignment_batch,
    make_criterion,
    metric_values,
    threshold_from_chisq,
)
from rerand.estimators import ObservedExperiment, tau_l
from rerand.finite_pop import ExperimentFrame, column_moments, projection_variance
from rerand.inference import randomization_test, sample_l_da, v_da
from rerand.missing_data import MaskedMatrix, augment_missing_indicators
from rerand.rng import substream
from rerand.simulate import (
    DgpSetting,
    SimulationConfig,
    generate_dgp,
    run_scenario,
)
from tests.conftest import equicorrelated

SEED = 2026
COVERAGE_BAND = 3 * math.sqrt(0.95 * 0.05 / 1000)


def report(criterion: str, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Shared sweeps
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def main_run():
    """Linear setting, n = 1000, scenarios 1 and 2, 1000 replications."""
    cfg = SimulationConfig(
        dgp="linear", n_grid=(1000,), scenarios=(1, 2), replications=1000, seed=SEED
    )
    return run_scenario(cfg, workers=2)


@pytest.fixture(scope="module")
def small_n_run():
    cfg = SimulationConfig(
        dgp="linear", n_grid=(100,), scenarios=(1,), replications=1000, seed=SEED
    )
    return run_scenario(cfg, workers=2)


# ---------------------------------------------------------------------------
# 1. Mixture calibration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("d", (1, 6, 10))
@pytest.mark.parametrize("pa", (0.01, 0.001))
def test_criterion_1_mixture_calibration(d, pa):
    a = threshold_from_chisq(d, pa)
    draws = sample_l_da(d, a, 10_000_000, substream(SEED, "crit1", d, int(pa * 1000)))
    rel = abs(draws.var(ddof=1) / v_da(d, a) - 1.0)
    report(
        "criterion 1",
        rel < 0.01,
        f"Var(L) vs v_da rel err {rel:.2e} at d={d}, pa={pa} (tol 1%)",
    )


# ---------------------------------------------------------------------------
# 2. Acceptance-rate calibration
# ---------------------------------------------------------------------------


def test_criterion_2_acceptance_rate():
    rng = substream(SEED, "crit2")
    frame = ExperimentFrame(equicorrelated(rng, 200, 10))
    criterion = make_criterion(
        frame, pa=0.01, threshold_source="monte_carlo", mc_draws=100_000,
        mc_seed=SEED + 2, n1=100,
    )
    zmat = draw_assignment_batch(200, 100, 100_000, substream(SEED, "crit2-fresh"))
    rate = float(np.mean(metric_values(criterion, frame, zmat) < criterion.threshold))
    tol = 3 * math.sqrt(0.01 * 0.99 / 100_000)
    report(
        "criterion 2",
        abs(rate - 0.01) <= tol,
        f"fresh-draw acceptance {rate:.5f} vs pa=0.01 (tol {tol:.5f})",
    )


# ---------------------------------------------------------------------------
# 3-5 and 7 read off the shared n = 1000 run.
# ---------------------------------------------------------------------------


def _plug_in_r2_d(frame, po):
    """Oracle: the variance-explained ratio from the true potential outcomes."""
    n = frame.n
    s2 = column_moments(frame, frame.rr_cols).cov_xx
    xc = frame.x_rr - frame.x_rr.mean(axis=0)

    def proj(y):
        yc = y - y.mean()
        return projection_variance(yc @ xc / (n - 1), s2)

    tau_c = po.tau_i - po.tau_i.mean()
    s2_tau = float(tau_c @ tau_c / (n - 1))
    s2_tau_proj = proj(po.tau_i)
    num = 0.5 * proj(po.y1) + 0.5 * proj(po.y0) - s2_tau_proj
    den = 0.5 * po.y1.var(ddof=1) + 0.5 * po.y0.var(ddof=1) - s2_tau
    return num / den


def test_criterion_3_precision_gain_formula(main_run):
    frame, po = generate_dgp(
        DgpSetting("linear", 1000, 10), substream(SEED, "dgp", "linear", 1000, 10)
    )
    r2 = _plug_in_r2_d(frame, po)
    target = 1.0 - (1.0 - v_da(10, threshold_from_chisq(10, 0.01))) * r2
    got = main_run.value("precision_gain", "D", "rr_over_cr", n=1000, scenario=1)
    report(
        "criterion 3",
        abs(got - target) <= 0.05,
        f"Var ratio {got:.4f} vs 1-(1-v)R2 = {target:.4f} (tol 0.05)",
    )


def test_criterion_4_scenario_2_null_result(main_run):
    got = main_run.value("precision_gain", "L", "rr_over_cr", n=1000, scenario=2)
    report(
        "criterion 4",
        abs(got - 1.0) <= 0.10,
        f"adjusted-estimator gain {got:.4f} vs 1 (tol 0.10)",
    )


def test_criterion_5_coherence_target(main_run):
    v = v_da(10, threshold_from_chisq(10, 0.01))
    got = main_run.value("coherence_gain", "D|L", "rr_over_cr", n=1000, scenario=1)
    report(
        "criterion 5",
        abs(got - v) <= 0.05,
        f"D-vs-L coherence gain {got:.4f} vs v_da {v:.4f} (tol 0.05)",
    )


def test_criterion_7_coverage(main_run):
    lo, hi = 0.95 - COVERAGE_BAND, 0.95 + COVERAGE_BAND
    rows = {
        (est, design): main_run.value("coverage", est, design, n=1000, scenario=1)
        for est in ("L", "DR-forest")
        for design in ("cr", "rr")
    }
    ok = all(lo <= c <= hi for c in rows.values())
    detail = ", ".join(f"{e}/{d}={c:.3f}" for (e, d), c in rows.items())
    report("criterion 7", ok, f"{detail} within [{lo:.4f}, {hi:.4f}]")


def test_power_invariant_rr_at_least_cr(main_run):
    # Linear setting at n >= 400: rerandomization never costs power beyond
    # binomial noise, for any estimator or scenario cell in the run.
    band = 3 * math.sqrt(0.25 / 1000)
    worst = np.inf
    for scen in (1, 2):
        for est in ("D", "L", "DR-forest"):
            p_rr = main_run.value("power", est, "rr", n=1000, scenario=scen)
            p_cr = main_run.value("power", est, "cr", n=1000, scenario=scen)
            worst = min(worst, p_rr - p_cr)
    assert worst >= -band, f"power drop {worst:.4f} exceeds 3 binomial SEs"


# ---------------------------------------------------------------------------
# 6. Finite-sample benefit for the nonparametric estimator
# ---------------------------------------------------------------------------


def test_criterion_6_dr_finite_sample_benefit(small_n_run):
    got = small_n_run.value("precision_gain", "DR-forest", "rr_over_cr", n=100, scenario=1)
    report(
        "criterion 6",
        got < 0.9,
        f"forest DR precision gain {got:.4f} at n=100 (must be < 0.9)",
    )


# ---------------------------------------------------------------------------
# 8. Randomization-test validity
# ---------------------------------------------------------------------------


def test_criterion_8_randomization_test_validity():
    frame, po = generate_dgp(DgpSetting("linear", 200, 10), substream(SEED, "crit8"))
    y_null = po.y0  # sharp null: treatment never moves the outcome
    criterion = make_criterion(frame, pa=0.01)
    outer = 500
    rejections = 0
    for i in range(outer):
        z = rejection_rerandomize(criterion, frame, 100, substream(SEED, "crit8-obs", i)).accepted
        res = randomization_test(
            ObservedExperiment(frame, z, y_null), criterion, "D", b=199, seed=30_000 + i
        )
        rejections += res.p_value <= 0.05
    rate = rejections / outer
    bound = 0.05 + 3 * math.sqrt(0.05 * 0.95 / outer)
    report(
        "criterion 8",
        rate <= bound,
        f"sharp-null rejection rate {rate:.4f} <= {bound:.4f} at alpha=0.05",
    )


# ---------------------------------------------------------------------------
# 9. Fast oracle equivalences
# ---------------------------------------------------------------------------


def test_criterion_9a_linear_estimator_equals_interacted_regression():
    worst = 0.0
    for s in range(50):
        rng = substream(SEED, "crit9a", s)
        n = 40 + 4 * (s % 8)
        k = 2 + s % 4
        x = rng.standard_normal((n, k))
        frame = ExperimentFrame(x)
        z = np.zeros(n, dtype=np.int8)
        z[rng.permutation(n)[: n // 2]] = 1
        y = x @ rng.standard_normal(k) + rng.standard_normal(n) + z
        from rerand.balance import Assignment

        exp = ObservedExperiment(frame, Assignment(z), y)
        xt = x - x.mean(axis=0)
        design = np.column_stack([np.ones(n), z, xt, z[:, None] * xt])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        worst = max(worst, abs(tau_l(exp).tau_hat - coef[1]))
    report(
        "criterion 9 (regression oracle)",
        worst <= 1e-8,
        f"max |tau_L - interacted coefficient| = {worst:.2e} over 50 fixtures",
    )


def test_criterion_9b_rejection_uniform_on_acceptance_set():
    rng = substream(SEED, "crit9b")
    frame = ExperimentFrame(rng.standard_normal((12, 3)))
    criterion = make_criterion(
        frame, pa=0.3, threshold_source="monte_carlo", mc_draws=200_000,
        mc_seed=SEED + 9, n1=6,
    )
    combos = list(itertools.combinations(range(12), 6))
    zmat = np.zeros((len(combos), 12), dtype=np.int8)
    for r, combo in enumerate(combos):
        zmat[r, list(combo)] = 1
    acceptable = {
        tuple(zmat[i])
        for i in np.flatnonzero(metric_values(criterion, frame, zmat) < criterion.threshold)
    }
    draws = 1_000_000
    counts = dict.fromkeys(acceptable, 0)
    sampler = substream(SEED, "crit9b-draws")
    for _ in range(draws):
        z = rejection_rerandomize(criterion, frame, 6, sampler).accepted
        counts[tuple(z.z)] += 1  # KeyError here would mean a draw outside the set
    expected = draws / len(acceptable)
    chi2_stat = sum((c - expected) ** 2 / expected for c in counts.values())
    dof = len(acceptable) - 1
    zscore = (chi2_stat - dof) / math.sqrt(2 * dof)
    report(
        "criterion 9 (uniform on acceptance set)",
        zscore < 3.1,
        f"GOF z = {zscore:.2f} over {len(acceptable)} acceptable assignments "
        f"(reject only below p = 0.001)",
    )


def test_criterion_9c_imputation_constant_invariance():
    rng = substream(SEED, "crit9c")
    n = 80
    x = rng.standard_normal((n, 3))
    mask = rng.random((n, 3)) < 0.85
    xm = np.where(mask, x, np.nan)
    from rerand.balance import Assignment

    z = Assignment((np.arange(n) % 2).astype(int))
    y = np.nan_to_num(xm, nan=0.0).sum(axis=1) + rng.standard_normal(n) + z.z

    frame0 = augment_missing_indicators(MaskedMatrix.from_values(xm))
    cols = []
    for j in range(3):
        cols.extend([np.where(mask[:, j], x[:, j], 7.0), (~mask[:, j]).astype(float)])
    frame7 = ExperimentFrame(np.column_stack(cols), frame0.names)
    diff = abs(
        tau_l(ObservedExperiment(frame0, z, y)).tau_hat
        - tau_l(ObservedExperiment(frame7, z, y)).tau_hat
    )
    report(
        "criterion 9 (imputation invariance)",
        diff <= 1e-8,
        f"|tau_L(impute 0) - tau_L(impute 7)| = {diff:.2e}",
    )


# ---------------------------------------------------------------------------
# 10. Unbiasedness under rerandomization, both settings
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("dgp", ("linear", "nonlinear"))
def test_criterion_10_unbiasedness(dgp):
    cfg = SimulationConfig(
        dgp=dgp, n_grid=(500,), scenarios=(1,), replications=1000, seed=SEED + 1
    )
    table = run_scenario(cfg, workers=2)
    details = []
    ok = True
    for est in ("D", "L", "DR-forest"):
        mean = table.value("mean", est, "rr", n=500, scenario=1)
        se3 = 3 * math.sqrt(table.value("variance", est, "rr", n=500, scenario=1) / 1000)
        ok &= abs(mean - 1.0) <= se3
        details.append(f"{est}: |{mean:.4f}-1| vs {se3:.4f}")
    report("criterion 10", ok, f"{dgp}: " + "; ".join(details))


# ---------------------------------------------------------------------------
# 11. Determinism across worker counts
# ---------------------------------------------------------------------------


def test_criterion_11_worker_count_determinism(tmp_path):
    from rerand.simulate import emit_report

    cfg = SimulationConfig(
        dgp="linear", n_grid=(200,), scenarios=(1, 3), replications=120,
        seed=SEED + 4, mixture_draws=100_000,
    )
    emit_report(run_scenario(cfg, workers=1), str(tmp_path / "w1"))
    emit_report(run_scenario(cfg, workers=2), str(tmp_path / "w2"))
    a = (tmp_path / "w1" / "metrics.csv").read_bytes()
    b = (tmp_path / "w2" / "metrics.csv").read_bytes()
    report(
        "criterion 11",
        a == b and len(a) > 0,
        f"metrics.csv byte-identical across worker counts ({len(a)} bytes)",
    )
