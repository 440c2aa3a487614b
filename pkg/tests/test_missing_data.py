import numpy as np
import pytest

from rerand.assignment import complete_randomization
from rerand.balance import Assignment
from rerand.estimators import ObservedExperiment, tau_dr, tau_l
from rerand.finite_pop import ExperimentFrame
from rerand.missing_data import (
    MaskedMatrix,
    ResponseRecord,
    augment_missing_indicators,
    mask_missing_outcomes,
    tau_dr_missing_outcomes,
)
from rerand.outcome_models import OutcomeModelSpec
from rerand.rng import substream
from tests.conftest import equicorrelated


def test_augment_no_missing_is_identity():
    rng = substream(1, "aug")
    x = rng.standard_normal((12, 3))
    frame = augment_missing_indicators(MaskedMatrix.from_values(x))
    assert frame.k == 3
    np.testing.assert_array_equal(frame.covariates, x)


def test_augment_fully_missing_column_keeps_only_indicator():
    x = np.column_stack([np.full(10, np.nan), np.arange(10.0)])
    with pytest.warns(UserWarning):
        frame = augment_missing_indicators(MaskedMatrix.from_values(x, names=("a", "b")))
    assert frame.names == ("a_missing", "b")
    np.testing.assert_array_equal(frame.covariates[:, 0], np.ones(10))


def test_augment_partially_missing_adds_indicator_and_zero_imputes():
    x = np.array([[1.0, 5.0], [np.nan, 6.0], [3.0, np.nan]])
    frame = augment_missing_indicators(MaskedMatrix.from_values(x, names=("u", "v")))
    assert frame.names == ("u", "u_missing", "v", "v_missing")
    np.testing.assert_array_equal(frame.covariates[:, 0], [1.0, 0.0, 3.0])
    np.testing.assert_array_equal(frame.covariates[:, 1], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(frame.covariates[:, 3], [0.0, 0.0, 1.0])
    assert frame.k <= 2 * 2


def test_augment_idempotent_once_complete():
    x = np.array([[1.0, np.nan], [2.0, 4.0], [0.5, 1.0], [0.1, 2.0]])
    first = augment_missing_indicators(MaskedMatrix.from_values(x))
    second = augment_missing_indicators(
        MaskedMatrix.from_values(first.covariates, first.names)
    )
    assert second.names == first.names
    np.testing.assert_array_equal(second.covariates, first.covariates)


def test_indicators_align_with_mask():
    rng = substream(2, "mask")
    x = rng.standard_normal((30, 4))
    mask = rng.random((30, 4)) < 0.8
    m = MaskedMatrix(np.where(mask, x, np.nan), mask)
    frame = augment_missing_indicators(m)
    for j in range(4):
        ind = frame.covariates[:, frame.names.index(f"x{j}_missing")]
        np.testing.assert_array_equal(ind, (~mask[:, j]).astype(float))
        assert set(np.unique(ind)) <= {0.0, 1.0}


def test_linear_estimate_invariant_to_imputation_constant():
    # Augmenting with 0 vs any other constant changes tau_l by < 1e-8 because
    # the indicator column absorbs the shift.
    rng = substream(3, "invar")
    n = 80
    x = rng.standard_normal((n, 3))
    mask = rng.random((n, 3)) < 0.85
    xm = np.where(mask, x, np.nan)
    z = complete_randomization(n, 40, rng)
    y = np.nan_to_num(xm, nan=0.0).sum(axis=1) + rng.standard_normal(n) + z.z

    frame0 = augment_missing_indicators(MaskedMatrix.from_values(xm))
    cols7 = []
    for j in range(3):
        cols7.extend([np.where(mask[:, j], x[:, j], 7.0), (~mask[:, j]).astype(float)])
    frame7 = ExperimentFrame(np.column_stack(cols7), frame0.names)

    t0 = tau_l(ObservedExperiment(frame0, z, y)).tau_hat
    t7 = tau_l(ObservedExperiment(frame7, z, y)).tau_hat
    assert t7 == pytest.approx(t0, abs=1e-8)


def test_mask_missing_outcomes_splits():
    y, obs = mask_missing_outcomes([1.0, np.nan, 2.0])
    np.testing.assert_array_equal(y, [1.0, 0.0, 2.0])
    np.testing.assert_array_equal(obs, [True, False, True])


def test_reduces_to_tau_dr_when_fully_observed():
    rng = substream(4, "reduce")
    n = 60
    x = rng.standard_normal((n, 3))
    frame = ExperimentFrame(x)
    z = complete_randomization(n, 30, rng)
    y = x.sum(axis=1) + rng.standard_normal(n) + z.z
    exp = ObservedExperiment(frame, z, y)
    spec = OutcomeModelSpec(kind="ols")
    plain, _ = tau_dr(exp, spec, k=2, rng=substream(5, "s"))
    with_r = tau_dr_missing_outcomes(
        exp, ResponseRecord(np.ones(n, dtype=bool)), spec, k=2, rng=substream(5, "s")
    )
    assert with_r.tau_hat == pytest.approx(plain.tau_hat, abs=1e-12)
    assert with_r.v_hat == pytest.approx(plain.v_hat, abs=1e-10)


def test_unobserved_unit_contributes_only_model_terms():
    # A unit with an unobserved outcome has zero residual weight, so its
    # arm-z contribution is exactly the fitted mu-hat value.
    rng = substream(6, "part")
    n = 40
    x = rng.standard_normal((n, 2))
    frame = ExperimentFrame(x)
    z = complete_randomization(n, 20, rng)
    y_full = x.sum(axis=1) + rng.standard_normal(n) + z.z
    r = np.ones(n, dtype=bool)
    r[np.flatnonzero(z.z == 0)[:5]] = False
    y = np.where(r, y_full, 0.0)
    exp = ObservedExperiment(frame, z, y)
    report = tau_dr_missing_outcomes(
        exp, ResponseRecord(r), OutcomeModelSpec(kind="ols"), k=2, rng=substream(7)
    )
    assert np.isfinite(report.tau_hat)
    assert report.diagnostics["missing_outcomes"] == 5

    from rerand.estimators import _dr_core

    _, table = _dr_core(
        exp, OutcomeModelSpec(kind="ols"), 2, substream(7), response=ResponseRecord(r)
    )
    # eif0 = eta0 - mean(eta0), and eta0 == mu0 exactly where the outcome is
    # unobserved, so eif0 - mu0 is the same constant on every such unit.
    gone = np.flatnonzero(~r)  # all control units here
    assert np.ptp(table.eif0[gone] - table.mu0[gone]) < 1e-10
    observed_controls = np.flatnonzero(r & (z.z == 0))
    assert np.ptp(table.eif0[observed_controls] - table.mu0[observed_controls]) > 1e-3


def test_mcar_outcomes_unbiased_monte_carlo():
    # Outcomes missing completely at random at rate 0.2 on a linear setting;
    # the reweighted estimator stays centered on the true effect of 1.
    rng = substream(8, "mcar")
    n = 1000
    x = equicorrelated(rng, n, 6)
    y0 = x.sum(axis=1) + rng.standard_normal(n) * x.sum(axis=1).std(ddof=1) / 5
    frame = ExperimentFrame(x)
    spec = OutcomeModelSpec(kind="ols")
    taus = []
    clip_counts = []
    for i in range(500):
        z = complete_randomization(n, n // 2, substream(9, "z", i))
        y_full = y0 + z.z
        r = substream(10, "r", i).random(n) >= 0.2
        for arm in (0, 1):
            assert np.sum(r & (z.z == arm)) >= 2
        report = tau_dr_missing_outcomes(
            ObservedExperiment(frame, z, np.where(r, y_full, 0.0)),
            ResponseRecord(r),
            spec,
            k=2,
            rng=substream(11, "m", i),
        )
        taus.append(report.tau_hat)
        clip_counts.append(report.diagnostics["clipped_response_probs"])
    taus = np.asarray(taus)
    mc_se = taus.std(ddof=1) / np.sqrt(taus.size)
    assert abs(taus.mean() - 1.0) <= 3 * mc_se
    # Clipping should essentially never fire at a benign missing rate.
    assert np.mean(clip_counts) <= 0.01 * n


def test_requires_two_observed_per_arm():
    rng = substream(12, "few")
    n = 20
    frame = ExperimentFrame(rng.standard_normal((n, 2)))
    z = Assignment((np.arange(n) < 10).astype(int))
    r = np.ones(n, dtype=bool)
    r[z.z == 1] = False
    r[np.flatnonzero(z.z == 1)[0]] = True
    with pytest.raises(ValueError):
        tau_dr_missing_outcomes(
            ObservedExperiment(frame, z, np.zeros(n)),
            ResponseRecord(r),
            OutcomeModelSpec(kind="ols"),
            rng=substream(13),
        )
