import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rerand.finite_pop import (
    ExperimentFrame,
    PotentialOutcomes,
    SingularCovariance,
    arm_moments,
    column_moments,
    projection_variance,
    tau_projection_variance,
)
from rerand.rng import substream


def brute_force_cov(x):
    """Textbook two-pass covariance with explicit double loops."""
    n, k = x.shape
    means = [sum(x[:, j]) / n for j in range(k)]
    cov = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            cov[a, b] = sum(
                (x[i, a] - means[a]) * (x[i, b] - means[b]) for i in range(n)
            ) / (n - 1)
    return np.array(means), cov


def test_single_binary_column():
    frame = ExperimentFrame(np.array([[0.0], [1.0]]))
    m = column_moments(frame, (0,))
    assert m.mean_x[0] == pytest.approx(0.5)
    assert m.cov_xx[0, 0] == pytest.approx(0.5)


def test_constant_column_degenerates():
    x = np.column_stack([np.full(6, 3.0), np.arange(6.0)])
    m = column_moments(ExperimentFrame(x), (0, 1))
    assert m.cov_xx[0, 0] == 0.0
    assert m.cov_xx[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_column_moments_vs_brute_force_oracle():
    x = substream(3, "bf").standard_normal((5, 3))
    m = column_moments(ExperimentFrame(x), (0, 1, 2))
    mean_o, cov_o = brute_force_cov(x)
    np.testing.assert_allclose(m.mean_x, mean_o, atol=1e-12)
    np.testing.assert_allclose(m.cov_xx, cov_o, atol=1e-12)


def test_covariance_symmetric_and_psd():
    rng = substream(9, "psd")
    for _ in range(10):
        x = rng.standard_normal((30, 6))
        cov = column_moments(ExperimentFrame(x), range(6)).cov_xx
        assert np.abs(cov - cov.T).max() < 1e-12
        w = np.linalg.eigvalsh(cov)
        assert w.min() >= -1e-9 * np.trace(cov)


def test_empty_subset_rejected(small_frame):
    with pytest.raises(ValueError):
        column_moments(small_frame, ())


def test_projection_variance_trivial_cases():
    assert projection_variance(np.zeros(3), np.eye(3)) == 0.0
    # d = 1: c^2 / v
    assert projection_variance(np.array([2.0]), np.array([[4.0]])) == pytest.approx(1.0)


def test_projection_variance_vs_solve_oracle():
    rng = substream(11, "proj")
    for _ in range(5):
        b = rng.standard_normal((3, 3))
        cov = b @ b.T + 0.5 * np.eye(3)
        c = rng.standard_normal(3)
        oracle = float(c @ np.linalg.inv(cov) @ c)
        assert projection_variance(c, cov) == pytest.approx(oracle, rel=1e-10)


def test_projection_variance_singular_paths():
    cov = np.ones((2, 2))  # rank 1
    with pytest.raises(SingularCovariance):
        projection_variance(np.array([1.0, 0.0]), cov)
    # Pseudo-inverse mode is opt-in and finite.
    out = projection_variance(np.array([1.0, 1.0]), cov, singular="pseudo")
    assert np.isfinite(out) and out >= 0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_projection_invariant_to_recoding(seed):
    rng = substream(seed, "recode")
    x = rng.standard_normal((40, 3))
    y = rng.standard_normal(40)
    b = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
    if abs(np.linalg.det(b)) < 1e-3:
        return
    m = arm_moments(x, y)
    m2 = arm_moments(x @ b, y)
    v1 = projection_variance(m.cov_yx, m.cov_xx)
    v2 = projection_variance(m2.cov_yx, m2.cov_xx)
    assert v2 == pytest.approx(v1, rel=1e-8)


def test_tau_projection_identical_rows_gives_zero():
    rng = substream(13, "tau")
    x = rng.standard_normal((20, 4))
    y = rng.standard_normal(20)
    m = arm_moments(x, y)
    assert tau_projection_variance(m, m, m.cov_xx) == pytest.approx(0.0, abs=1e-14)


def test_tau_projection_scalar_case():
    m1 = arm_moments(np.arange(10.0)[:, None], np.arange(10.0) * 2.0)
    m0 = arm_moments(np.arange(10.0)[:, None], np.arange(10.0) * 0.5)
    v = np.var(np.arange(10.0), ddof=1)
    c1, c0 = m1.cov_yx[0], m0.cov_yx[0]
    expect = (c1 - c0) ** 2 / v
    assert tau_projection_variance(m1, m0, np.array([[v]])) == pytest.approx(expect, rel=1e-12)


def test_tau_projection_vs_quadratic_form_oracle():
    rng = substream(17, "tauq")
    x = rng.standard_normal((30, 4))
    m1 = arm_moments(x[:15], rng.standard_normal(15))
    m0 = arm_moments(x[15:], rng.standard_normal(15))
    cov = column_moments(ExperimentFrame(x), range(4)).cov_xx
    delta = m1.cov_yx - m0.cov_yx
    oracle = float(delta @ np.linalg.inv(cov) @ delta)
    assert tau_projection_variance(m1, m0, cov) == pytest.approx(oracle, rel=1e-10)
    assert tau_projection_variance(m1, m0, cov) >= 0


def test_frame_validation():
    with pytest.raises(ValueError):
        ExperimentFrame(np.ones((1, 2)))  # too few units
    with pytest.raises(ValueError):
        ExperimentFrame(np.ones((5, 2)), rr_cols=(0, 0))  # duplicates
    with pytest.raises(ValueError):
        ExperimentFrame(np.ones((5, 2)), rr_cols=(2,))  # out of range
    with pytest.raises(ValueError):
        ExperimentFrame(np.array([[np.nan, 1.0], [0.0, 1.0]]))
    frame = ExperimentFrame(np.ones((5, 3)), adj_cols=())
    assert frame.p == 0 and frame.d == 3


def test_potential_outcomes_observed():
    po = PotentialOutcomes(y1=np.array([2.0, 3.0]), y0=np.array([1.0, 1.0]))
    assert po.tau == pytest.approx(1.5)
    np.testing.assert_allclose(po.observed(np.array([1, 0])), [2.0, 1.0])
