import math

import numpy as np
import pytest

from rerand.chisq import chi2_cdf, chi2_quantile, normal_cdf, normal_quantile
from rerand.rng import substream


def chi2_cdf_quadrature(x, df, steps=40_000):
    """Simpson's rule on the chi-square density, independent of the
    incomplete-gamma code under test.  Substituting t = u^2 removes the
    integrable singularity at zero for df = 1."""
    if x <= 0:
        return 0.0
    s = df / 2.0
    log_norm = s * math.log(2.0) + math.lgamma(s)

    def integrand(u):
        # 2 u * pdf(u^2) = 2 u^(df-1) exp(-u^2/2) / (2^s Gamma(s))
        if u == 0.0:
            return 2.0 * math.exp(-log_norm) if df == 1 else 0.0
        return 2.0 * math.exp((df - 1.0) * math.log(u) - u * u / 2.0 - log_norm)

    top = math.sqrt(x)
    h = top / steps
    total = integrand(0.0) + integrand(top)
    for i in range(1, steps):
        total += (4 if i % 2 else 2) * integrand(i * h)
    return total * h / 3.0


@pytest.mark.parametrize(
    "x,df",
    [(0.5, 1), (1.57e-4, 1), (2.7, 3), (2.558, 10), (18.3, 10), (70.0, 100), (130.0, 100)],
)
def test_cdf_matches_quadrature(x, df):
    assert chi2_cdf(x, df) == pytest.approx(chi2_cdf_quadrature(x, df), abs=1e-9)


def test_cdf_known_values():
    # chi2_2 has CDF 1 - exp(-x/2) in closed form.
    for x in (0.1, 1.0, 5.0, 20.0):
        assert chi2_cdf(x, 2) == pytest.approx(1.0 - math.exp(-x / 2.0), rel=1e-13)
    # chi2_1 CDF via the normal: P(Z^2 <= x) = 2 Phi(sqrt(x)) - 1.
    for x in (0.01, 1.0, 4.0):
        assert chi2_cdf(x, 1) == pytest.approx(2 * normal_cdf(math.sqrt(x)) - 1, rel=1e-12)


def test_cdf_edges():
    assert chi2_cdf(0.0, 5) == 0.0
    assert chi2_cdf(-1.0, 5) == 0.0
    assert 0.0 < chi2_cdf(1e-12, 1) < 1e-5
    assert chi2_cdf(1e12, 3) == pytest.approx(1.0)


def test_quantile_median_of_chi2_1_against_integral_oracle():
    a = chi2_quantile(0.5, 1)
    assert chi2_cdf_quadrature(a, 1) == pytest.approx(0.5, abs=1e-6)


def test_quantile_roundtrip_grid():
    for df in (1, 2, 6, 10, 37, 100):
        for p in (1e-6, 1e-3, 0.01, 0.2, 0.5, 0.9, 0.999):
            a = chi2_quantile(p, df)
            assert chi2_cdf(a, df) == pytest.approx(p, rel=1e-9, abs=1e-12)


def test_quantile_rejects_probabilities_at_one():
    with pytest.raises(ValueError):
        chi2_quantile(1.0 - 1e-13, 10)
    with pytest.raises(ValueError):
        chi2_quantile(0.0, 10)
    with pytest.raises(ValueError):
        chi2_quantile(1.0, 10)


def test_quantile_monte_carlo_acceptance_rate():
    # The d=10, pa=0.01 threshold reproduced by 1e7 raw chi-square draws.
    a = chi2_quantile(0.01, 10)
    rng = substream(424, "chisq-mc")
    below = 0
    draws = 10_000_000
    for _ in range(10):
        below += int(np.sum(rng.chisquare(10, draws // 10) <= a))
    assert below / draws == pytest.approx(0.01, abs=0.001)


def test_normal_quantile_inverts_cdf():
    for p in (1e-9, 1e-4, 0.025, 0.5, 0.975, 1 - 1e-7):
        assert normal_cdf(normal_quantile(p)) == pytest.approx(p, rel=1e-11, abs=1e-14)
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-10)
