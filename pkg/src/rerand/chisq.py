"""Chi-square and normal distribution functions used by thresholds and intervals.

Self-contained implementations of the regularized lower incomplete gamma
function (series expansion below the s+1 crossover, Lentz continued fraction
above it) and a safeguarded Newton inversion.  Absolute accuracy is around
1e-14 for the CDFs and 1e-12 for the quantiles over the degrees-of-freedom
range this package uses (1 to a few hundred).
"""

from __future__ import annotations

import math

__all__ = [
    "chi2_cdf",
    "chi2_quantile",
    "normal_cdf",
    "normal_quantile",
]

_MAX_ITER = 800
_EPS = 1e-16


def _gamma_p_series(s: float, x: float) -> float:
    # P(s, x) = x^s e^-x / Gamma(s+1) * sum_k x^k / ((s+1)...(s+k))
    term = 1.0 / s
    total = term
    k = s
    for _ in range(_MAX_ITER):
        k += 1.0
        term *= x / k
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    log_prefix = s * math.log(x) - x - math.lgamma(s)
    return math.exp(log_prefix) * total


def _gamma_q_contfrac(s: float, x: float) -> float:
    # Q(s, x) via the Lentz continued fraction; valid for x >= s + 1.
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    log_prefix = s * math.log(x) - x - math.lgamma(s)
    return math.exp(log_prefix) * h


def _gamma_p(s: float, x: float) -> float:
    """Regularized lower incomplete gamma P(s, x)."""
    if s <= 0.0:
        raise ValueError("shape must be positive")
    if x < 0.0:
        raise ValueError("argument must be nonnegative")
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        return min(_gamma_p_series(s, x), 1.0)
    return max(1.0 - _gamma_q_contfrac(s, x), 0.0)


def chi2_cdf(x: float, df: float) -> float:
    """P(chi-square with ``df`` degrees of freedom <= x)."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if x <= 0.0:
        return 0.0
    return _gamma_p(df / 2.0, x / 2.0)


def _chi2_pdf(x: float, df: float) -> float:
    s = df / 2.0
    return math.exp((s - 1.0) * math.log(x) - x / 2.0 - s * math.log(2.0) - math.lgamma(s))


def chi2_quantile(p: float, df: float) -> float:
    """Value a with P(chi-square_df <= a) = p, accurate to ~1e-12 relative.

    Probabilities at or above 1 - 1e-12 are rejected: the quantile diverges
    and downstream acceptance thresholds would be meaningless there.
    """
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie strictly in (0, 1)")
    if p >= 1.0 - 1e-12:
        raise ValueError("probability too close to 1; quantile diverges")

    # Wilson-Hilferty start, clamped away from zero.
    z = normal_quantile(p)
    t = 1.0 - 2.0 / (9.0 * df) + z * math.sqrt(2.0 / (9.0 * df))
    x = df * t * t * t if t > 0 else df * 1e-8
    x = max(x, 1e-300)

    # Bracket the root, then safeguarded Newton in log space (F is monotone).
    lo, hi = 0.0, x
    while chi2_cdf(hi, df) < p:
        lo = hi
        hi *= 4.0
        if hi > 1e300:
            raise ArithmeticError("chi-square quantile bracket overflow")
    x = min(max(x, lo * 1.0000001 + 1e-300), hi)
    for _ in range(200):
        f = chi2_cdf(x, df) - p
        if f > 0:
            hi = x
        else:
            lo = x
        pdf = _chi2_pdf(x, df)
        step_ok = pdf > 0.0
        if step_ok:
            # Newton step on u = log(x): du = -f / (pdf * x)
            u = math.log(x) - f / (pdf * x)
            x_new = math.exp(u)
            step_ok = lo < x_new < hi
        if not step_ok:
            x_new = 0.5 * (lo + hi) if hi > lo else x
        if abs(x_new - x) <= 1e-14 * x:
            return x_new
        x = x_new
    return x


_SQRT2 = math.sqrt(2.0)


def normal_cdf(x: float) -> float:
    """Standard normal CDF by way of erfc (full double accuracy)."""
    return 0.5 * math.erfc(-x / _SQRT2)


def normal_quantile(p: float) -> float:
    """Standard normal quantile, rational approximation plus Halley polish."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie strictly in (0, 1)")
    # Acklam's approximation: |relative error| < 1.15e-9 everywhere.
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # Two Halley refinements push the error to the last few ulps.
    for _ in range(2):
        e = normal_cdf(x) - p
        u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
        x = x - u / (1.0 + x * u / 2.0)
    return x
