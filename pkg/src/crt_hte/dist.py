"""Normal, chi-square and noncentral chi-square functions used by the power formulas.

Everything here is scalar and pure-Python (stdlib ``math`` only) so results are
bit-stable across platforms and numpy/scipy versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_EPS = 1e-16
_TINY = 1e-300

# Acklam's rational approximation, used only as a starting point for refinement
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / _SQRT2)


def _normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT2PI


def _acklam(p: float) -> float:
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    if p > 1.0 - plow:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def normal_quantile(p: float) -> float:
    """Inverse of :func:`normal_cdf`, refined by Halley steps on the CDF."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"normal_quantile needs 0 < p < 1, got {p}")
    if p == 0.5:
        return 0.0
    # work in the lower tail so the residual keeps relative precision
    if p > 0.5:
        return -normal_quantile(1.0 - p)
    x = _acklam(p)
    for _ in range(3):
        e = normal_cdf(x) - p
        u = e / _normal_pdf(x)
        x -= u / (1.0 + 0.5 * x * u)
    return x


def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    n = 0
    while abs(term) > abs(total) * _EPS:
        n += 1
        term *= x / (a + n)
        total += term
        if n > 10_000:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_continued_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the Legendre continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_continued_fraction(a, x)


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if x <= 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_continued_fraction(a, x)


def chisq_cdf(x: float, df: float) -> float:
    return gamma_p(0.5 * df, 0.5 * x)


def chisq_sf(x: float, df: float) -> float:
    return gamma_q(0.5 * df, 0.5 * x)


def _chisq_pdf(x: float, df: float) -> float:
    k = 0.5 * df
    if x <= 0.0:
        return 0.0
    return math.exp((k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k))


def chisq_quantile(p: float, df: int) -> float:
    """Quantile of the central chi-square by safeguarded Newton iteration."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"chisq_quantile needs 0 < p < 1, got {p}")
    if df <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    # Wilson-Hilferty start
    z = normal_quantile(p)
    h = 2.0 / (9.0 * df)
    x = max(df * (1.0 - h + z * math.sqrt(h)) ** 3, 1e-8)
    lo, hi = 0.0, max(2.0 * x, 1.0)
    while chisq_cdf(hi, df) < p:
        lo, hi = hi, 2.0 * hi
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    for _ in range(200):
        f = chisq_cdf(x, df) - p
        if f > 0.0:
            hi = x
        else:
            lo = x
        if abs(f) < 1e-15 or hi - lo < 1e-15 * max(1.0, x):
            break
        dens = _chisq_pdf(x, df)
        step = f / dens if dens > 0.0 else math.inf
        cand = x - step
        x = cand if lo < cand < hi else 0.5 * (lo + hi)
    return x


def noncentral_chisq_sf(x: float, df: int, lam: float, tol: float = 1e-12) -> float:
    """Upper tail of chi-square(df, lam) as a Poisson(lam/2) mixture of central tails.

    Terms are added until the Poisson mass not yet visited drops below ``tol``;
    each central tail is at most 1, so that mass bounds the truncation error.
    """
    if lam < 0.0:
        raise DomainError(f"noncentrality must be nonnegative, got {lam}")
    if x <= 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    half = 0.5 * lam
    if half == 0.0:
        # lam == 0, or so small that lam/2 underflows
        return chisq_sf(x, df)
    log_half = math.log(half)
    total = 0.0
    mass = 0.0
    j = 0
    while True:
        weight = math.exp(-half + j * log_half - math.lgamma(j + 1.0))
        total += weight * gamma_q(0.5 * df + j, 0.5 * x)
        mass += weight
        if j > half and 1.0 - mass < tol:
            break
        j += 1
        if j > 100_000:
            break
    return min(max(total, 0.0), 1.0)


@dataclass(frozen=True)
class NoncentralChiSq:
    df: int
    lam: float = 0.0

    def __post_init__(self) -> None:
        if self.df <= 0:
            raise DomainError(f"degrees of freedom must be positive, got {self.df}")
        if self.lam < 0:
            raise DomainError(f"noncentrality must be nonnegative, got {self.lam}")

    def sf(self, x: float) -> float:
        return noncentral_chisq_sf(x, self.df, self.lam)

    def cdf(self, x: float) -> float:
        return 1.0 - self.sf(x)
