"""Closed-form variances, power and sample-size solvers for fixed-prevalence designs.

Nothing on the beta4 path takes the ICC as an input: under fixed prevalence the
variance of the interaction estimator depends only on sizes, allocation, theta
and sigma_eps. The ICC only enters the beta2 variance and the two reference
calculators kept for comparison with the classical design-effect formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import ClusterSizes, PsiEstimate, SubgroupSpec, TrialDesign
from .dist import chisq_quantile, noncentral_chisq_sf, normal_cdf, normal_quantile
from .errors import (
    DegenerateDenominator,
    NoRootInBracket,
    NonPositiveDiscriminant,
    NotUnivariate,
    SingularTheta,
    TooFewClusters,
    UnequalArms,
)
from .randomization import (
    check_assignment,
    psi_exact,
    psi_rho,
    psi_series_value,
    size_cv2_kurtosis,
    wbar,
)

ThetaLike = SubgroupSpec | Sequence[float] | np.ndarray | float
PsiLike = PsiEstimate | float


@dataclass(frozen=True)
class PowerRequest:
    delta: tuple[float, ...]
    alpha: float = 0.05
    target_power: float = 0.8

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta", tuple(float(d) for d in np.atleast_1d(self.delta)))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.alpha < self.target_power < 1.0:
            raise ValueError(f"target power must lie in (alpha, 1), got {self.target_power}")


@dataclass(frozen=True)
class DropoutSpec:
    r: float

    def __post_init__(self) -> None:
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"drop-out rate must lie in (0, 1), got {self.r}")


@dataclass(frozen=True)
class SizeResult:
    raw: float
    rounded: int
    multiple: int


@dataclass(frozen=True)
class EqualizerResult:
    m_last: float
    m_last_rounded: int
    m_bar: float
    psi: float
    iterations: int


def _theta_array(theta: ThetaLike) -> np.ndarray:
    if isinstance(theta, SubgroupSpec):
        return theta.as_array()
    return np.atleast_1d(np.asarray(theta, dtype=float))


def _psi_value(psi: PsiLike) -> float:
    return float(psi.value if isinstance(psi, PsiEstimate) else psi)


def _z_sum(alpha: float, power: float) -> float:
    return normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power)


def round_to_multiple(x: float, multiple: int, mode: str = "nearest") -> int:
    """Nearest multiple with halves rounded up, or the ceiling multiple."""
    if multiple < 1:
        raise ValueError(f"rounding multiple must be positive, got {multiple}")
    if mode == "nearest":
        return int(multiple * math.floor(x / multiple + 0.5))
    if mode == "ceil":
        return int(multiple * math.ceil(x / multiple - 1e-12))
    raise ValueError(f"unknown rounding mode {mode!r}")


def theta_precision(theta: ThetaLike) -> np.ndarray:
    """(diag(theta) - theta theta')^{-1} = diag(1/theta) + J / (1 - sum(theta))."""
    t = _theta_array(theta)
    if np.any(t <= 0.0) or np.any(t >= 1.0) or t.sum() >= 1.0:
        raise SingularTheta(f"theta = {t.tolist()} makes diag(theta) - theta theta' singular")
    return np.diag(1.0 / t) + np.full((t.size, t.size), 1.0 / (1.0 - t.sum()))


def theta_information(theta: ThetaLike) -> np.ndarray:
    t = _theta_array(theta)
    return np.diag(t) - np.outer(t, t)


def var_beta4_conditional(design: TrialDesign, w: Sequence[int] | np.ndarray) -> np.ndarray:
    """Exact Var(beta4_hat | W, X) for a fixed-prevalence design."""
    arr = check_assignment(w, design.n_clusters)
    wb = wbar(design.clusters, arr)
    scale = design.sigma_eps**2 / (design.clusters.total * wb * (1.0 - wb))
    return scale * theta_precision(design.subgroups)


def omega4(design: TrialDesign, psi: PsiLike) -> np.ndarray:
    """Unconditional Var(beta4_hat) = Omega4 / I = psi sigma^2 / (I mbar) * precision."""
    scale = _psi_value(psi) * design.sigma_eps**2 / design.clusters.total
    return scale * theta_precision(design.subgroups)


def computed_se(design: TrialDesign, psi: PsiLike) -> np.ndarray:
    """Formula standard errors of beta4_hat, one per subgroup."""
    return np.sqrt(np.diag(omega4(design, psi)))


def sigma4_equal_reference(m: float, rho: float, rho_x: float, wbar_mean: float,
                           sigma2_y_given_x: float, sigma2_x: float) -> float:
    """Classical large-I variance factor for equal cluster sizes m."""
    num = sigma2_y_given_x * (1.0 - rho) * (1.0 + (m - 1.0) * rho)
    den = m * sigma2_x * wbar_mean * (1.0 - wbar_mean) * (1.0 + (m - 2.0) * rho
                                                          - (m - 1.0) * rho_x * rho)
    if not den > 0.0:
        raise DegenerateDenominator(f"denominator {den} is not positive")
    return num / den


def sigma4_unequal_reference(sizes: ClusterSizes | Sequence[float], rho: float,
                             rho_x: float | Sequence[float], wbar_mean: float,
                             sigma2_y_given_x: float, sigma2_x: float) -> float:
    """Variable-size analogue with expectations replaced by empirical means.

    ``rho_x`` may be a scalar or one value per cluster; with per-cluster values
    the bracket becomes the mean of m_i + (1 - rho_x_i) p_i + rho_x_i q_i.
    """
    m = sizes.as_array() if isinstance(sizes, ClusterSizes) else np.asarray(sizes, dtype=float)
    rx = np.broadcast_to(np.asarray(rho_x, dtype=float), m.shape)
    shrink = 1.0 + (m - 1.0) * rho
    p = -m * rho / shrink
    q = -m**2 * rho / shrink
    bracket = float(np.mean(m + (1.0 - rx) * p + rx * q))
    den = sigma2_x * wbar_mean * (1.0 - wbar_mean) * bracket
    if not den > 0.0:
        raise DegenerateDenominator(f"denominator {den} is not positive")
    return sigma2_y_given_x * (1.0 - rho) / den


def var_beta2(design: TrialDesign, rho: float) -> tuple[float, float, float]:
    """(value, lower, upper) for the treatment main-effect variance at ICC ``rho``.

    value = psi_rho / sum_i 1/(sigma_eps^2/m_i + sigma_gamma^2); the bounds use
    sigma_gamma^2 / I and sigma_{y|x}^2 / I in place of the harmonic term.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    s2 = design.sigma_eps**2
    s2_gamma = s2 * rho / (1.0 - rho)
    s2_yx = s2 / (1.0 - rho)
    pr = psi_rho(design.clusters, design.i1, rho)
    m = design.clusters.as_array()
    value = pr / float(np.sum(1.0 / (s2 / m + s2_gamma)))
    n = design.n_clusters
    return value, pr * s2_gamma / n, pr * s2_yx / n


def _univariate_theta(theta: ThetaLike) -> float:
    t = _theta_array(theta)
    if t.size != 1:
        raise NotUnivariate(f"this formula needs one subgroup, got p = {t.size}")
    return float(t[0])


def wald_se(n_clusters: int, m_bar: float, theta: ThetaLike, sigma_eps: float,
            psi: PsiLike) -> float:
    th = _univariate_theta(theta)
    return math.sqrt(_psi_value(psi) * sigma_eps**2 / (n_clusters * m_bar * th * (1.0 - th)))


def power_wald_1d(delta: float, design: TrialDesign, psi: PsiLike, alpha: float = 0.05) -> float:
    """One-tail normal approximation Phi(z_{alpha/2} + |delta| / SE)."""
    se = wald_se(design.n_clusters, design.m_bar, design.subgroups, design.sigma_eps, psi)
    return normal_cdf(normal_quantile(alpha / 2.0) + abs(delta) / se)


def noncentrality(delta: Sequence[float] | float, design: TrialDesign, psi: PsiLike) -> float:
    d = np.atleast_1d(np.asarray(delta, dtype=float))
    info = theta_information(design.subgroups)
    if d.size != info.shape[0]:
        raise ValueError(f"delta has {d.size} entries for p = {info.shape[0]} subgroups")
    return float(design.clusters.total * d @ info @ d / (_psi_value(psi) * design.sigma_eps**2))


def power_chisq(delta: Sequence[float] | float, design: TrialDesign, psi: PsiLike,
                alpha: float = 0.05) -> float:
    """Power of the p-df Wald chi-square test from the noncentral chi-square tail."""
    lam = noncentrality(delta, design, psi)
    crit = chisq_quantile(1.0 - alpha, design.p)
    return noncentral_chisq_sf(crit, design.p, lam)


def required_m_bar(delta: float, n_clusters: int, theta: ThetaLike, sigma_eps: float,
                   psi: PsiLike, power: float = 0.8, alpha: float = 0.05) -> float:
    th = _univariate_theta(theta)
    z = _z_sum(alpha, power)
    return _psi_value(psi) * sigma_eps**2 * z**2 / (n_clusters * th * (1.0 - th) * delta**2)


def min_avg_cluster_size(delta: float, n_clusters: int, theta: ThetaLike, sigma_eps: float,
                         psi: PsiLike, multiple: int = 1, power: float = 0.8,
                         alpha: float = 0.05, rounding: str = "nearest") -> SizeResult:
    """Average cluster size reaching ``power``, raw and on the ``multiple`` grid."""
    raw = required_m_bar(delta, n_clusters, theta, sigma_eps, psi, power, alpha)
    return SizeResult(raw, round_to_multiple(raw, multiple, rounding), multiple)


def detectable_delta(n_clusters: int, m_bar: float, theta: ThetaLike, sigma_eps: float,
                     psi: PsiLike, power: float = 0.8, alpha: float = 0.05) -> float:
    """Smallest |delta| with power_wald_1d >= ``power`` (exact root)."""
    return _z_sum(alpha, power) * wald_se(n_clusters, m_bar, theta, sigma_eps, psi)


def _series_psi_of(sizes: np.ndarray, kurtosis: str) -> float:
    cv2, kurt = size_cv2_kurtosis(sizes, kurtosis)
    return psi_series_value(cv2, kurt, sizes.size)


def solve_equalizer(fixed_sizes: Sequence[float], delta: float, theta: ThetaLike,
                    sigma_eps: float, power: float = 0.8, alpha: float = 0.05,
                    upper: float = 1e6, rtol: float = 1e-8,
                    kurtosis: str = "standard") -> EqualizerResult:
    """Solve for the last cluster size so the total meets the psi-dependent requirement.

    The total I*mbar must equal psi(m) sigma^2 (z_{1-a/2} + z_pow)^2 / (theta(1-theta) delta^2),
    where psi (series form) itself depends on the unknown size. Bisection runs
    on [max(fixed_sizes), upper].
    """
    fixed = np.asarray(fixed_sizes, dtype=float)
    n = fixed.size + 1
    if n % 2:
        raise UnequalArms(f"the series psi needs an even number of clusters, got {n}")
    if n < 4:
        raise TooFewClusters(f"the series psi needs at least 4 clusters, got {n}")
    th = _univariate_theta(theta)
    c = sigma_eps**2 * _z_sum(alpha, power) ** 2 / (th * (1.0 - th) * delta**2)
    base = float(fixed.sum())

    def excess(x: float) -> float:
        return base + x - _series_psi_of(np.append(fixed, x), kurtosis) * c

    lo, hi = float(fixed.max()), float(upper)
    f_lo, f_hi = excess(lo), excess(hi)
    # rounding can push an exact root at the lower end slightly positive
    if 0.0 < f_lo <= 1e-10 * (base + lo):
        f_lo = 0.0
        hi = lo
    if f_lo > 0.0 or f_hi < 0.0:
        raise NoRootInBracket(
            f"no sign change on [{lo:g}, {hi:g}] (excess {f_lo:.4g} .. {f_hi:.4g})"
        )
    it = 0
    while hi - lo > rtol * hi and it < 400:
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        it += 1
    root = 0.5 * (lo + hi)
    sizes = np.append(fixed, root)
    return EqualizerResult(root, math.ceil(root - 1e-9), float(sizes.mean()),
                           _series_psi_of(sizes, kurtosis), it)


def size_spread_term(sizes: ClusterSizes | Sequence[float]) -> float:
    """(1/I) sum_i (I mbar - m_i) / m_i, which equals sum_i mbar/m_i - 1."""
    m = sizes.as_array() if isinstance(sizes, ClusterSizes) else np.asarray(sizes, dtype=float)
    return float(np.sum(m.mean() / m) - 1.0)


@dataclass(frozen=True)
class DropoutBracket:
    """bracket(mbar) = a + b / mbar, the per-cluster inflation under drop-out."""

    a: float
    b: float

    def __call__(self, m_bar: float) -> float:
        return self.a + self.b / m_bar


def dropout_bracket(r: float, theta: ThetaLike, sizes: ClusterSizes | Sequence[float],
                    form: str = "literal") -> DropoutBracket:
    """Bracket coefficients for drop-out rate ``r``.

    ``form="literal"`` evaluates the general expression with the size-spread
    term as written. ``form="printed"`` halves that term, which reproduces the
    constant used for the simulation pattern in the reduced equation.
    """
    DropoutSpec(r)
    th = _univariate_theta(theta)
    m = sizes.as_array() if isinstance(sizes, ClusterSizes) else np.asarray(sizes, dtype=float)
    spread = size_spread_term(m)
    if form == "printed":
        spread /= 2.0
    elif form != "literal":
        raise ValueError(f"unknown bracket form {form!r}")
    n = m.size
    a = 1.0 / (th * (1.0 - th))
    b = (th**3 + (1.0 - th) ** 3) / (n * (1.0 - r) * th**2 * (1.0 - th) ** 2) * (r + spread)
    return DropoutBracket(a, b)


def dropout_min_size(r: float, delta: float, theta: ThetaLike,
                     sizes: ClusterSizes | Sequence[float], psi: PsiLike,
                     sigma_eps: float = 1.0, multiple: int = 1, power: float = 0.8,
                     alpha: float = 0.05, form: str = "literal",
                     rounding: str = "nearest") -> SizeResult:
    """Positive root of mbar^2 - P a mbar - P b = 0 with P = psi s^2 z^2 / (I (1-r) delta^2)."""
    br = dropout_bracket(r, theta, sizes, form)
    n = len(sizes)
    pref = _psi_value(psi) * sigma_eps**2 * _z_sum(alpha, power) ** 2 / (n * (1.0 - r) * delta**2)
    lin, const = pref * br.a, pref * br.b
    disc = lin * lin + 4.0 * const
    if not disc > 0.0:
        raise NonPositiveDiscriminant(f"discriminant {disc} is not positive")
    raw = 0.5 * (lin + math.sqrt(disc))
    return SizeResult(raw, round_to_multiple(raw, multiple, rounding), multiple)


def _dropout_slope(r: float, m_bar: float, n: int, theta: ThetaLike,
                   sizes: ClusterSizes | Sequence[float], psi: PsiLike, sigma_eps: float,
                   form: str) -> float:
    br = dropout_bracket(r, theta, sizes, form)
    return math.sqrt((1.0 - r) * m_bar * n / (_psi_value(psi) * sigma_eps**2) / br(m_bar))


def dropout_power(r: float, m_bar: float, delta: float, theta: ThetaLike,
                  sizes: ClusterSizes | Sequence[float], psi: PsiLike, sigma_eps: float = 1.0,
                  alpha: float = 0.05, form: str = "literal") -> float:
    """Phi(z_{alpha/2} + |delta| sqrt((1-r) mbar I / (psi s^2) / bracket(mbar)))."""
    slope = _dropout_slope(r, m_bar, len(sizes), theta, sizes, psi, sigma_eps, form)
    return normal_cdf(normal_quantile(alpha / 2.0) + abs(delta) * slope)


def dropout_detectable_delta(r: float, m_bar: float, theta: ThetaLike,
                             sizes: ClusterSizes | Sequence[float], psi: PsiLike,
                             sigma_eps: float = 1.0, power: float = 0.8, alpha: float = 0.05,
                             form: str = "literal") -> float:
    slope = _dropout_slope(r, m_bar, len(sizes), theta, sizes, psi, sigma_eps, form)
    return _z_sum(alpha, power) / slope


def dropout_bracket_mc(r: float, theta: float, sizes: ClusterSizes | Sequence[int],
                       draws: int, seed: int) -> tuple[float, float, int]:
    """Monte Carlo of (1/I) sum_i E[(M_i+N_i)^2 / (M_i N_i)] under random drop-out.

    K is hypergeometric (total, total*theta, total*(1-r)); M and N are
    multinomial splits of K and of the remaining survivors with probabilities
    m_i / total. Draws where some cluster has M_i = 0 or N_i = 0 have an
    infinite ratio and are dropped. Returns (mean, standard error, dropped).
    """
    from .randomization import make_rng

    m = np.asarray(sizes.sizes if isinstance(sizes, ClusterSizes) else sizes, dtype=np.int64)
    total = int(m.sum())
    target = round(total * theta)
    kept_n = round(total * (1.0 - r))
    rng = make_rng(seed)
    probs = m / total
    k = rng.hypergeometric(target, total - target, kept_n, size=draws)
    mm = rng.multinomial(k, probs)
    nn = rng.multinomial(kept_n - k, probs)
    ok = (mm > 0).all(axis=1) & (nn > 0).all(axis=1)
    ratio = ((mm + nn) ** 2 / np.where(mm * nn > 0, mm * nn, 1)).mean(axis=1)[ok]
    se = float(ratio.std(ddof=1) / math.sqrt(ratio.size)) if ratio.size > 1 else math.nan
    return float(ratio.mean()), se, int(draws - ok.sum())


# EPIC-style preset: 16 equal clusters of 40 planned participants, 25% drop-out,
# sigma_eps = 10, balanced arms (psi = 4 exactly).
EPIC = {"n_clusters": 16, "m_planned": 40, "r": 0.25, "sigma_eps": 10.0, "psi": 4.0}


def _epic_sizes() -> list[int]:
    return [EPIC["m_planned"]] * EPIC["n_clusters"]


def epic_preset_power(theta: float, delta: float, alpha: float = 0.05) -> float:
    return dropout_power(EPIC["r"], EPIC["m_planned"], delta, theta, _epic_sizes(),
                         EPIC["psi"], EPIC["sigma_eps"], alpha)


def epic_preset_size(theta: float, delta: float, power: float = 0.8,
                     alpha: float = 0.05) -> float:
    return dropout_min_size(EPIC["r"], delta, theta, _epic_sizes(), EPIC["psi"],
                            EPIC["sigma_eps"], power=power, alpha=alpha).raw


def psi_for_power(design: TrialDesign, method: str = "series", **kwargs) -> PsiEstimate:
    """psi for power work: the series when its preconditions hold, else exact."""
    from .randomization import compute_psi

    if method == "series" and not (design.balanced and design.n_clusters >= 4):
        return psi_exact(design.clusters, design.i1, **kwargs)
    return compute_psi(design.clusters, design.i1, method, **kwargs)
