import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crt_hte.design import ClusterSizes, SubgroupSpec, TrialDesign, build_simulation_pattern
from crt_hte.errors import NoRootInBracket, NotUnivariate, SingularTheta
from crt_hte.gls import beta4_variance_exact, beta4_variance_from_information
from crt_hte.power import (
    computed_se,
    detectable_delta,
    dropout_bracket,
    dropout_bracket_mc,
    dropout_detectable_delta,
    dropout_min_size,
    dropout_power,
    epic_preset_power,
    epic_preset_size,
    min_avg_cluster_size,
    noncentrality,
    omega4,
    power_chisq,
    power_wald_1d,
    required_m_bar,
    round_to_multiple,
    sigma4_equal_reference,
    sigma4_unequal_reference,
    size_spread_term,
    solve_equalizer,
    theta_information,
    theta_precision,
    var_beta2,
    var_beta4_conditional,
)
from crt_hte.randomization import iter_assignments, psi_approx, wbar

PSI = 4.380022321428571
Z = stats.norm.ppf(0.975) + stats.norm.ppf(0.8)
PATTERN = build_simulation_pattern(1, 20)


def design(sizes, theta=(0.5,), i1=None, sigma=1.0):
    sizes = tuple(sizes)
    return TrialDesign(ClusterSizes(sizes), i1 or len(sizes) // 2, SubgroupSpec(tuple(theta)), sigma)


def random_fixed_prevalence(rng, p):
    # pick theta on a grid with denominator g, then sizes as multiples of g
    g = int(rng.choice([4, 6, 8, 10]))
    while True:
        nums = rng.integers(1, g, size=p)
        if nums.sum() < g:
            break
    theta = tuple(Fraction(int(k), g) for k in nums)
    n = int(rng.integers(4, 9))
    sizes = tuple(int(g * k) for k in rng.integers(1, 6, size=n))
    counts = [[int(m * t) for t in theta] for m in sizes]
    w = np.zeros(n, dtype=int)
    w[rng.permutation(n)[: int(rng.integers(1, n))]] = 1
    return sizes, theta, counts, w


def test_round_to_multiple():
    assert round_to_multiple(327.4, 20) == 320
    assert round_to_multiple(176.3, 10) == 180
    assert round_to_multiple(85.0, 10) == 90
    assert round_to_multiple(84.01, 4, "ceil") == 88
    assert round_to_multiple(84.0, 4, "ceil") == 84
    with pytest.raises(ValueError):
        round_to_multiple(10, 0)


def test_theta_precision_is_inverse():
    t = [0.1, 0.25, 0.3]
    np.testing.assert_allclose(theta_precision(t) @ theta_information(t), np.eye(3), atol=1e-12)
    with pytest.raises(SingularTheta):
        theta_precision([0.5, 0.5])


@pytest.mark.parametrize("p", [1, 2, 3])
def test_beta4_block_exact_rational(p):
    rng = np.random.default_rng(100 + p)
    for _ in range(4):
        sizes, theta, counts, w = random_fixed_prevalence(rng, p)
        total = sum(sizes)
        wb = Fraction(sum(m for m, wi in zip(sizes, w) if wi), total)
        t = list(theta)
        prec = [[(1 / t[a] if a == b else 0) + 1 / (1 - sum(t)) for b in range(p)] for a in range(p)]
        expected = [[v / (total * wb * (1 - wb)) for v in row] for row in prec]
        for rho in (Fraction(0), Fraction(1, 20), Fraction(1, 2), Fraction(19, 20)):
            assert beta4_variance_exact(sizes, counts, w, rho) == expected


def test_beta4_block_floating_point():
    rng = np.random.default_rng(7)
    for _ in range(10):
        p = int(rng.integers(1, 4))
        sizes, theta, counts, w = random_fixed_prevalence(rng, p)
        d = design(sizes, [float(t) for t in theta], i1=int(w.sum()))
        expected = var_beta4_conditional(d, w)
        for rho in (0.0, 0.05, 0.5, 0.95):
            got = beta4_variance_from_information(sizes, np.array(counts), w, rho, 1.0)
            np.testing.assert_allclose(got, expected, rtol=1e-10)


def test_omega4_averages_conditional_variance():
    d = design(PATTERN.sizes)
    mean_inv = np.mean([1 / (wbar(PATTERN, w) * (1 - wbar(PATTERN, w)))
                        for w in iter_assignments(8, 4)])
    cond = np.mean([var_beta4_conditional(d, w) for w in iter_assignments(8, 4)], axis=0)
    np.testing.assert_allclose(omega4(d, mean_inv), cond, rtol=1e-12)


def test_cse_table_values():
    for m_bar, q, cse in ((20, 1, 0.3309), (40, 1, 0.2340), (60, 3, 0.1068)):
        sizes = build_simulation_pattern(q, m_bar)
        d = design(sizes.sizes)
        assert computed_se(d, psi_approx(sizes))[0] == pytest.approx(cse, abs=5e-5)


def test_wald_power_against_scipy():
    d = design(build_simulation_pattern(1, 140).sizes)
    se = math.sqrt(PSI / (8 * 140 * 0.25))
    expected = stats.norm.cdf(stats.norm.ppf(0.025) + 0.35 / se)
    assert power_wald_1d(0.35, d, PSI) == pytest.approx(expected, rel=1e-12)
    assert power_wald_1d(-0.35, d, PSI) == power_wald_1d(0.35, d, PSI)


@settings(max_examples=60, deadline=None)
@given(delta=st.floats(0.05, 1.5), m=st.integers(2, 200))
def test_chisq_p1_is_two_sided_wald(delta, m):
    d = design(build_simulation_pattern(1, 2 * m).sizes)
    se = math.sqrt(PSI / (8 * 2 * m * 0.25))
    z = stats.norm.ppf(0.975)
    two_sided = stats.norm.cdf(-z + delta / se) + stats.norm.cdf(-z - delta / se)
    assert power_chisq(delta, d, PSI) == pytest.approx(two_sided, abs=1e-7)
    one_tail = power_wald_1d(delta, d, PSI)
    if one_tail >= 0.5:
        # the noncentral tail is summed to 1e-12, hence the small negative slack
        assert -1e-12 <= power_chisq(delta, d, PSI) - one_tail < 1e-4


def test_chisq_multivariate_against_scipy():
    d = design([8, 16, 8, 24], theta=(0.25, 0.5))
    lam = noncentrality([0.4, 0.1], d, 4.2)
    crit = stats.chi2.ppf(0.95, 2)
    assert power_chisq([0.4, 0.1], d, 4.2) == pytest.approx(stats.ncx2.sf(crit, 2, lam), rel=1e-8)


def test_power_monotone_on_grid():
    base = dict(delta=0.3, n=8, m=40, psi=4.5)

    def pw(delta, n, m, psi):
        return power_wald_1d(delta, design([m] * n), psi)

    ref = pw(**base)
    assert pw(**dict(base, delta=0.35)) > ref
    assert pw(**dict(base, n=10)) > ref
    assert pw(**dict(base, m=44)) > ref
    assert pw(**dict(base, psi=4.8)) < ref
    grid = [pw(d, 8, 40, 4.5) for d in np.linspace(0.05, 1.0, 40)]
    assert all(b > a for a, b in zip(grid, grid[1:]))
    for lam_delta in np.linspace(0.1, 1, 10):
        d2 = design([40] * 8, theta=(0.25, 0.25))
        assert power_chisq([lam_delta, 0], d2, 4.5) < power_chisq([lam_delta + 0.05, 0], d2, 4.5)


def test_balanced_prevalence_is_optimal():
    thetas = np.linspace(0.05, 0.95, 91)
    powers = [power_wald_1d(0.3, design([40] * 8, theta=(t,)), 4.4) for t in thetas]
    assert thetas[int(np.argmax(powers))] == pytest.approx(0.5)


def test_balanced_wbar_minimizes_conditional_variance():
    d = design(PATTERN.sizes)
    best = min(iter_assignments(8, 4), key=lambda w: var_beta4_conditional(d, w)[0, 0])
    closest = min(abs(wbar(PATTERN, w) - 0.5) for w in iter_assignments(8, 4))
    assert abs(wbar(PATTERN, best) - 0.5) == pytest.approx(closest)
    assert var_beta4_conditional(design([5, 5, 5, 5]), [1, 1, 0, 0])[0, 0] == pytest.approx(
        1 / (20 * 0.25) * 4)


def test_required_size_examples():
    assert min_avg_cluster_size(0.35, 8, 0.5, 1.0, PSI, 4).rounded == 140
    r = min_avg_cluster_size(0.35, 8, 0.5, 1.0, PSI, 4)
    assert r.raw == pytest.approx(140.32, abs=0.01)
    t = min_avg_cluster_size(0.25, 8, 0.3, 1.0, PSI, 20)
    assert (round(t.raw, 1), t.rounded) == (327.4, 320)
    psi2 = psi_approx(build_simulation_pattern(2, 20)).value
    q2 = min_avg_cluster_size(0.25, 16, 0.5, 1.0, psi2, 4)
    assert psi2 == pytest.approx(4.1650, abs=1e-4)
    assert (round(q2.raw, 1), q2.rounded) == (130.8, 132)
    with pytest.raises(NotUnivariate):
        required_m_bar(0.3, 8, (0.2, 0.3), 1.0, PSI)


@settings(max_examples=50, deadline=None)
@given(delta=st.floats(0.05, 2.0), n=st.integers(2, 50), theta=st.floats(0.05, 0.95),
       sigma=st.floats(0.1, 20), psi=st.floats(4.0, 30.0), power=st.floats(0.2, 0.99))
def test_required_size_hits_target(delta, n, theta, sigma, psi, power):
    m = required_m_bar(delta, n, theta, sigma, psi, power)
    se = math.sqrt(psi * sigma**2 / (n * m * theta * (1 - theta)))
    assert stats.norm.cdf(stats.norm.ppf(0.025) + delta / se) == pytest.approx(power, abs=1e-9)
    assert detectable_delta(n, m, theta, sigma, psi, power) == pytest.approx(delta, rel=1e-9)


def test_reduction_chain_constant_sizes():
    rho, theta, sigma = 0.3, 0.25, 1.3
    for m in (4, 8, 20):
        sizes = [m] * 6
        w = [1, 0, 1, 0, 0, 1]
        wb = wbar(sizes, w)
        s2yx = sigma**2 / (1 - rho)
        ref = sigma4_unequal_reference(sizes, rho, [-1 / (m - 1)] * 6, wb, s2yx, theta * (1 - theta))
        d = design(sizes, theta=(theta,), sigma=sigma)
        heuristic = omega4(d, 1 / (wb * (1 - wb)))[0, 0] * 6
        assert ref == pytest.approx(heuristic, rel=1e-10)
        eq = sigma4_equal_reference(m, rho, -1 / (m - 1), wb, s2yx, theta * (1 - theta))
        assert eq == pytest.approx(ref, rel=1e-10)


def test_unequal_reference_reduces_to_equal():
    for rho_x in (0.0, 0.2, -0.1):
        a = sigma4_equal_reference(12, 0.1, rho_x, 0.5, 1.0, 0.25)
        b = sigma4_unequal_reference([12] * 5, 0.1, rho_x, 0.5, 1.0, 0.25)
        assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=30, deadline=None)
# strictness needs m_i > 1: a singleton cluster has sigma^2/m + sigma_gamma^2 = sigma_{y|x}^2
@given(sizes=st.lists(st.integers(2, 50), min_size=4, max_size=9), rho=st.floats(0.01, 0.95),
       sigma=st.floats(0.2, 5.0))
def test_var_beta2_bounds_strict(sizes, rho, sigma):
    d = TrialDesign(ClusterSizes(tuple(sizes)), len(sizes) // 2, SubgroupSpec((0.5,)), sigma)
    value, lo, hi = var_beta2(d, rho)
    assert lo < value < hi


def test_dropout_reduced_constant():
    # the simulation pattern: sum(mbar/m_i) - 1 = 10.9, halved in the reduced form
    assert size_spread_term(PATTERN) == pytest.approx(10.9)
    br = dropout_bracket(0.2, 0.5, PATTERN, "printed")
    assert br.a == 4.0
    assert br(100.0) == pytest.approx(4 + (0.2 + 5.45) / (2 * 100 * 0.8))


def test_dropout_examples():
    r = dropout_min_size(0.2, 0.35, 0.5, PATTERN, PSI, multiple=10, form="printed")
    assert (round(r.raw, 1), r.rounded) == (176.3, 180)
    r = dropout_min_size(0.25, 0.45, 0.5, PATTERN, PSI, multiple=4, form="printed")
    assert r.rounded == 116
    assert dropout_power(0.25, 368, 0.25, 0.5, PATTERN, PSI) == pytest.approx(0.7994, abs=2e-3)
    assert dropout_power(0.3, 120, 0.45, 0.5, PATTERN, PSI) == pytest.approx(0.7893, abs=2e-3)


@pytest.mark.parametrize("form", ["literal", "printed"])
def test_dropout_root_solves_equation(form):
    for r in (0.05, 0.2, 0.4):
        res = dropout_min_size(r, 0.3, 0.4, PATTERN, PSI, sigma_eps=1.5, form=form)
        assert dropout_power(r, res.raw, 0.3, 0.4, PATTERN, PSI, 1.5, form=form) == pytest.approx(0.8, abs=1e-10)
        assert dropout_detectable_delta(r, res.raw, 0.4, PATTERN, PSI, 1.5, form=form) == pytest.approx(0.3)


def test_dropout_small_rate_limit():
    tiny = dropout_min_size(1e-9, 0.25, 0.5, PATTERN, PSI, form="printed").raw
    plain = required_m_bar(0.25, 8, 0.5, 1.0, PSI)
    br = dropout_bracket(1e-9, 0.5, PATTERN, "printed")
    # the r -> 0 bracket is 4 + 5.45/(2 mbar), a finite-size correction over the plain size
    assert tiny == pytest.approx(plain * br(tiny) / 4, rel=1e-8)
    big = 1e6
    assert dropout_power(1e-9, big, 0.01, 0.5, PATTERN, PSI) == pytest.approx(
        power_wald_1d(0.01, design(build_simulation_pattern(1, 2 * int(big // 2)).sizes), PSI), abs=1e-5)


def test_dropout_monte_carlo_bracket_favours_literal_form():
    sizes = build_simulation_pattern(1, 200)
    mean, se, dropped = dropout_bracket_mc(0.2, 0.5, sizes, 40_000, seed=3)
    literal = dropout_bracket(0.2, 0.5, sizes, "literal")(200)
    printed = dropout_bracket(0.2, 0.5, sizes, "printed")(200)
    assert dropped == 0
    assert abs(mean - literal) < abs(mean - printed)


def test_equalizer_solves_total_equation():
    fixed = [3] * 39
    res = solve_equalizer(fixed, 0.27538, 1 / 3, 0.49)
    sizes = np.append(fixed, res.m_last)
    need = psi_approx(sizes).value * 0.49**2 * Z**2 / ((2 / 9) * 0.27538**2)
    assert sizes.sum() == pytest.approx(need, rel=1e-8)
    assert res.m_last == pytest.approx(963, abs=0.5)
    res = solve_equalizer([4] * 21, 0.62336, 0.25, 0.91)
    assert res.m_last == pytest.approx(796, abs=0.5)


def test_equalizer_equal_sizes_reduce_to_closed_form():
    # with fixed sizes already at the closed-form mbar the root is that same size
    m = required_m_bar(0.3, 8, 0.5, 1.0, 4.0)
    res = solve_equalizer([m] * 7, 0.3, 0.5, 1.0)
    assert res.m_last == pytest.approx(m, rel=1e-7)


def test_equalizer_no_root():
    with pytest.raises(NoRootInBracket):
        solve_equalizer([3] * 39, 0.01, 1 / 3, 0.49, upper=2000)


def test_epic_preset_against_printed_formulas():
    z0 = stats.norm.ppf(0.025)
    for d in (2.5, 6.13, 10.0):
        expected = stats.norm.cdf(z0 + d / 10 * math.sqrt(120 / (16 / 3 + 15.25 * 28 / 1080)))
        assert epic_preset_power(0.25, d) == pytest.approx(expected, rel=1e-12)
        m = epic_preset_size(0.25, d)
        rhs = Z**2 * 100 / (3 * d**2) * (16 / 3 + 15.25 * 28 / (27 * m))
        assert m == pytest.approx(rhs, rel=1e-10)
    assert epic_preset_power(0.25, 6.13) == pytest.approx(0.80, abs=2e-3)
    powers = [epic_preset_power(t, 5.0) for t in np.linspace(0.05, 0.95, 91)]
    assert np.linspace(0.05, 0.95, 91)[int(np.argmax(powers))] == pytest.approx(0.5)
