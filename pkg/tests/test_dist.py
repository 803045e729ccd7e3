import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from crt_hte.dist import (
    NoncentralChiSq,
    chisq_cdf,
    chisq_quantile,
    chisq_sf,
    gamma_p,
    gamma_q,
    noncentral_chisq_sf,
    normal_cdf,
    normal_quantile,
)
from crt_hte.errors import DomainError


@pytest.mark.parametrize("x", [-8.0, -3.2, -1.959964, -0.5, 0.0, 0.3, 1.0, 2.5, 6.0])
def test_normal_cdf_matches_scipy(x):
    assert normal_cdf(x) == pytest.approx(stats.norm.cdf(x), rel=1e-13, abs=1e-300)


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.001, 0.025, 0.2, 0.5, 0.8, 0.975, 0.999999])
def test_normal_quantile_matches_scipy(p):
    assert normal_quantile(p) == pytest.approx(stats.norm.ppf(p), rel=1e-12, abs=1e-14)


def test_normal_quantile_domain():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            normal_quantile(p)


def test_standard_quantiles():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-13)
    assert normal_quantile(0.8) == pytest.approx(0.8416212335729143, abs=1e-13)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.05, 200.0), x=st.floats(0.0, 400.0))
def test_incomplete_gamma_matches_scipy(a, x):
    assert gamma_p(a, x) == pytest.approx(special.gammainc(a, x), rel=1e-10, abs=1e-14)
    assert gamma_q(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-10, abs=1e-14)


def test_central_chisq_at_quantile():
    assert chisq_sf(3.841459, 1) == pytest.approx(0.05, abs=1e-6)
    assert chisq_cdf(3.841459, 1) == pytest.approx(0.95, abs=1e-6)


@pytest.mark.parametrize("df", [1, 2, 3, 7, 30])
@pytest.mark.parametrize("p", [0.5, 0.9, 0.95, 0.99])
def test_chisq_quantile_matches_scipy(df, p):
    assert chisq_quantile(p, df) == pytest.approx(stats.chi2.ppf(p, df), rel=1e-9)


@settings(max_examples=150, deadline=None)
@given(df=st.integers(1, 6), lam=st.floats(0.0, 60.0), x=st.floats(0.01, 120.0))
def test_noncentral_sf_matches_scipy(df, lam, x):
    expected = stats.ncx2.sf(x, df, lam) if lam > 0 else stats.chi2.sf(x, df)
    assert noncentral_chisq_sf(x, df, lam) == pytest.approx(expected, rel=1e-7, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(z=st.floats(0.1, 4.0), delta=st.floats(0.0, 8.0))
def test_noncentral_df1_equals_two_normal_tails(z, delta):
    # a squared N(delta, 1) exceeds z^2 when it falls outside [-z, z]
    two_tails = normal_cdf(-z + delta) + normal_cdf(-z - delta)
    assert noncentral_chisq_sf(z * z, 1, delta * delta) == pytest.approx(two_tails, abs=1e-6)


def test_noncentral_object():
    d = NoncentralChiSq(2, 5.0)
    assert d.sf(4.0) + d.cdf(4.0) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        NoncentralChiSq(0, 1.0)
    with pytest.raises(DomainError):
        noncentral_chisq_sf(1.0, 1, -1.0)


def test_noncentral_edges():
    assert noncentral_chisq_sf(0.0, 3, 2.0) == 1.0
    assert noncentral_chisq_sf(math.inf, 3, 2.0) == 0.0
