import math

import numpy as np
import pytest
from scipy import stats

from crt_hte.design import ClusterSizes, ModelParams, SubgroupSpec, TrialDesign, build_simulation_pattern
from crt_hte.errors import SimulationFailed
from crt_hte.simulate import (
    dropout_dataset,
    generate_dataset,
    operating_characteristics,
    operating_characteristics_sweep,
    simulate_stats,
)
from crt_hte.tables import type1_band

PARAMS = ModelParams(0.15, 0.25, 0.1, 0.35, rho=0.05)


def pattern_design(m_bar=20, q=1, theta=(0.5,)):
    sizes = build_simulation_pattern(q, m_bar)
    return TrialDesign(sizes, sizes.n_clusters // 2, SubgroupSpec(theta), 1.0)


def test_column_sums_fixed_over_seeds():
    d = pattern_design(40, theta=(0.25, 0.5))
    params = ModelParams(0, 0, (0, 0), (0, 0))
    expected = np.outer(d.clusters.as_array(), d.theta)
    for seed in range(100):
        data = generate_dataset(d, params, seed)
        np.testing.assert_array_equal(data.column_sums(), expected)
        np.testing.assert_array_equal(data.sizes, d.clusters.sizes)
        assert data.w.sum() == d.i1


def test_positions_are_shuffled_within_cluster():
    d = pattern_design(40)
    params = ModelParams(0, 0, 0, 0)
    first = [generate_dataset(d, params, s) for s in range(200)]
    # the first member of cluster 0 should be in the subgroup about half the time
    share = np.mean([data.labels[np.flatnonzero(data.cluster == 0)[0]] for data in first])
    assert 0.35 < share < 0.65


def test_noiseless_limit():
    d = TrialDesign(ClusterSizes((4, 8, 6, 2)), 2, SubgroupSpec((0.5,)), 1e-12)
    params = ModelParams(0.15, 0.25, 0.1, 0.35, rho=0.0)
    data = generate_dataset(d, params, 3)
    w = data.w[data.cluster]
    x = data.x[:, 0]
    mean = 0.15 + 0.25 * w + 0.1 * x + 0.35 * w * x
    np.testing.assert_allclose(data.y, mean, atol=1e-9)


def test_sample_mean_matches_expectation():
    n_clusters, m, rho = 100, 1000, 0.05
    d = TrialDesign(ClusterSizes((m,) * n_clusters), 50, SubgroupSpec((0.5,)), 1.0)
    data = generate_dataset(d, PARAMS.with_rho(rho), 17)
    expected = 0.15 + 0.25 / 2 + 0.5 * 0.1 + 0.5 * 0.35 / 2
    s2_gamma = rho / (1 - rho)
    se = math.sqrt(s2_gamma / n_clusters + 1.0 / (n_clusters * m))
    assert abs(data.y.mean() - expected) < 3 * se


def test_deterministic_given_seed():
    d = pattern_design()
    a = generate_dataset(d, PARAMS, 5)
    b = generate_dataset(d, PARAMS, 5)
    np.testing.assert_array_equal(a.y, b.y)
    c = generate_dataset(d, PARAMS, 6)
    assert not np.array_equal(a.y, c.y)


def test_dropout_totals():
    d = pattern_design(20)
    total = d.clusters.total
    for seed in range(200):
        data = dropout_dataset(d, PARAMS, 0.25, seed)
        assert data.y.size == total * 0.75
        assert data.column_sums()[:, 0].sum() == (data.labels == 1).sum()
        assert data.w.sum() == d.i1


def test_dropout_hypergeometric_mean():
    d = pattern_design(20)
    r, theta, total = 0.25, 0.5, d.clusters.total
    kept = int(total * (1 - r))
    ks = np.array([(dropout_dataset(d, PARAMS, r, s).labels == 1).sum() for s in range(10_000)])
    dist = stats.hypergeom(total, int(total * theta), kept)
    assert dist.mean() == pytest.approx(kept * theta)
    assert abs(ks.mean() - dist.mean()) < 3 * dist.std() / math.sqrt(ks.size)


def test_dropout_cluster_totals_follow_sizes():
    # survivors are spread over clusters in proportion to planned size
    d = pattern_design(20)
    sizes = np.array([dropout_dataset(d, PARAMS, 0.2, s).sizes for s in range(4000)])
    np.testing.assert_allclose(sizes.mean(axis=0), d.clusters.as_array() * 0.8, rtol=0.05)


def test_dropout_requires_integral_totals():
    d = pattern_design(20)
    with pytest.raises(ValueError):
        dropout_dataset(d, PARAMS, 0.33, 1)


def test_thread_count_does_not_change_results():
    d = pattern_design(20)
    a = operating_characteristics_sweep(d, PARAMS, [0.05, 0.5], 150, 9, threads=1)
    b = operating_characteristics_sweep(d, PARAMS, [0.05, 0.5], 150, 9, threads=4)
    assert a == b


def test_common_draws_make_rho_rows_agree():
    d = pattern_design(40)
    ocs = operating_characteristics_sweep(d, PARAMS, [0.05, 0.5, 0.95], 300, 21)
    esd = [oc.esd[0] for oc in ocs]
    power = [oc.power for oc in ocs]
    assert max(esd) - min(esd) < 1e-4
    assert max(power) - min(power) < 0.005


def test_common_draws_across_null_and_alternative():
    d = pattern_design(20)
    null, alt = simulate_stats(d, [PARAMS.with_beta4(0.0), PARAMS], 5, 2)
    np.testing.assert_array_equal(null.uu, alt.uu)
    np.testing.assert_array_equal(null.w, alt.w)
    assert not np.array_equal(null.uy, alt.uy)


def test_calibration_under_null():
    d = pattern_design(40)
    oc = operating_characteristics(d, PARAMS.with_beta4(0.0), 1000, seed=4)
    lo, hi = type1_band(0.05, oc.replicates)
    assert lo <= oc.type1 <= hi
    assert oc.predicted == 0.05


def test_multivariate_operating_characteristics():
    d = pattern_design(40, theta=(0.25, 0.5))
    params = ModelParams(0.15, 0.25, (0.1, 0.1), (0.3, 0.0), rho=0.2)
    oc = operating_characteristics(d, params, 400, seed=8)
    assert len(oc.esd) == 2 and len(oc.se_bar) == 2
    assert 0.0 <= oc.type1 <= 0.12
    assert abs(oc.power - oc.predicted) < 0.1


def test_all_failed_raises():
    d = TrialDesign(ClusterSizes((2, 2, 2, 2)), 2, SubgroupSpec((0.5,)), 1.0)
    with pytest.raises(SimulationFailed):
        operating_characteristics(d, PARAMS, 20, seed=1, dropout=0.75)


def test_too_few_replicates():
    with pytest.raises(ValueError):
        operating_characteristics(pattern_design(), PARAMS, 1)
