import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rtworkflow.errors import DesignError
from rtworkflow.model import (
    LKJ,
    FixedEffects,
    HalfNormal,
    LatentEffects,
    Normal,
    ParameterVector,
    PriorSpec,
    RandomEffectBlock,
)
from rtworkflow.seeding import SeedSpec
from rtworkflow.simulate import (
    PAPER_DESIGN,
    draw_prior,
    generate_design,
    prior_predictive_ensemble,
    simulate_dataset,
    simulate_log_rt_matrix,
)

WEAK = PriorSpec.weakly_informative()


def test_paper_design_has_555_trials():
    d = generate_design(*PAPER_DESIGN)
    assert d.n_trials == 555
    assert len(d.trials) == 555


def test_two_by_two_has_one_trial_per_condition():
    d = generate_design(2, 2)
    np.testing.assert_array_equal(d.condition_counts("subject"), [[1, 1], [1, 1]])


@pytest.mark.parametrize("ns,ni", [(0, 3), (3, 0)])
def test_zero_counts_rejected(ns, ni):
    with pytest.raises(DesignError):
        generate_design(ns, ni)


def test_balance_exhaustively_up_to_ten():
    for ns in range(1, 11):
        for ni in range(1, 11):
            d = generate_design(ns, ni)
            for by in ("subject", "item"):
                c = d.condition_counts(by)
                assert np.all(np.abs(c[:, 0] - c[:, 1]) <= 1)
            cells = set(zip(d.subject.tolist(), d.item.tolist()))
            assert len(cells) == ns * ni


def test_point_mass_prior_returns_the_mean():
    prior = WEAK.replace(slope=Normal(0.3, 0.0), intercept=Normal(6.0, 0.0))
    theta = draw_prior(prior, generate_design(3, 3), 1, 0)
    assert theta.fixed.beta1 == 0.3
    assert theta.fixed.beta0 == 6.0


def test_slope_moments():
    rng = SeedSpec(5).rng(0)
    x = Normal(0.0, 0.05).sample(rng, 100_000)
    se_mean = 0.05 / math.sqrt(x.size)
    se_sd = 0.05 / math.sqrt(2 * (x.size - 1))
    assert abs(x.mean()) < 3 * se_mean
    assert abs(x.std(ddof=1) - 0.05) < 3 * se_sd


def test_half_normal_draws_are_positive_with_right_sd():
    x = HalfNormal(0.1).sample(np.random.default_rng(2), 100_000)
    assert np.all(x >= 0)
    assert stats.kstest(x, stats.halfnorm(scale=0.1).cdf).pvalue > 1e-3


def test_lkj_rho_histogram_matches_marginal():
    x = LKJ(2.0).sample(np.random.default_rng(3), 200_000)
    counts, edges = np.histogram(x, bins=20, range=(-1, 1))
    cdf = lambda r: 0.75 * (r - r**3 / 3)  # noqa: E731
    expected = x.size * (cdf(edges[1:]) - cdf(edges[:-1]))
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert stats.chi2.sf(chi2, 19) > 1e-3


def test_noiseless_effect_table_row():
    d = generate_design(2, 2)
    block = RandomEffectBlock(0.0, 0.0, 0.0)
    lat = LatentEffects(np.zeros((2, 2)), np.zeros((2, 2)))
    theta = ParameterVector(FixedEffects(6.0, 1.0), block, block, 1e-300, lat)
    data = simulate_dataset(theta, d, 0, 0)
    sr = data.rt_ms[d.so == -1]
    orr = data.rt_ms[d.so == 1]
    np.testing.assert_allclose(sr, math.exp(5), rtol=1e-12)
    np.testing.assert_allclose(orr, math.exp(7), rtol=1e-12)
    assert round(orr[0]) == 1097 and round(sr[0]) == 148
    assert round(orr[0]) - round(sr[0]) == 949
    assert orr[0] - sr[0] == pytest.approx(math.exp(7) - math.exp(5), rel=1e-12)


@given(st.integers(0, 2**32), st.integers(0, 500))
@settings(max_examples=25, deadline=None)
def test_simulated_rts_are_positive(seed, index):
    d = generate_design(4, 4)
    prior = PriorSpec.diffuse()
    theta = draw_prior(prior, d, seed, index)
    try:
        data = simulate_dataset(theta, d, seed, index)
    except DesignError:
        # exp of an extreme diffuse-prior location can overflow to inf; that is rejected, never returned
        return
    assert np.all(data.rt_ms > 0)


def test_no_effect_gives_equal_condition_means():
    d = generate_design(20, 20)
    block = RandomEffectBlock(0.1, 0.0, 0.0)
    rng = np.random.default_rng(0)
    lat = LatentEffects(np.column_stack([rng.normal(0, 0.1, 20), np.zeros(20)]), np.zeros((20, 2)))
    theta = ParameterVector(FixedEffects(6.0, 0.0), block, RandomEffectBlock(1e-3, 1e-3, 0.0), 0.5, lat)
    diffs = []
    for k in range(200):
        y = np.log(simulate_dataset(theta, d, 1, k).rt_ms)
        diffs.append(y[d.so == 1].mean() - y[d.so == -1].mean())
    diffs = np.array(diffs)
    assert abs(diffs.mean()) < 3 * diffs.std(ddof=1) / math.sqrt(diffs.size)


def test_ensemble_is_reproducible_and_index_local():
    d = generate_design(4, 3)
    a = prior_predictive_ensemble(WEAK, d, 5, 99)
    b = prior_predictive_ensemble(WEAK, d, 5, 99)
    for (ta, da), (tb, db) in zip(a, b):
        assert np.array_equal(ta.to_flat(), tb.to_flat())
        assert np.array_equal(da.rt_ms, db.rt_ms)
    # pair 3 alone, without generating pairs 0..2, is identical
    (t3, d3), = prior_predictive_ensemble(WEAK, d, 1, 99, start=3)
    assert np.array_equal(t3.to_flat(), a[3][0].to_flat())
    assert np.array_equal(d3.rt_ms, a[3][1].rt_ms)


def test_distinct_indices_give_distinct_streams():
    d = generate_design(4, 3)
    a = prior_predictive_ensemble(WEAK, d, 2, 99)
    assert not np.array_equal(a[0][1].rt_ms, a[1][1].rt_ms)


def test_ensemble_matrix_shape():
    assert simulate_log_rt_matrix(WEAK, generate_design(5, 4), 7, 0).shape == (7, 20)


def test_intercept_only_prior_predictive_moments():
    # only beta0 random: log rt ~ N(6, 0.6^2 + sigma^2) marginally
    prior = PriorSpec(Normal(6.0, 0.6), Normal(0.0, 0.0), HalfNormal(0.0), HalfNormal(0.0), HalfNormal(0.0),
                      HalfNormal(0.0), HalfNormal(0.0), LKJ(2.0), LKJ(2.0))
    d = generate_design(1, 1)
    sigma = 0.4
    ys = []
    for k in range(20_000):
        th = draw_prior(prior, d, 17, k)
        th = ParameterVector(th.fixed, th.subj_block, th.item_block, sigma, th.latents)
        ys.append(np.log(simulate_dataset(th, d, 17, k).rt_ms[0]))
    ys = np.array(ys)
    var = 0.6**2 + sigma**2
    assert abs(ys.mean() - 6.0) < 3 * math.sqrt(var / ys.size)
    assert abs(ys.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (ys.size - 1))
