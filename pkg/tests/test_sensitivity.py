import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtworkflow.conjugate import ConjugateNormal
from rtworkflow.hmc import SamplerConfig, sample
from rtworkflow.model import PriorSpec
from rtworkflow.seeding import SeedSpec
from rtworkflow.sensitivity import (
    LABELS,
    SensitivityRecord,
    classify,
    contraction,
    prior_sd,
    prior_sd_monte_carlo,
    summarize,
    zscore,
)

WEAK = PriorSpec.weakly_informative()
DIFFUSE = PriorSpec.diffuse()


def test_zscore_examples():
    assert zscore(0.3, 0.3, 0.1) == 0.0
    assert zscore(0.5, 0.3, 0.1) == pytest.approx(2.0)
    assert zscore(0.1, 0.3, 0.1) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        zscore(0.0, 0.0, 0.0)


def test_contraction_examples():
    assert contraction(0.05, 0.05) == 0.0
    assert contraction(1e-6, 0.05) == pytest.approx(1.0, abs=1e-9)
    assert contraction(0.023, 0.05) == pytest.approx(0.7884)
    assert contraction(0.1, 0.05) < 0
    with pytest.raises(ValueError):
        contraction(0.01, 0.0)


def test_prior_sd_closed_forms():
    assert prior_sd(WEAK, "beta1") == 0.05
    assert prior_sd(DIFFUSE, "sigma") == pytest.approx(math.sqrt(1 - 2 / math.pi), abs=1e-4)
    assert prior_sd(DIFFUSE, "sigma") == pytest.approx(0.6028, abs=1e-4)
    assert prior_sd(WEAK, "cor_subj") == pytest.approx(0.4472, abs=1e-4)
    assert prior_sd(WEAK, "subj_int[3]") == 0.1
    with pytest.raises(KeyError):
        prior_sd(WEAK, "nonsense")


@pytest.mark.parametrize("prior,parameter", [(WEAK, "beta1"), (DIFFUSE, "sigma"), (WEAK, "cor_item"),
                                             (WEAK, "item_so[0]"), (DIFFUSE, "sd_subj_so")])
def test_prior_sd_matches_monte_carlo(prior, parameter):
    sd, se = prior_sd_monte_carlo(prior, parameter, n=200_000, seed=SeedSpec(11))
    assert abs(sd - prior_sd(prior, parameter)) < 4 * se


@pytest.mark.parametrize("z,s,label", [
    (3.5, 0.9, "overfit"),
    (-3.0, 0.5, "overfit"),
    (3.5, 0.2, "prior_likelihood_conflict"),
    (0.4, 0.1, "poorly_identified"),
    (0.4, 0.9, "ideal"),
    (-1.99, 0.5, "ideal"),
    (2.0, 0.9, "intermediate"),
    (-2.9, 0.1, "intermediate"),
])
def test_classification_quadrants(z, s, label):
    assert classify(z, s) == label
    assert label in LABELS


@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(0.01, 5), st.floats(-10, 10), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_affine_invariance(theta, sd_post, sd_prior, shift, scale):
    mu = theta + 0.7 * sd_post
    z = zscore(mu, theta, sd_post)
    s = contraction(sd_post, sd_prior)
    z2 = zscore(scale * mu + shift, scale * theta + shift, scale * sd_post)
    s2 = contraction(scale * sd_post, scale * sd_prior)
    assert z2 == pytest.approx(z, rel=1e-9, abs=1e-9)
    assert s2 == pytest.approx(s, rel=1e-9, abs=1e-9)


@given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3))
@settings(max_examples=100, deadline=None)
def test_contraction_never_exceeds_one(sd_post, sd_prior):
    assert contraction(sd_post, sd_prior) <= 1.0


@pytest.mark.parametrize("n", [1, 5, 50])
def test_conjugate_contraction_matches_formula(n):
    model = ConjugateNormal(0.0, 0.5, 1.0)
    y = model.simulate(SeedSpec(n).rng(0), n)[1]
    _, sd = model.posterior(y)
    assert contraction(sd, 0.5) == pytest.approx(model.contraction(n), rel=1e-12)
    d = sample(model.target(y), SamplerConfig(iter=2000, seed=SeedSpec(n)))
    sampled = contraction(float(d["theta"].std()), 0.5)
    assert sampled == pytest.approx(model.contraction(n), abs=0.05)


def test_summarize():
    recs = [SensitivityRecord.build(i, "beta1", 0.0, mu, 0.02, 0.05) for i, mu in enumerate([0.01, -0.01, 0.07])]
    s = summarize(recs)
    assert s.n == 3
    assert s.mean_contraction == pytest.approx(1 - 0.16)
    assert s.mean_abs_z == pytest.approx((0.5 + 0.5 + 3.5) / 3)
    assert s.mean_z == pytest.approx(3.5 / 3)
    assert s.label_counts["overfit"] == 1 and s.label_counts["ideal"] == 2
    assert s.n_negative_contraction == 0
    with pytest.raises(ValueError):
        summarize(recs, "sigma")
    assert recs[2].to_dict()["label"] == "overfit"
