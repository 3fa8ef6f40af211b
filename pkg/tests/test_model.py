import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rtworkflow.errors import BoundaryError, DesignError, OutOfSupportError
from rtworkflow.model import (
    LKJ,
    Dataset,
    ExperimentDesign,
    FixedEffects,
    HalfNormal,
    LatentEffects,
    ModelTarget,
    Normal,
    ParameterVector,
    PreconditionedTarget,
    PriorSpec,
    RandomEffectBlock,
    centered_to_noncentered,
    constrain_draws,
    log_jacobian,
    log_jacobian_sd,
    log_joint_unconstrained,
    log_likelihood,
    log_prior,
    model_variant,
    noncentered_to_centered,
    to_constrained,
    to_unconstrained,
)
from rtworkflow.simulate import draw_prior, generate_design, simulate_dataset

WEAK = PriorSpec.weakly_informative()
DIFFUSE = PriorSpec.diffuse()


def one_trial_params(beta0=6.0, beta1=0.0, sigma=0.5, n_subjects=1, n_items=1):
    block = RandomEffectBlock(0.1, 0.1, 0.0)
    lat = LatentEffects(np.zeros((n_subjects, 2)), np.zeros((n_items, 2)))
    return ParameterVector(FixedEffects(beta0, beta1), block, block, sigma, lat)


def single_design(so=-1):
    return ExperimentDesign(1, 1, np.array([0]), np.array([0]), np.array([so]))


def central_difference(f, q, h=1e-5):
    g = np.empty_like(q)
    for j in range(q.size):
        e = np.zeros_like(q)
        e[j] = h
        g[j] = (f(q + e) - f(q - e)) / (2 * h)
    return g


# --- design and data types ---------------------------------------------------


def test_design_rejects_duplicate_cells():
    with pytest.raises(DesignError):
        ExperimentDesign(1, 1, np.array([0, 0]), np.array([0, 0]), np.array([-1, 1]))


def test_design_rejects_bad_condition_code():
    with pytest.raises(DesignError):
        ExperimentDesign(1, 1, np.array([0]), np.array([0]), np.array([0]))


def test_dataset_requires_positive_rts():
    with pytest.raises(DesignError):
        Dataset(single_design(), np.array([0.0]))
    with pytest.raises(DesignError):
        Dataset(single_design(), np.array([np.inf]))


def test_dataset_length_must_match_design():
    with pytest.raises(DesignError):
        Dataset(single_design(), np.array([300.0, 400.0]))


# --- likelihood ----------------------------------------------------------------


def test_single_trial_log_likelihood():
    data = Dataset(single_design(), np.array([math.exp(6.0)]))
    ll = log_likelihood(data, one_trial_params())
    assert ll == pytest.approx(-6.22579, abs=5e-6)
    assert ll == pytest.approx(-6.0 - math.log(0.5 * math.sqrt(2 * math.pi)), rel=1e-14)


def test_two_identical_trials_double_the_value():
    d1 = Dataset(single_design(), np.array([math.exp(6.0)]))
    design = ExperimentDesign(1, 2, np.array([0, 0]), np.array([0, 1]), np.array([-1, -1]), require_balance=False)
    d2 = Dataset(design, np.array([math.exp(6.0)] * 2))
    p2 = one_trial_params(n_items=2)
    assert log_likelihood(d2, p2) == 2 * log_likelihood(d1, one_trial_params())


def test_one_scale_unit_off_costs_half_on_the_standardised_scale():
    # compare the normal kernel for log rt: density of log y is lognormal density times y
    p = one_trial_params(sigma=0.5)
    at_mu = Dataset(single_design(), np.array([math.exp(6.0)]))
    off = Dataset(single_design(), np.array([math.exp(6.5)]))
    diff = (log_likelihood(off, p) + 6.5) - (log_likelihood(at_mu, p) + 6.0)
    assert diff == pytest.approx(-0.5, abs=1e-12)


def test_log_likelihood_matches_scipy_lognormal():
    design = generate_design(4, 3)
    theta = draw_prior(WEAK, design, 7, 0)
    data = simulate_dataset(theta, design, 7, 0)
    mu = theta.linear_predictor(design)
    ref = stats.lognorm.logpdf(data.rt_ms, s=theta.sigma_rt, scale=np.exp(mu)).sum()
    assert log_likelihood(data, theta) == pytest.approx(ref, rel=1e-12)


def test_zero_sigma_is_reported_as_underflow():
    from rtworkflow.errors import DensityUnderflowError

    data = Dataset(single_design(), np.array([300.0]))
    with pytest.raises(DensityUnderflowError):
        log_likelihood(data, one_trial_params(sigma=0.0))


def test_likelihood_is_permutation_invariant():
    design = generate_design(5, 4)
    theta = draw_prior(WEAK, design, 3, 1)
    data = simulate_dataset(theta, design, 3, 1)
    perm = np.random.default_rng(0).permutation(design.n_trials)
    pd = ExperimentDesign(design.n_subjects, design.n_items, design.subject[perm], design.item[perm],
                          design.so[perm])
    assert log_likelihood(Dataset(pd, data.rt_ms[perm]), theta) == pytest.approx(
        log_likelihood(data, theta), rel=1e-13)


@given(st.floats(0.01, 100.0))
@settings(max_examples=30, deadline=None)
def test_rescaling_rts_with_shifted_intercept(c):
    design = generate_design(3, 4)
    theta = draw_prior(WEAK, design, 11, 0)
    data = simulate_dataset(theta, design, 11, 0)
    shifted = ParameterVector(FixedEffects(theta.fixed.beta0 + math.log(c), theta.fixed.beta1), theta.subj_block,
                              theta.item_block, theta.sigma_rt, theta.latents)
    lhs = log_likelihood(Dataset(design, data.rt_ms * c), shifted)
    rhs = log_likelihood(data, theta) - design.n_trials * math.log(c)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-8)


# --- prior ---------------------------------------------------------------------


def test_lkj_at_zero():
    assert LKJ(2.0).logpdf(0.0) == pytest.approx(math.log(0.75), rel=1e-14)


def test_lkj_normaliser_by_quadrature():
    for eta in (0.5, 1.0, 2.0, 5.0):
        area, _ = integrate.quad(lambda r: math.exp(LKJ(eta).logpdf(r)), -1, 1)
        assert area == pytest.approx(1.0, abs=1e-7)


def test_normal_density_at_mean():
    assert Normal(0.0, 0.05).logpdf(0.0) == pytest.approx(-math.log(0.05 * math.sqrt(2 * math.pi)), rel=1e-14)


def test_half_normal_negative_is_out_of_support():
    with pytest.raises(OutOfSupportError):
        HalfNormal(1.0).logpdf(-0.1)


def test_lkj_boundary_is_out_of_support():
    with pytest.raises(OutOfSupportError):
        LKJ(2.0).logpdf(1.0)


@pytest.mark.parametrize("family", [Normal(6.0, 0.6), Normal(0.0, 0.05), HalfNormal(0.1), HalfNormal(1.0),
                                    LKJ(2.0)])
def test_each_prior_block_integrates_to_one(family):
    # importance sampling with a wide proposal; MC error well below 1%
    rng = np.random.default_rng(1)
    if isinstance(family, LKJ):
        x = rng.uniform(-1, 1, 200_000)
        logq = np.full_like(x, -math.log(2.0))
    elif isinstance(family, HalfNormal):
        scale = 2 * family.sd
        x = rng.exponential(scale, 200_000)
        logq = stats.expon.logpdf(x, scale=scale)
    else:
        x = rng.normal(family.mean, 2 * family.sd, 200_000)
        logq = stats.norm.logpdf(x, family.mean, 2 * family.sd)
    w = np.exp(family.logpdf(x) - logq)
    est, se = w.mean(), w.std() / math.sqrt(w.size)
    assert se < 0.005
    assert est == pytest.approx(1.0, abs=max(0.01, 4 * se))


def test_log_prior_sums_the_blocks():
    design = generate_design(3, 2)
    theta = draw_prior(WEAK, design, 5, 0)
    z = to_unconstrained(theta)[9:]
    s = theta.structural()
    expected = (stats.norm.logpdf(s["beta0"], 6, 0.6) + stats.norm.logpdf(s["beta1"], 0, 0.05)
                + sum(stats.halfnorm.logpdf(s[k], scale=0.1) for k in
                      ("sd_subj_int", "sd_subj_so", "sd_item_int", "sd_item_so"))
                + stats.halfnorm.logpdf(s["sigma"], scale=0.5)
                + LKJ(2.0).logpdf(s["cor_subj"]) + LKJ(2.0).logpdf(s["cor_item"])
                + stats.norm.logpdf(z).sum())
    assert log_prior(theta, WEAK) == pytest.approx(expected, rel=1e-12)


def test_prior_spec_round_trips_through_dict():
    for p in (WEAK, DIFFUSE):
        assert PriorSpec.from_dict(p.to_dict()) == p


def test_unknown_preset():
    with pytest.raises(KeyError):
        PriorSpec.preset("flat")


# --- transforms ----------------------------------------------------------------


def test_unit_sigma_and_zero_rho_map_to_zero():
    block = RandomEffectBlock(1.0, 1.0, 0.0)
    lat = LatentEffects(np.zeros((1, 2)), np.zeros((1, 2)))
    q = to_unconstrained(ParameterVector(FixedEffects(0.0, 0.0), block, block, 1.0, lat))
    assert np.all(q[2:9] == 0.0)


@pytest.mark.parametrize("bad", [dict(sigma=0.0), dict(sd=0.0), dict(rho=1.0)])
def test_boundary_values_are_rejected(bad):
    if "rho" in bad:
        with pytest.raises(OutOfSupportError):
            RandomEffectBlock(0.1, 0.1, bad["rho"])
        return
    block = RandomEffectBlock(bad.get("sd", 0.1), 0.1, 0.0)
    lat = LatentEffects(np.zeros((1, 2)), np.zeros((1, 2)))
    p = ParameterVector(FixedEffects(6.0, 0.0), block, block, bad.get("sigma", 0.5), lat)
    with pytest.raises(BoundaryError):
        to_unconstrained(p)


def test_underflowing_sd_is_a_boundary_error():
    design = generate_design(2, 2)
    q = np.zeros(model_variant(True).n_params(design))
    q[2] = -800.0
    with pytest.raises(BoundaryError):
        to_constrained(q, design)


@given(st.integers(0, 10_000), st.booleans())
@settings(max_examples=40, deadline=None)
def test_round_trip_constrained_unconstrained(index, slope):
    design = generate_design(4, 3)
    theta = draw_prior(WEAK, design, 123, index, include_slope=slope)
    q = to_unconstrained(theta)
    back = to_constrained(q, design)
    a, b = theta.to_flat(), back.to_flat()
    np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(to_unconstrained(back), q, rtol=1e-12, atol=1e-12)


def test_vectorised_constraint_matches_scalar():
    design = generate_design(5, 4)
    v = model_variant(True)
    Q = np.random.default_rng(2).normal(size=(6, v.n_params(design)))
    C = constrain_draws(Q, design, v)
    for row, q in zip(C, Q):
        np.testing.assert_allclose(row, to_constrained(q, design, v).to_flat(), rtol=1e-13, atol=1e-15)


def test_parameter_counts():
    design = generate_design(37, 15)
    full, null = model_variant(True), model_variant(False)
    assert full.n_params(design) == 113
    assert null.n_params(design) == 112
    assert "beta1" not in null.param_names(design)


def test_variants_share_random_effect_priors():
    design = generate_design(3, 3)
    th = draw_prior(WEAK, design, 9, 0, include_slope=True)
    th0 = ParameterVector(FixedEffects(th.fixed.beta0), th.subj_block, th.item_block, th.sigma_rt, th.latents)
    diff = log_prior(th, WEAK) - log_prior(th0, WEAK)
    assert diff == pytest.approx(WEAK.slope.logpdf(th.fixed.beta1), rel=1e-12)


# --- joint density and gradient -----------------------------------------------


def _interior_points(design, variant, n, seed):
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        q = rng.normal(0, 0.5, variant.n_params(design))
        k = 1 if variant.include_slope else 0
        q[0] = 6.0 + rng.normal(0, 0.3)
        q[k + 1:k + 8] += np.array([-2, -2, 0, -2, -2, 0, -1.0])
        pts.append(q)
    return pts


@pytest.mark.parametrize("slope", [True, False])
@pytest.mark.parametrize("prior", [WEAK, DIFFUSE], ids=["weak", "diffuse"])
def test_gradient_matches_central_differences(slope, prior):
    design = generate_design(6, 4)
    variant = model_variant(slope)
    data = simulate_dataset(draw_prior(prior, design, 1, 0, slope), design, 1, 0)
    target = ModelTarget(data, prior, variant)
    for q in _interior_points(design, variant, 5, 3):
        lp, g = target(q)
        fd = central_difference(lambda x: target(x)[0], q)
        assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-6


def test_joint_equals_likelihood_plus_prior_plus_jacobian():
    design = generate_design(5, 4)
    variant = model_variant(True)
    theta = draw_prior(WEAK, design, 4, 2)
    data = simulate_dataset(theta, design, 4, 2)
    q = to_unconstrained(theta)
    lp, _ = log_joint_unconstrained(data, WEAK, q)
    ref = log_likelihood(data, theta) + log_prior(theta, WEAK) + log_jacobian(q, variant)
    assert lp == pytest.approx(ref, rel=1e-12)


def test_removing_the_sd_jacobian_changes_density_by_sum_of_log_sds():
    design = generate_design(3, 3)
    variant = model_variant(True)
    theta = draw_prior(WEAK, design, 8, 0)
    q = to_unconstrained(theta)
    s = theta.structural()
    expected = sum(math.log(s[k]) for k in ("sd_subj_int", "sd_subj_so", "sd_item_int", "sd_item_so", "sigma"))
    assert log_jacobian_sd(q, variant) == pytest.approx(expected, rel=1e-13)
    rho_part = log_jacobian(q, variant) - log_jacobian_sd(q, variant)
    assert rho_part == pytest.approx(math.log(1 - s["cor_subj"] ** 2) + math.log(1 - s["cor_item"] ** 2),
                                     rel=1e-12)


def test_fixed_effect_gradient_vanishes_at_prior_mode_without_data():
    design = generate_design(3, 3)
    target = ModelTarget(None, WEAK, model_variant(True), design=design)
    q = np.zeros(target.dim)
    q[0], q[1] = 6.0, 0.0
    _, g = target(q)
    assert g[0] == pytest.approx(0.0, abs=1e-14)
    assert g[1] == pytest.approx(0.0, abs=1e-14)


def test_extreme_point_gives_minus_infinity_and_finite_gradient():
    design = generate_design(2, 2)
    data = simulate_dataset(draw_prior(WEAK, design, 0, 0), design, 0, 0)
    target = ModelTarget(data, WEAK)
    q = np.zeros(target.dim)
    q[8] = -1000.0
    lp, g = target(q)
    assert lp == -np.inf
    assert np.all(np.isfinite(g))


def test_point_mass_prior_cannot_be_evaluated():
    with pytest.raises(OutOfSupportError):
        ModelTarget(None, WEAK.replace(slope=Normal(0.0, 0.0)), design=generate_design(2, 2))


# --- centered parameterisation --------------------------------------------------


@pytest.mark.parametrize("slope", [True, False])
def test_centered_gradient_and_mapping(slope):
    design = generate_design(5, 3)
    variant = model_variant(slope)
    data = simulate_dataset(draw_prior(WEAK, design, 2, 0, slope), design, 2, 0)
    nc = ModelTarget(data, WEAK, variant)
    c = ModelTarget(data, WEAK, variant, centered=True)
    for q in _interior_points(design, variant, 3, 5):
        qc = noncentered_to_centered(q, design, variant)
        np.testing.assert_allclose(centered_to_noncentered(qc, design, variant), q, rtol=1e-12, atol=1e-12)
        lp, g = c(qc)
        fd = central_difference(lambda x: c(x)[0], qc)
        assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-6
        np.testing.assert_allclose(c.constrain(qc[None]), nc.constrain(q[None]), rtol=1e-12, atol=1e-14)


def test_centered_density_differs_by_the_latent_jacobian():
    # the two parameterisations describe the same distribution: their ratio is |dz/du|
    design = generate_design(4, 3)
    variant = model_variant(True)
    data = simulate_dataset(draw_prior(WEAK, design, 6, 0), design, 6, 0)
    nc = ModelTarget(data, WEAK, variant)
    c = ModelTarget(data, WEAK, variant, centered=True)
    q = _interior_points(design, variant, 1, 8)[0]
    qc = noncentered_to_centered(q, design, variant)
    k = 1
    u = q[k + 1:k + 8]
    logdet = -design.n_subjects * (u[0] + u[1] + math.log(1 / math.cosh(u[2]))) \
        - design.n_items * (u[3] + u[4] + math.log(1 / math.cosh(u[5])))
    assert c(qc)[0] - nc(q)[0] == pytest.approx(logdet, rel=1e-10)


def test_preconditioned_target_is_the_centered_density_through_an_affine_map():
    design = generate_design(5, 3)
    variant = model_variant(True)
    data = simulate_dataset(draw_prior(WEAK, design, 3, 0), design, 3, 0)
    nc = ModelTarget(data, WEAK, variant)
    pts = np.array(_interior_points(design, variant, 300, 9))
    pre = nc.strong_data_form(pts)
    assert isinstance(pre, PreconditionedTarget) and pre.dim == nc.dim
    c = ModelTarget(data, WEAK, variant, centered=True)
    y = np.random.default_rng(1).normal(0, 0.5, pre.dim)
    lp, g = pre(y)
    qc = pre.shift + pre.chol @ y
    assert lp == pytest.approx(c(qc)[0], rel=1e-12)
    fd = central_difference(lambda x: pre(x)[0], y)
    assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-6
    # compiled kernel agrees with the python call
    lj, gj = pre.jit_fn(y, pre.jit_args)
    assert lj == pytest.approx(lp, rel=1e-12)
    np.testing.assert_allclose(gj, g, rtol=1e-10, atol=1e-10)
    # mapping back: standard coordinates and constrained values match the plain target's
    Y = np.linalg.solve(pre.chol, (noncentered_to_centered(pts[:4], design, variant) - pre.shift).T).T
    np.testing.assert_allclose(pre.standard_coordinates(Y), pts[:4], rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(pre.constrain(Y), nc.constrain(pts[:4]), rtol=1e-8, atol=1e-8)
    with pytest.raises(ValueError):
        PreconditionedTarget(nc, pre.shift, pre.chol)
