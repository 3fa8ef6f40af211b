"""Latin-square designs, prior draws and simulated datasets."""
from __future__ import annotations

import numpy as np

from . import seeding
from .errors import DesignError
from .model import (
    Dataset,
    ExperimentDesign,
    FixedEffects,
    LatentEffects,
    ParameterVector,
    PriorSpec,
    RandomEffectBlock,
)
from .seeding import SeedSpec, as_seed

# preset dimensions: the original experiment, and the pooled replication (doubled subjects)
PAPER_DESIGN = (37, 15)
POOLED_DESIGN = (74, 15)


def generate_design(n_subjects: int, n_items: int) -> ExperimentDesign:
    """Complete Latin-square layout: every subject reads every item once.

    The condition alternates with item parity, and the phase flips between
    odd and even subjects, so both conditions are balanced within one trial
    per subject and per item.
    """
    if n_subjects < 1 or n_items < 1:
        raise DesignError("n_subjects and n_items must both be >= 1")
    s, i = np.meshgrid(np.arange(n_subjects), np.arange(n_items), indexing="ij")
    s, i = s.ravel(), i.ravel()
    so = np.where((s + i) % 2 == 0, -1, 1)
    return ExperimentDesign(n_subjects, n_items, s, i, so)


def draw_prior(prior: PriorSpec, design: ExperimentDesign, seed, index: int = 0,
               include_slope: bool = True) -> ParameterVector:
    """One parameter set from the prior, latents included."""
    rng = as_seed(seed).rng(seeding.PRIOR, index)
    beta0 = float(prior.intercept.sample(rng))
    beta1 = float(prior.slope.sample(rng)) if include_slope else None
    sb = RandomEffectBlock(float(prior.sd_subj_int.sample(rng)), float(prior.sd_subj_so.sample(rng)),
                           float(prior.cor_subj.sample(rng)))
    ib = RandomEffectBlock(float(prior.sd_item_int.sample(rng)), float(prior.sd_item_so.sample(rng)),
                           float(prior.cor_item.sample(rng)))
    sigma = float(prior.sigma.sample(rng))
    zs = rng.standard_normal((design.n_subjects, 2))
    zi = rng.standard_normal((design.n_items, 2))
    latents = LatentEffects(zs @ sb.cholesky().T, zi @ ib.cholesky().T)
    return ParameterVector(FixedEffects(beta0, beta1), sb, ib, sigma, latents)


def simulate_dataset(params: ParameterVector, design: ExperimentDesign, seed, index: int = 0,
                     stream: int = seeding.DATA) -> Dataset:
    """Lognormal reading times for every trial of ``design`` under ``params``."""
    rng = as_seed(seed).rng(stream, index)
    mu = params.linear_predictor(design)
    eps = rng.standard_normal(design.n_trials)
    return Dataset(design, np.exp(mu + params.sigma_rt * eps))


def prior_predictive_ensemble(prior: PriorSpec, design: ExperimentDesign, n_sims: int, seed,
                              include_slope: bool = True, start: int = 0):
    """``n_sims`` independent (parameters, dataset) pairs; pair ``i`` uses only stream ``i``."""
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    seed = as_seed(seed)
    out = []
    for index in range(start, start + n_sims):
        theta = draw_prior(prior, design, seed, index, include_slope)
        out.append((theta, simulate_dataset(theta, design, seed, index)))
    return out


def simulate_log_rt_matrix(prior: PriorSpec, design: ExperimentDesign, n_sims: int, seed) -> np.ndarray:
    """The ``n_sims x n`` matrix of simulated log reading times."""
    return np.vstack([np.log(d.rt_ms) for _, d in prior_predictive_ensemble(prior, design, n_sims, seed)])


__all__ = [
    "PAPER_DESIGN",
    "POOLED_DESIGN",
    "SeedSpec",
    "generate_design",
    "draw_prior",
    "simulate_dataset",
    "prior_predictive_ensemble",
    "simulate_log_rt_matrix",
]
