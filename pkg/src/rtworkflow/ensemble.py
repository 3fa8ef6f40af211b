"""Simulate-and-fit loop shared by calibration and sensitivity analyses.

Simulation ``i`` draws parameters and data from streams keyed by ``i`` and
fits with a sampler seed keyed by ``i``, so every result is reproducible on its
own and the ensemble does not depend on scheduling or the number of workers.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import seeding
from .diagnostics import RHAT_CUTOFF, autocorrelation, split_rhat
from .errors import FitFailure, SamplerError
from .hmc import SamplerConfig, sample_with_remediation, thin
from .model import ExperimentDesign, ModelTarget, PriorSpec, model_variant
from .sbc import DEFAULT_BINS, DEFAULT_R, largest_valid_r, rank_statistic, select_draws
from .seeding import SeedSpec, as_seed
from .simulate import draw_prior, generate_design, simulate_dataset

log = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.10


@dataclass(frozen=True)
class EnsembleConfig:
    prior: PriorSpec
    design: ExperimentDesign
    include_slope: bool = True
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(iter=600))
    monitored: tuple = ("beta1",)
    thin: int = 8
    max_lag1: float = 0.1
    bins: int = DEFAULT_BINS
    max_r: int = DEFAULT_R
    rhat_cutoff: float | None = RHAT_CUTOFF
    seed: SeedSpec = field(default_factory=SeedSpec)

    def __post_init__(self):
        object.__setattr__(self, "seed", as_seed(self.seed))
        object.__setattr__(self, "monitored", tuple(self.monitored))
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @classmethod
    def for_dims(cls, prior, n_subjects, n_items, **kw):
        return cls(prior=prior, design=generate_design(n_subjects, n_items), **kw)


@dataclass
class SimulationFit:
    """Outcome of fitting one simulated data set."""

    index: int
    true_values: dict
    post_mean: dict = field(default_factory=dict)
    post_sd: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)
    r: int = 0
    thin: int = 0
    lag1: float = float("nan")
    rhat_monitored: dict = field(default_factory=dict)
    max_rhat: float = float("nan")
    n_divergent: int = 0
    retries: int = 0
    remediation: list = field(default_factory=list)
    failed: bool = False
    message: str = ""
    seconds: float = 0.0


def choose_thin(chains: np.ndarray, start: int, max_lag1: float, min_kept: int = 8):
    """Smallest k >= start whose lag-k autocorrelation is below ``max_lag1``.

    ``chains`` is (n_chains, n_iter); the lag-k autocorrelation of the raw
    chain equals the lag-1 autocorrelation of the chain thinned by k, and is
    estimated with much less noise. Returns (k, estimate).
    """
    n_iter = chains.shape[1]
    k_max = max(start, n_iter // min_kept)
    k = min(start, n_iter - 1)
    acfs = np.stack([autocorrelation(c, min(k_max, n_iter - 1)) for c in chains]).mean(axis=0)
    while k < min(k_max, acfs.size - 1) and acfs[k] >= max_lag1:
        k += 1
    return k, float(acfs[min(k, acfs.size - 1)])


def fit_one(cfg: EnsembleConfig, index: int) -> SimulationFit:
    t0 = time.perf_counter()
    variant = model_variant(cfg.include_slope)
    theta = draw_prior(cfg.prior, cfg.design, cfg.seed, index, cfg.include_slope)
    data = simulate_dataset(theta, cfg.design, cfg.seed, index)
    flat = theta.to_flat()
    names = variant.param_names(cfg.design)
    truth = {p: float(flat[names.index(p)]) for p in cfg.monitored}
    out = SimulationFit(index=index, true_values=truth)
    sampler = cfg.sampler.replace(seed=cfg.seed.child(seeding.SAMPLER, index))
    try:
        draws = sample_with_remediation(ModelTarget(data, cfg.prior, variant), sampler, rhat_cutoff=cfg.rhat_cutoff)
    except SamplerError as exc:
        out.failed, out.message = True, str(exc)
        out.seconds = time.perf_counter() - t0
        return out
    out.n_divergent = draws.n_divergent
    out.retries = draws.retries
    out.remediation = list(draws.remediation)
    rh = np.array([split_rhat(draws.draws[:, :, j]) for j in range(draws.draws.shape[2])])
    out.max_rhat = float(np.nanmax(rh)) if np.any(np.isfinite(rh)) else float("nan")
    if draws.n_divergent:
        out.failed = True
        out.message = f"{draws.n_divergent} divergent transitions after remediation"
    k, lag = 1, -np.inf
    for p in cfg.monitored:
        kp, lp = choose_thin(draws[p], cfg.thin, cfg.max_lag1)
        if kp > k:
            k = kp
        lag = max(lag, lp)
    out.thin, out.lag1 = k, lag
    thinned = thin(draws, k)
    pool = thinned.n_chains * thinned.n_iter
    out.r = largest_valid_r(pool, cfg.bins, cfg.max_r)
    for p in cfg.monitored:
        x = draws.flat(p)
        out.post_mean[p] = float(x.mean())
        out.post_sd[p] = float(x.std(ddof=1))
        out.rhat_monitored[p] = float(rh[draws.index(p)])
        out.ranks[p] = rank_statistic(truth[p], select_draws(thinned.flat(p), out.r))
    out.seconds = time.perf_counter() - t0
    return out


def run_ensemble(cfg: EnsembleConfig, n_sims: int, jobs: int = 1, start: int = 0,
                 max_failed: float = MAX_FAILED_FRACTION, progress=None) -> list[SimulationFit]:
    """Fit ``n_sims`` simulated data sets; abort if more than ``max_failed`` of them fail."""
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    indices = range(start, start + n_sims)
    fits = []
    job = partial(fit_one, cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for f in pool.map(job, indices):
                fits.append(f)
                if progress:
                    progress(f)
    else:
        for i in indices:
            f = job(i)
            fits.append(f)
            if progress:
                progress(f)
    fits.sort(key=lambda f: f.index)
    n_failed = sum(f.failed for f in fits)
    if n_failed > max_failed * n_sims:
        msgs = "; ".join([f"sim {f.index}: {f.message}" for f in fits if f.failed][:5])
        exc = FitFailure(f"{n_failed} of {n_sims} fits failed (limit {max_failed:.0%}): {msgs}")
        exc.fits = fits
        raise exc
    return fits
