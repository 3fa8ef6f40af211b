"""Posterior z-scores, posterior contraction and their joint classification.

For one simulated data set with generating value ``theta``:

    z = (posterior mean - theta) / posterior sd
    s = 1 - posterior variance / prior variance

Large ``|z|`` with high ``s`` points to overfitting, large ``|z|`` with low
``s`` to a prior/likelihood conflict, small ``|z|`` with low ``s`` to a poorly
identified parameter, and small ``|z|`` with high ``s`` is the ideal case.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import PriorSpec
from .seeding import as_seed

Z_THRESHOLD = 3.0
CONTRACTION_THRESHOLD = 0.5
Z_BORDERLINE = 2.0

LABELS = ("overfit", "poorly_identified", "prior_likelihood_conflict", "ideal", "intermediate")


def zscore(mu_post: float, true_value: float, sd_post: float) -> float:
    if not sd_post > 0:
        raise ValueError("posterior sd must be positive")
    return (mu_post - true_value) / sd_post


def contraction(sd_post: float, sd_prior: float) -> float:
    if not sd_prior > 0:
        raise ValueError("prior sd must be positive")
    return 1.0 - (sd_post / sd_prior) ** 2


def _latent_scale(prior: PriorSpec, parameter: str):
    # subj_int[3] -> sd_subj_int; the marginal variance of a latent adjustment is E[sd^2]
    base, _, rest = parameter.partition("[")
    if not rest or base not in ("subj_int", "subj_so", "item_int", "item_so"):
        return None
    return prior.family("sd_" + base)


def prior_sd(prior: PriorSpec, parameter: str) -> float:
    """Marginal prior standard deviation of a reported parameter."""
    latent = _latent_scale(prior, parameter)
    if latent is not None:
        # S = sd * z (or sd * (rho z0 + sqrt(1 - rho^2) z1)): Var = E[sd^2] = scale^2
        return float(latent.sd)
    return prior.family(parameter).std()


def prior_sd_monte_carlo(prior: PriorSpec, parameter: str, n: int = 10**6, seed=None):
    """Monte Carlo prior SD with its standard error, for checking closed forms."""
    rng = as_seed(seed).rng(99)
    latent = _latent_scale(prior, parameter)
    if latent is not None:
        x = latent.sample(rng, n) * rng.standard_normal(n)
    else:
        x = np.asarray(prior.family(parameter).sample(rng, n), dtype=float)
    sd = float(x.std(ddof=1))
    # delta-method SE of a sample SD: sqrt((m4 / sd^4 - 1) / (4 n)) * sd
    m4 = float(np.mean((x - x.mean()) ** 4))
    se = sd * math.sqrt(max(m4 / sd**4 - 1.0, 0.0) / (4.0 * n))
    return sd, se


def classify(z: float, s: float, z_threshold: float = Z_THRESHOLD,
             s_threshold: float = CONTRACTION_THRESHOLD, z_borderline: float = Z_BORDERLINE) -> str:
    """Quadrant label of a (z, s) pair; ``z_borderline <= |z| < z_threshold`` is intermediate."""
    az = abs(z)
    high_s = s >= s_threshold
    if az >= z_threshold:
        return "overfit" if high_s else "prior_likelihood_conflict"
    if az >= z_borderline:
        return "intermediate"
    return "ideal" if high_s else "poorly_identified"


@dataclass
class SensitivityRecord:
    sim_index: int
    parameter: str
    true_value: float
    mu_post: float
    sd_post: float
    sd_prior: float
    z: float
    contraction: float
    label: str

    @classmethod
    def build(cls, sim_index, parameter, true_value, mu_post, sd_post, sd_prior,
              z_threshold=Z_THRESHOLD, s_threshold=CONTRACTION_THRESHOLD):
        z = zscore(mu_post, true_value, sd_post)
        s = contraction(sd_post, sd_prior)
        return cls(int(sim_index), parameter, float(true_value), float(mu_post), float(sd_post),
                   float(sd_prior), float(z), float(s), classify(z, s, z_threshold, s_threshold))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SensitivitySummary:
    parameter: str
    n: int
    mean_contraction: float
    mean_abs_z: float
    mean_z: float
    sd_z: float
    n_negative_contraction: int
    label_counts: dict

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records, parameter: str | None = None) -> SensitivitySummary:
    recs = [r for r in records if parameter is None or r.parameter == parameter]
    if not recs:
        raise ValueError("no sensitivity records to summarise")
    z = np.array([r.z for r in recs])
    s = np.array([r.contraction for r in recs])
    counts = {lab: sum(r.label == lab for r in recs) for lab in LABELS}
    return SensitivitySummary(
        parameter=parameter or recs[0].parameter,
        n=len(recs),
        mean_contraction=float(s.mean()),
        mean_abs_z=float(np.abs(z).mean()),
        mean_z=float(z.mean()),
        sd_z=float(z.std(ddof=1)) if z.size > 1 else 0.0,
        n_negative_contraction=int((s < 0).sum()),
        label_counts=counts,
    )


def records_from_fits(fits, prior: PriorSpec, monitored, z_threshold=Z_THRESHOLD,
                      s_threshold=CONTRACTION_THRESHOLD) -> list:
    recs = []
    for f in fits:
        if f.failed:
            continue
        for p in monitored:
            recs.append(SensitivityRecord.build(f.index, p, f.true_values[p], f.post_mean[p], f.post_sd[p],
                                                prior_sd(prior, p), z_threshold, s_threshold))
    return recs


def run_sensitivity(prior: PriorSpec, design, include_slope: bool = True, n_sims: int = 200, sampler=None,
                    monitored=("beta1",), seed=None, jobs: int = 1):
    """Fit ``n_sims`` simulated data sets and return (records, fits)."""
    from .ensemble import EnsembleConfig, run_ensemble

    kw = {} if sampler is None else {"sampler": sampler}
    if seed is not None:
        kw["seed"] = seed
    cfg = EnsembleConfig(prior=prior, design=design, include_slope=include_slope, monitored=tuple(monitored), **kw)
    fits = run_ensemble(cfg, n_sims, jobs=jobs)
    return records_from_fits(fits, prior, monitored), fits
