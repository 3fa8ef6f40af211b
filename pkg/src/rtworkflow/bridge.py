"""Marginal likelihoods by bridge sampling, and Bayes factors.

Posterior draws (unconstrained) are split in half. The first half fixes a
moment-matched multivariate normal proposal; the second half and an equal
number of proposal draws enter the iterative optimal-bridge update

    r <- mean_g[ l2 / (s1 l2 + s2 r) ] / mean_post[ 1 / (s1 l1 + s2 r) ]

where ``l = p(theta, y) / g(theta)``. Everything runs on the log scale with a
common shift so large log densities do not overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import seeding
from .diagnostics import RHAT_CUTOFF, split_rhat
from .errors import ConvergenceError
from .hmc import PosteriorDraws, SamplerConfig, sample_with_remediation
from .model import Dataset, ModelTarget, PriorSpec, model_variant
from .seeding import as_seed

TOLERANCE = 1e-10
MAX_ITER = 1000
BF_SAMPLER = SamplerConfig(iter=10000, warmup=2000)


@dataclass
class BridgeEstimate:
    log_marginal_likelihood: float
    iterations: int
    converged: bool
    repeat_spread: float = 0.0
    repetitions: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def to_dict(self) -> dict:
        return {
            "log_marginal_likelihood": self.log_marginal_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
            "repeat_spread": self.repeat_spread,
            "repetitions": [float(v) for v in self.repetitions],
        }


def _evaluate(log_joint, X):
    return np.array([float(log_joint(x)) for x in X])


def _log_joint_fn(target):
    # targets return (lp, grad); plain callables may return lp alone
    def f(x):
        out = target(x)
        return out[0] if isinstance(out, tuple) else out

    return f


def _bridge_iterate(l1, l2, tol, max_iter):
    """Fixed point on log r; ``l1``/``l2`` are log ratios at posterior/proposal draws."""
    n1, n2 = l1.size, l2.size
    ls1, ls2 = math.log(n1 / (n1 + n2)), math.log(n2 / (n1 + n2))
    shift = float(np.median(l1))
    a1, a2 = l1 - shift, l2 - shift
    log_r = 0.0
    for it in range(1, max_iter + 1):
        # log of mean over proposal draws of l2 / (s1 l2 + s2 r)
        num = special.logsumexp(a2 - np.logaddexp(ls1 + a2, ls2 + log_r)) - math.log(n2)
        den = special.logsumexp(-np.logaddexp(ls1 + a1, ls2 + log_r)) - math.log(n1)
        new = num - den
        if not np.isfinite(new):
            return new + shift, it, False
        # relative change of r itself
        if abs(math.expm1(new - log_r)) < tol:
            return new + shift, it, True
        log_r = new
    return log_r + shift, max_iter, False


def _one_bridge(draws, log_joint, rng, tol, max_iter):
    n = draws.shape[0]
    half = n // 2
    fit, post = draws[:half], draws[half:]
    mean = fit.mean(axis=0)
    cov = np.atleast_2d(np.cov(fit, rowvar=False))
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("proposal covariance is degenerate (a parameter has no posterior spread)") from None
    if not np.all(np.isfinite(cov)) or np.min(np.linalg.eigvalsh(cov)) <= 1e-14 * max(1.0, np.max(np.diag(cov))):
        raise ValueError("proposal covariance is degenerate (a parameter has no posterior spread)")
    prop = stats.multivariate_normal(mean, cov)
    gen = prop.rvs(size=post.shape[0], random_state=rng).reshape(post.shape[0], -1)
    l1 = _evaluate(log_joint, post) - np.atleast_1d(prop.logpdf(post))
    l2 = _evaluate(log_joint, gen) - np.atleast_1d(prop.logpdf(gen))
    l2 = np.where(np.isfinite(l2), l2, -np.inf)
    return _bridge_iterate(l1, l2, tol, max_iter)


def log_marginal_likelihood(draws, log_joint, seed=None, repetitions: int = 1,
                            tol: float = TOLERANCE, max_iter: int = MAX_ITER) -> BridgeEstimate:
    """Bridge-sampling estimate of log p(y).

    ``draws`` is a PosteriorDraws (its unconstrained values are used) or an
    (n, dim) array; ``log_joint`` must be the fully normalised log joint on the
    same space, either returning a float or a (value, gradient) pair. Each
    repetition redraws the proposal sample; the estimate is the median over
    repetitions and ``repeat_spread`` their standard deviation.
    """
    X = draws.flat_unconstrained() if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 4:
        raise ValueError("bridge sampling needs at least 4 posterior draws")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    seed = as_seed(seed)
    f = _log_joint_fn(log_joint)
    vals, iters, ok = [], [], True
    for rep in range(repetitions):
        v, it, conv = _one_bridge(X, f, seed.rng(seeding.BRIDGE, rep), tol, max_iter)
        vals.append(v)
        iters.append(it)
        ok = ok and conv
    vals = np.array(vals)
    spread = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return BridgeEstimate(float(np.median(vals)), int(max(iters)), bool(ok and np.all(np.isfinite(vals))),
                          spread, vals)


@dataclass(frozen=True)
class BayesFactor:
    numerator: str
    denominator: str
    log_bf: float

    @property
    def bf(self) -> float:
        """Evidence ratio p(y | numerator) / p(y | denominator)."""
        return math.exp(self.log_bf)

    @property
    def inverse(self) -> "BayesFactor":
        return BayesFactor(self.denominator, self.numerator, -self.log_bf)

    def describe(self) -> str:
        return f"Estimated Bayes factor in favor of {self.numerator} over {self.denominator}: {self.bf:.5f}"


def bayes_factor(logml_1: BridgeEstimate, logml_0: BridgeEstimate, name_1: str = "full",
                 name_0: str = "null") -> BayesFactor:
    """BF of model 1 over model 0, ``exp(logml_1 - logml_0)``; refuses unconverged estimates."""
    bad = [n for n, e in ((name_1, logml_1), (name_0, logml_0)) if not e.converged]
    if bad:
        raise ConvergenceError(f"bridge sampling did not converge for: {', '.join(bad)}")
    return BayesFactor(name_1, name_0, logml_1.log_marginal_likelihood - logml_0.log_marginal_likelihood)


@dataclass
class BFReport:
    prior: str
    estimates: dict
    bf10: BayesFactor
    retries: dict
    divergent: dict
    max_rhat: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        b = self.bf10
        return {
            "prior": self.prior,
            "models": {"numerator": b.numerator, "denominator": b.denominator},
            "log_marginal_likelihood": {k: e.log_marginal_likelihood for k, e in self.estimates.items()},
            "repeat_spread": {k: e.repeat_spread for k, e in self.estimates.items()},
            "bridge_iterations": {k: e.iterations for k, e in self.estimates.items()},
            "BF10": b.bf,
            "BF01": b.inverse.bf,
            "log_BF10": b.log_bf,
            "interpretation": [b.describe(), b.inverse.describe()],
            "sampler_retries": self.retries,
            "divergent_transitions": self.divergent,
            "max_rhat": self.max_rhat,
        }


def bf_workflow(data: Dataset, prior: PriorSpec, sampler: SamplerConfig | None = None,
                repetitions: int = 3, seed=None, rhat_cutoff: float | None = RHAT_CUTOFF) -> BFReport:
    """Fit the full and null variants and compare them by bridge sampling.

    Each fit gets the usual remediation (higher adapt_delta on divergences,
    longer runs while split R-hat >= ``rhat_cutoff``).
    """
    sampler = sampler or BF_SAMPLER
    seed = as_seed(seed if seed is not None else sampler.seed)
    estimates, retries, divergent, max_rhat = {}, {}, {}, {}
    for k, (name, slope) in enumerate((("full", True), ("null", False))):
        target = ModelTarget(data, prior, model_variant(slope))
        draws = sample_with_remediation(target, sampler.replace(seed=seed.child(seeding.SAMPLER, k)),
                                        rhat_cutoff=rhat_cutoff)
        retries[name] = draws.retries
        divergent[name] = draws.n_divergent
        rh = [split_rhat(draws.draws[:, :, j]) for j in range(draws.draws.shape[2])] if draws.n_chains > 1 else []
        rh = [v for v in rh if np.isfinite(v)]
        max_rhat[name] = float(max(rh)) if rh else float("nan")
        estimates[name] = log_marginal_likelihood(draws, target, seed.child(seeding.BRIDGE, k), repetitions)
    return BFReport(prior.name, estimates, bayes_factor(estimates["full"], estimates["null"]), retries, divergent,
                    max_rhat)
