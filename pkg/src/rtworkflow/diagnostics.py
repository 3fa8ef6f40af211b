"""Convergence diagnostics for multi-chain MCMC output.

Split R-hat compares between- and within-chain variance after cutting every
chain in half. The effective sample size uses the multi-chain autocorrelation
estimate truncated at the first negative pair sum (Geyer's initial positive
sequence, made monotone).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hmc import PosteriorDraws

RHAT_CUTOFF = 1.05


def autocorrelation(series, max_lag: int | None = None) -> np.ndarray:
    """Biased autocorrelation estimate at lags ``0..max_lag``.

    A constant series has no defined correlation; it is reported as 1 at lag 0
    and 0 elsewhere.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = n - 1
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag must lie in [0, {n - 1}], got {max_lag}")
    acov = _autocovariance(x)[: max_lag + 1]
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if acov[0] > 0:
        out[1:] = acov[1:] / acov[0]
    return out


def _autocovariance(x: np.ndarray) -> np.ndarray:
    # biased (divide by n) autocovariance at every lag, via FFT
    n = x.size
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    return np.fft.irfft(f * np.conjugate(f), size)[:n] / n


def _split(chains: np.ndarray) -> np.ndarray:
    """(m, n) chains -> (2m, n // 2) half chains, dropping a middle draw if n is odd."""
    m, n = chains.shape
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def split_rhat(chains) -> float:
    """Split R-hat for one parameter given an (n_chains, n_iter) array.

    Returns NaN when the within-chain variance is zero: the ratio is undefined
    rather than perfect.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("split R-hat needs (chains, iterations) with at least 4 iterations")
    s = _split(x)
    n = s.shape[1]
    w = s.var(axis=1, ddof=1).mean()
    if not w > 0:
        return float("nan")
    b = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def effective_sample_size(chains) -> float:
    """Multi-chain ESS on split chains, capped at the total number of draws."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    s = _split(x) if x.shape[1] >= 4 else x
    m, n = s.shape
    total = x.size
    w = s.var(axis=1, ddof=1).mean()
    if not w > 0:
        return float("nan")
    var_plus = (n - 1) / n * w + (n * s.mean(axis=1).var(ddof=1) / n if m > 1 else 0.0)
    acov = np.stack([_autocovariance(c) for c in s])
    mean_acov = acov.mean(axis=0)
    # rho_t = 1 - (W - mean within-chain autocovariance_t) / var_plus
    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0
    # Geyer: sum pairs while positive, keep the sequence monotone
    tau = -1.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
        t += 2
    if tau <= 0:
        return float(total)
    return float(min(total, m * n / tau))


@dataclass
class Diagnostics:
    rhat: dict
    ess: dict
    n_divergent: int
    n_max_treedepth: int
    n_draws: int

    @property
    def max_rhat(self) -> float:
        vals = [v for v in self.rhat.values() if np.isfinite(v)]
        return max(vals) if vals else float("nan")

    @property
    def min_ess(self) -> float:
        vals = [v for v in self.ess.values() if np.isfinite(v)]
        return min(vals) if vals else float("nan")

    @property
    def undefined(self) -> list:
        """Parameters whose R-hat could not be computed (zero variance)."""
        return [k for k, v in self.rhat.items() if not np.isfinite(v)]

    def converged(self, cutoff: float = RHAT_CUTOFF) -> bool:
        return bool(np.isfinite(self.max_rhat) and self.max_rhat < cutoff)


def diagnose(draws: PosteriorDraws, params=None) -> Diagnostics:
    if draws.n_chains < 2 or draws.n_iter < 4:
        raise ValueError("diagnostics need at least 2 chains of at least 4 draws")
    names = list(params) if params is not None else draws.param_names
    rhat, ess = {}, {}
    for name in names:
        x = draws[name]
        rhat[name] = split_rhat(x)
        ess[name] = effective_sample_size(x)
    saturated = 0
    if draws.tree_depth is not None:
        saturated = int((draws.tree_depth >= draws.max_tree_depth).sum())
    return Diagnostics(rhat, ess, draws.n_divergent, saturated, draws.n_chains * draws.n_iter)
