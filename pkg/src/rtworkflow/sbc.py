"""Rank statistics for simulation-based calibration.

For every simulated data set the generating value is ranked among ``R``
posterior draws, ``rank = #{draws > true value}``. If the posterior is
computed correctly the ranks are uniform on ``{0, ..., R}``, so a histogram of
ranks over many simulations should be flat up to binomial noise.

With this counting direction a histogram leaning towards high ranks means the
draws sit above the truth too often (posterior biased upwards), a U shape
means the posterior is too narrow (or the draws are autocorrelated), and an
inverted U means it is too wide.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

DEFAULT_BINS = 20
DEFAULT_COVERAGE = 0.99
DEFAULT_R = 999


def rank_statistic(true_value: float, draws) -> int:
    """Number of draws strictly greater than ``true_value``."""
    d = np.asarray(draws, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("cannot rank against an empty set of draws")
    return int(np.count_nonzero(d > true_value))


def largest_valid_r(n_available: int, bins: int = DEFAULT_BINS, cap: int = DEFAULT_R) -> int:
    """Largest R <= min(n_available, cap) with (R + 1) divisible by ``bins``."""
    r = min(int(n_available), int(cap))
    r = (r + 1) // bins * bins - 1
    if r < bins - 1:
        raise ValueError(f"{n_available} draws cannot fill {bins} rank bins")
    return r


def select_draws(draws, r: int) -> np.ndarray:
    """``r`` draws spread evenly over a (thinned) pool."""
    d = np.asarray(draws, dtype=float).ravel()
    if d.size < r:
        raise ValueError(f"need {r} draws, have {d.size}")
    idx = np.floor(np.arange(r) * (d.size / r)).astype(np.int64)
    return d[idx]


def bin_ranks(ranks, r, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Counts of ranks in ``bins`` equal-width bins over ``{0..R}``.

    ``r`` may be a scalar or one value per rank (each with ``(R + 1) % bins == 0``).
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    r = np.broadcast_to(np.asarray(r, dtype=np.int64), ranks.shape)
    if np.any((r + 1) % bins):
        raise ValueError("R + 1 must be divisible by the number of bins")
    if np.any(ranks < 0) or np.any(ranks > r):
        raise ValueError("ranks must lie in [0, R]")
    b = ranks * bins // (r + 1)
    return np.bincount(b, minlength=bins)


def uniformity_band(n_sims: int, bins: int = DEFAULT_BINS, coverage: float = DEFAULT_COVERAGE):
    """Pointwise binomial band for one bin count under uniform ranks."""
    if not 0 <= coverage < 1:
        raise ValueError("coverage must lie in [0, 1)")
    dist = stats.binom(n_sims, 1.0 / bins)
    lo = dist.ppf((1.0 - coverage) / 2.0)
    hi = dist.ppf((1.0 + coverage) / 2.0)
    return int(lo), int(hi)


def chi_square_uniformity(counts, bins: int | None = None) -> float:
    """Pearson chi-square p-value of bin counts against a flat histogram.

    ``counts`` are bin counts; pass ``bins`` only to check their number.
    """
    counts = np.asarray(counts, dtype=float)
    if bins is not None and counts.size != bins:
        raise ValueError(f"expected {bins} bin counts, got {counts.size}")
    b = counts.size
    n = counts.sum()
    if b < 2:
        return 1.0
    if n / b < 5:
        raise ValueError(f"expected count per bin {n / b:.2f} is below 5; use fewer bins or more simulations")
    stat, p = stats.chisquare(counts)
    return float(p)


def classify_histogram(counts, band) -> str:
    """Label a rank histogram: uniform, biased_high, biased_low, underdispersed or overdispersed.

    Biased labels name the direction of the posterior relative to the truth
    under the ``#{draws > truth}`` convention.
    """
    counts = np.asarray(counts, dtype=float)
    b = counts.size
    n = counts.sum()
    lo, hi = band
    outside = int(np.sum((counts < lo) | (counts > hi)))
    p = chi_square_uniformity(counts) if n / b >= 5 else 1.0
    if outside <= max(1, b // 20) and p > 1e-3:
        return "uniform"
    half = b // 2
    low, high = counts[:half].sum(), counts[b - half:].sum()
    z_asym = (high - low) / np.sqrt(max(low + high, 1.0))
    q = max(1, b // 4)
    edge = counts[:q].sum() + counts[b - q:].sum()
    pe = 2.0 * q / b
    z_shape = (edge - n * pe) / np.sqrt(max(n * pe * (1 - pe), 1e-12))
    if abs(z_asym) >= abs(z_shape):
        return "biased_high" if z_asym > 0 else "biased_low"
    return "underdispersed" if z_shape > 0 else "overdispersed"


@dataclass
class SBCResult:
    parameter: str
    ranks: np.ndarray
    r: np.ndarray
    bins: int = DEFAULT_BINS
    coverage: float = DEFAULT_COVERAGE
    sim_index: np.ndarray | None = None
    n_excluded: int = 0
    thin: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        self.r = np.broadcast_to(np.asarray(self.r, dtype=np.int64), self.ranks.shape).copy()
        if self.sim_index is None:
            self.sim_index = np.arange(self.ranks.size)

    @property
    def n_sims(self) -> int:
        return int(self.ranks.size)

    @property
    def bin_counts(self) -> np.ndarray:
        return bin_ranks(self.ranks, self.r, self.bins)

    @property
    def expected(self) -> float:
        return self.n_sims / self.bins

    @property
    def band(self):
        return uniformity_band(self.n_sims, self.bins, self.coverage)

    @property
    def n_outside(self) -> int:
        lo, hi = self.band
        c = self.bin_counts
        return int(np.sum((c < lo) | (c > hi)))

    @property
    def p_value(self) -> float:
        return chi_square_uniformity(self.bin_counts)

    @property
    def pathology(self) -> str:
        return classify_histogram(self.bin_counts, self.band)

    def mirrored(self) -> "SBCResult":
        """The same ranks counted in the opposite direction, ``R - rank``."""
        return SBCResult(self.parameter, self.r - self.ranks, self.r, self.bins, self.coverage,
                         self.sim_index, self.n_excluded, self.thin)

    def summary(self) -> dict:
        lo, hi = self.band
        try:
            p = self.p_value
        except ValueError:
            p = None
        return {
            "parameter": self.parameter,
            "n_sims": self.n_sims,
            "n_excluded": self.n_excluded,
            "R": sorted({int(v) for v in self.r}),
            "bins": self.bins,
            "coverage": self.coverage,
            "bin_counts": [int(c) for c in self.bin_counts],
            "expected_per_bin": self.expected,
            "band": [lo, hi],
            "bins_outside_band": self.n_outside,
            "chi_square_p": p,
            "pathology": self.pathology,
        }


def results_from_fits(fits, monitored, bins: int = DEFAULT_BINS, coverage: float = DEFAULT_COVERAGE) -> dict:
    """One SBCResult per monitored parameter from ensemble fits; failed fits are excluded."""
    used = [f for f in fits if not f.failed]
    n_excl = len(fits) - len(used)
    out = {}
    for p in monitored:
        out[p] = SBCResult(p, [f.ranks[p] for f in used], [f.r for f in used], bins, coverage,
                           np.array([f.index for f in used], dtype=np.int64), n_excl,
                           np.array([f.thin for f in used], dtype=np.int64))
    return out


def run_sbc(prior, design, include_slope: bool = True, n_sims: int = 200, sampler=None, thin_k: int = 8,
            monitored=("beta1",), bins: int = DEFAULT_BINS, coverage: float = DEFAULT_COVERAGE, seed=None,
            jobs: int = 1, max_r: int = DEFAULT_R):
    """Simulate, fit and rank ``n_sims`` times. Returns ({parameter: SBCResult}, fits)."""
    from .ensemble import EnsembleConfig, run_ensemble

    kw = {} if sampler is None else {"sampler": sampler}
    cfg = EnsembleConfig(prior=prior, design=design, include_slope=include_slope, monitored=tuple(monitored),
                         thin=thin_k, bins=bins, max_r=max_r, **kw, **({} if seed is None else {"seed": seed}))
    fits = run_ensemble(cfg, n_sims, jobs=jobs)
    return results_from_fits(fits, monitored, bins, coverage), fits
