"""Summary statistics and prior/posterior predictive checks.

Statistics are computed on raw reading times; the 2000 ms clamp only affects
the display histogram.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import seeding
from .hmc import PosteriorDraws
from .model import Dataset, to_constrained
from .seeding import as_seed
from .simulate import simulate_dataset

HIST_WIDTH_MS = 50.0
HIST_MAX_MS = 2000.0
# 40 regular bins over [0, 2000) plus one clamp bin for rt >= 2000
HIST_EDGES = np.append(np.arange(0.0, HIST_MAX_MS + HIST_WIDTH_MS, HIST_WIDTH_MS), np.inf)
BAND_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

STATISTICS = ("mean_log_rt", "effect_ms", "sd_resid_rt", "max_subject_effect_ms", "sd_subject_effect_ms")


def rt_histogram(rt_ms) -> np.ndarray:
    """Counts on the fixed display grid; values above the last edge land in the clamp bin."""
    rt = np.asarray(rt_ms, dtype=float)
    idx = np.minimum((np.clip(rt, 0.0, HIST_MAX_MS) // HIST_WIDTH_MS).astype(np.int64), HIST_EDGES.size - 2)
    return np.bincount(idx, minlength=HIST_EDGES.size - 1)


@dataclass
class SummaryStatistics:
    mean_log_rt: float
    effect_ms: float
    sd_resid_rt: float
    max_subject_effect_ms: float
    sd_subject_effect_ms: float
    histogram: np.ndarray = field(repr=False)
    n_subjects_excluded: int = 0

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in STATISTICS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = [int(c) for c in self.histogram]
        return d


def subject_effects(data: Dataset):
    """Per-subject mean rt(so=+1) - mean rt(so=-1); subjects missing a condition are dropped.

    Returns (effects, n_excluded).
    """
    d = data.design
    rt = data.rt_ms
    pos = d.so > 0
    sums = np.zeros((d.n_subjects, 2))
    counts = np.zeros((d.n_subjects, 2))
    np.add.at(sums, (d.subject, pos.astype(np.int64)), rt)
    np.add.at(counts, (d.subject, pos.astype(np.int64)), 1)
    present = counts.sum(axis=1) > 0
    ok = np.all(counts > 0, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    eff = means[ok, 1] - means[ok, 0]
    return eff, int(np.sum(present & ~ok))


def compute_summaries(data: Dataset) -> SummaryStatistics:
    rt = data.rt_ms
    so = data.design.so
    sr, orr = rt[so < 0], rt[so > 0]
    if sr.size == 0 or orr.size == 0:
        raise ValueError("both conditions need at least one trial")
    resid = np.where(so > 0, rt - orr.mean(), rt - sr.mean())
    eff, n_excl = subject_effects(data)
    if eff.size:
        max_eff = float(eff[np.argmax(np.abs(eff))])
        sd_eff = float(eff.std(ddof=1)) if eff.size > 1 else 0.0
    else:
        max_eff, sd_eff = float("nan"), float("nan")
    return SummaryStatistics(
        mean_log_rt=float(np.mean(data.log_rt)),
        effect_ms=float(orr.mean() - sr.mean()),
        sd_resid_rt=float(resid.std(ddof=1)) if rt.size > 1 else 0.0,
        max_subject_effect_ms=max_eff,
        sd_subject_effect_ms=sd_eff,
        histogram=rt_histogram(rt),
        n_subjects_excluded=n_excl,
    )


@dataclass
class HistogramBand:
    edges: np.ndarray
    levels: tuple
    quantiles: np.ndarray  # (len(levels), n_bins)

    @classmethod
    def from_histograms(cls, hists, levels=BAND_LEVELS) -> "HistogramBand":
        h = np.asarray(hists, dtype=float)
        return cls(HIST_EDGES.copy(), tuple(levels), np.quantile(h, levels, axis=0))

    def level(self, q: float) -> np.ndarray:
        return self.quantiles[self.levels.index(q)]

    def is_nested(self) -> bool:
        return bool(np.all(np.diff(self.quantiles, axis=0) >= 0))


@dataclass
class PredictiveCheck:
    statistics: dict  # name -> array over the ensemble
    band: HistogramBand
    observed: SummaryStatistics | None = None
    position: dict = field(default_factory=dict)
    tail_p: dict = field(default_factory=dict)

    @property
    def n_sims(self) -> int:
        return len(next(iter(self.statistics.values())))

    def fraction(self, name: str, predicate) -> float:
        x = self.statistics[name]
        return float(np.mean(predicate(x)))


def tail_position(values, observed: float) -> float:
    """Fraction of ``values`` below ``observed``, ties counted half."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0 or not np.isfinite(observed):
        return float("nan")
    return float((np.sum(v < observed) + 0.5 * np.sum(v == observed)) / v.size)


def predictive_check(ensemble, observed: Dataset | None = None) -> PredictiveCheck:
    """Distributions of every statistic over ``ensemble`` (datasets or precomputed summaries)."""
    summaries = [d if isinstance(d, SummaryStatistics) else compute_summaries(d) for d in ensemble]
    if not summaries:
        raise ValueError("ensemble is empty")
    stats = {k: np.array([getattr(s, k) for s in summaries]) for k in STATISTICS}
    band = HistogramBand.from_histograms([s.histogram for s in summaries])
    check = PredictiveCheck(stats, band)
    if observed is not None:
        obs = compute_summaries(observed)
        check.observed = obs
        for k in STATISTICS:
            pos = tail_position(stats[k], getattr(obs, k))
            check.position[k] = pos
            check.tail_p[k] = min(1.0, 2.0 * min(pos, 1.0 - pos)) if np.isfinite(pos) else float("nan")
    return check


def posterior_predictive_ensemble(draws: PosteriorDraws, data: Dataset, n_sims: int = 1000, seed=None):
    """One replicated data set per selected posterior draw, on the observed design.

    Draws are taken evenly spaced over the pooled chains; replicate ``i`` uses
    the predictive stream ``i``.
    """
    Q = draws.flat_unconstrained()
    if not 1 <= n_sims <= Q.shape[0]:
        raise ValueError(f"n_sims must lie in [1, {Q.shape[0]}] (the number of posterior draws)")
    seed = as_seed(seed)
    idx = np.floor(np.arange(n_sims) * (Q.shape[0] / n_sims)).astype(np.int64)
    out = []
    for i, j in enumerate(idx):
        theta = to_constrained(Q[j], data.design)
        out.append(simulate_dataset(theta, data.design, seed, i, stream=seeding.PREDICTIVE))
    return out
