"""Dynamic Hamiltonian Monte Carlo (multinomial NUTS) with diagonal metric adaptation.

The transition follows the usual recursive doubling scheme: a trajectory is
extended forwards or backwards by subtrees of doubling length, the next state
is drawn multinomially from the trajectory (biased progressive sampling
across subtrees, uniform progressive sampling inside a subtree), and
expansion stops on a generalised no-U-turn condition or at the maximum depth.

Warmup runs dual-averaging step-size adaptation throughout and estimates the
diagonal inverse metric over doubling slow windows: a fast buffer (15% of
warmup), slow windows (75%), then a final fast buffer (10%).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import seeding
from .errors import SamplerError
from .seeding import SeedSpec, as_seed

log = logging.getLogger(__name__)

# Hamiltonian error (nats) beyond which a trajectory is flagged divergent.
DIVERGENCE_THRESHOLD = 1000.0
REMEDIATION_ADAPT_DELTA = 0.95


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    iter: int = 2000
    warmup: int | None = None
    adapt_delta: float = 0.80
    max_tree_depth: int = 10
    seed: SeedSpec = field(default_factory=SeedSpec)
    init_radius: float = 2.0
    max_init_tries: int = 100
    base_window: int = 25

    def __post_init__(self):
        object.__setattr__(self, "seed", as_seed(self.seed))
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.iter // 2)
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.warmup < self.iter:
            raise ValueError("warmup must satisfy 0 <= warmup < iter")
        if not 0 < self.adapt_delta < 1:
            raise ValueError("adapt_delta must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    @property
    def n_draws(self) -> int:
        return self.iter - self.warmup

    def replace(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass
class Target:
    """A log density with gradient on R^dim.

    ``fn(q)`` returns ``(log_density, gradient)``. ``constrain`` maps a
    (n, dim) array of unconstrained draws to the reported scale.
    """

    fn: object
    dim: int
    param_names: list | None = None
    constrain: object = None

    def __call__(self, q):
        return self.fn(q)


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape (chain, iteration, parameter), plus sampler metadata."""

    param_names: list
    draws: np.ndarray
    divergent: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    unconstrained: np.ndarray | None = None
    tree_depth: np.ndarray | None = None
    n_leapfrog: np.ndarray | None = None
    accept_stat: np.ndarray | None = None
    warmup_divergences: np.ndarray | None = None
    adapt_delta: float = 0.8
    max_tree_depth: int = 10
    retries: int = 0
    thin: int = 1
    iteration_index: np.ndarray | None = None
    remediation: list = field(default_factory=list)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3:
            raise ValueError("draws must have shape (chain, iteration, parameter)")
        self.divergent = np.asarray(self.divergent, dtype=bool)
        if self.iteration_index is None:
            self.iteration_index = np.arange(self.draws.shape[1])

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    def index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        """(chain, iteration) array for one parameter."""
        return self.draws[:, :, self.index(name)]

    def flat(self, name: str | None = None) -> np.ndarray:
        if name is None:
            return self.draws.reshape(-1, self.draws.shape[2])
        return self[name].reshape(-1)

    def flat_unconstrained(self) -> np.ndarray:
        if self.unconstrained is None:
            raise ValueError("these draws carry no unconstrained values")
        return self.unconstrained.reshape(-1, self.unconstrained.shape[2])


def _log_sum_exp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


class _Tree:
    """Mutable accumulators for one NUTS transition."""

    __slots__ = ("n_leapfrog", "sum_metro", "divergent", "H0")

    def __init__(self, H0):
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False
        self.H0 = H0


class _State:
    __slots__ = ("q", "p", "g", "lp")

    def __init__(self, q, p, g, lp):
        self.q, self.p, self.g, self.lp = q, p, g, lp


class NUTSChain:
    """One chain of multinomial NUTS with a diagonal Euclidean metric."""

    def __init__(self, target, rng: np.random.Generator, max_tree_depth=10, step_size=1.0, inv_metric=None,
                 compiled=None):
        self.target = target
        if compiled is None:
            compiled = getattr(target, "jit_fn", None) is not None
        self.compiled = bool(compiled)
        self.rng = rng
        self.max_tree_depth = int(max_tree_depth)
        self.step_size = float(step_size)
        self.inv_metric = np.ones(target.dim) if inv_metric is None else np.asarray(inv_metric, dtype=float)

    # -- Hamiltonian pieces -------------------------------------------------
    def _momentum(self):
        return self.rng.standard_normal(self.inv_metric.size) / np.sqrt(self.inv_metric)

    def _kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_metric * p))

    def _leapfrog(self, s: _State, eps: float) -> _State:
        p = s.p + (0.5 * eps) * s.g
        q = s.q + eps * (self.inv_metric * p)
        lp, g = self.target(q)
        if not math.isfinite(lp):
            return _State(q, p, g, -math.inf)
        p = p + (0.5 * eps) * g
        return _State(q, p, g, lp)

    def hamiltonian(self, s: _State) -> float:
        if not math.isfinite(s.lp):
            return math.inf
        h = -s.lp + self._kinetic(s.p)
        return h if math.isfinite(h) else math.inf

    # -- step size heuristic ---------------------------------------------------
    def init_step_size(self, q, lp, g):
        s0 = _State(q, self._momentum(), g, lp)
        H0 = self.hamiltonian(s0)
        s1 = self._leapfrog(s0, self.step_size)
        delta = H0 - self.hamiltonian(s1)
        direction = 1 if delta > math.log(0.8) else -1
        for _ in range(200):
            s0 = _State(q, self._momentum(), g, lp)
            H0 = self.hamiltonian(s0)
            s1 = self._leapfrog(s0, self.step_size)
            delta = H0 - self.hamiltonian(s1)
            if direction == 1 and not delta > math.log(0.8):
                break
            if direction == -1 and not delta < math.log(0.8):
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size * 0.5
            if self.step_size > 1e7:
                raise SamplerError("posterior appears improper: step size grew beyond 1e7")
            if self.step_size < 1e-300:
                raise SamplerError("no acceptable step size: density is degenerate at the initial point")

    # -- transition --------------------------------------------------------------
    @staticmethod
    def _no_u_turn(p_sharp_minus, p_sharp_plus, rho):
        return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0

    def _build_tree(self, depth, state, sign, tree: _Tree):
        """Extend from ``state``; returns (valid, end_state, proposal, lsw, rho, p_sharp_beg, p_sharp_end, p_beg, p_end)."""
        if depth == 0:
            new = self._leapfrog(state, sign * self.step_size)
            tree.n_leapfrog += 1
            h = self.hamiltonian(new)
            if h - tree.H0 > DIVERGENCE_THRESHOLD:
                tree.divergent = True
            dH = tree.H0 - h
            tree.sum_metro += 1.0 if dH > 0 else math.exp(dH)
            if tree.divergent:
                return False, new, new, -math.inf, None, None, None, None, None
            p_sharp = self.inv_metric * new.p
            return True, new, new, dH, new.p.copy(), p_sharp, p_sharp, new.p, new.p

        ok, mid, prop_init, lsw_init, rho_init, ps_beg, ps_init_end, p_beg, p_init_end = \
            self._build_tree(depth - 1, state, sign, tree)
        if not ok:
            return False, mid, prop_init, lsw_init, None, None, None, None, None
        ok, end, prop_final, lsw_final, rho_final, ps_final_beg, ps_end, p_final_beg, p_end = \
            self._build_tree(depth - 1, mid, sign, tree)
        if not ok:
            return False, end, prop_final, lsw_final, None, None, None, None, None

        lsw = _log_sum_exp(lsw_init, lsw_final)
        proposal = prop_init
        if self.rng.uniform() < math.exp(lsw_final - lsw):
            proposal = prop_final
        rho = rho_init + rho_final
        persist = self._no_u_turn(ps_beg, ps_end, rho)
        persist = persist and self._no_u_turn(ps_beg, ps_final_beg, rho_init + p_final_beg)
        persist = persist and self._no_u_turn(ps_init_end, ps_end, rho_final + p_init_end)
        return persist, end, proposal, lsw, rho, ps_beg, ps_end, p_beg, p_end

    def transition(self, q, lp, g):
        """One NUTS step from ``q``; returns (q, lp, grad, depth, n_leapfrog, accept_stat, divergent)."""
        if self.compiled:
            return _jit_transition(self.target.jit_fn, self.target.jit_args, q, lp, g, self.step_size,
                                   self.inv_metric, self.max_tree_depth, self.rng, DIVERGENCE_THRESHOLD)
        return self._transition_py(q, lp, g)

    def _transition_py(self, q, lp, g):
        p = self._momentum()
        start = _State(q, p, g, lp)
        tree = _Tree(self.hamiltonian(start))
        fwd = bck = start
        sample = start
        rho = p.copy()
        p_sharp = self.inv_metric * p
        ps_fwd_bck = ps_fwd_fwd = ps_bck_fwd = ps_bck_bck = p_sharp
        p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = p
        log_sum_w = 0.0
        depth = 0
        while depth < self.max_tree_depth:
            if self.rng.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_fwd, ps_fwd_fwd
                ok, fwd, proposal, lsw_sub, rho_fwd, ps_fwd_bck, ps_fwd_fwd, p_fwd_bck, p_fwd_fwd = \
                    self._build_tree(depth, fwd, 1.0, tree)
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_bck, ps_bck_bck
                ok, bck, proposal, lsw_sub, rho_bck, ps_bck_fwd, ps_bck_bck, p_bck_fwd, p_bck_bck = \
                    self._build_tree(depth, bck, -1.0, tree)
            if not ok:
                break
            depth += 1
            if lsw_sub > log_sum_w or self.rng.uniform() < math.exp(lsw_sub - log_sum_w):
                sample = proposal
            log_sum_w = _log_sum_exp(log_sum_w, lsw_sub)
            rho = rho_bck + rho_fwd
            persist = self._no_u_turn(ps_bck_bck, ps_fwd_fwd, rho)
            persist = persist and self._no_u_turn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            persist = persist and self._no_u_turn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break
        accept = tree.sum_metro / tree.n_leapfrog if tree.n_leapfrog else 0.0
        return sample.q, sample.lp, sample.g, depth, tree.n_leapfrog, accept, tree.divergent


# ---------------------------------------------------------------------------
# compiled transition for targets exposing ``jit_fn(q, jit_args)``
#
# Same algorithm as NUTSChain.transition, with the recursive subtree build
# unrolled into a binary counter over leaves: leaf ``l`` closes every subtree
# level whose low bits of ``l`` are all ones. Random numbers are consumed in
# the same order, so both paths build the same trees; accumulated sums can
# differ in the last bit.


@numba.njit(cache=True)
def _jit_crit(ps_minus, ps_plus, rho):
    return np.dot(ps_plus, rho) > 0.0 and np.dot(ps_minus, rho) > 0.0


@numba.njit(cache=True)
def _jit_lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@numba.njit(cache=True)
def _jit_hamiltonian(lp, p, inv_metric):
    if not np.isfinite(lp):
        return np.inf
    h = -lp + 0.5 * np.dot(p, inv_metric * p)
    return h if np.isfinite(h) else np.inf


@numba.njit(cache=True)
def _jit_subtree(fn, args, depth, q, p, g, lp, eps, inv_metric, H0, rng, threshold):
    d = q.shape[0]
    n_lev = max(depth, 1)
    s_lsw = np.empty(n_lev)
    s_pq = np.empty((n_lev, d))
    s_pg = np.empty((n_lev, d))
    s_plp = np.empty(n_lev)
    s_rho = np.empty((n_lev, d))
    s_psbeg = np.empty((n_lev, d))
    s_psend = np.empty((n_lev, d))
    s_pbeg = np.empty((n_lev, d))
    s_pend = np.empty((n_lev, d))
    n_leap = 0
    sum_metro = 0.0
    t_lsw = -np.inf
    t_pq = q
    t_pg = g
    t_plp = lp
    t_rho = np.zeros(d)
    t_psbeg = t_psend = t_pbeg = t_pend = p
    for leaf in range(1 << depth):
        ph = p + (0.5 * eps) * g
        q = q + eps * (inv_metric * ph)
        lp, g = fn(q, args)
        if np.isfinite(lp):
            p = ph + (0.5 * eps) * g
        else:
            p = ph
            lp = -np.inf
        n_leap += 1
        h = _jit_hamiltonian(lp, p, inv_metric)
        dH = H0 - h
        sum_metro += 1.0 if dH > 0 else math.exp(dH)
        if h - H0 > threshold:
            return (False, True, q, p, g, lp, t_pq, t_plp, t_pg, t_lsw, t_rho,
                    t_psbeg, t_psend, t_pbeg, t_pend, n_leap, sum_metro)
        ps = inv_metric * p
        t_lsw = dH
        t_pq = q
        t_plp = lp
        t_pg = g
        t_rho = p.copy()
        t_psbeg = ps
        t_psend = ps
        t_pbeg = p
        t_pend = p
        level = 0
        while level < depth and (leaf >> level) & 1:
            lsw = _jit_lse(s_lsw[level], t_lsw)
            if not rng.uniform() < math.exp(t_lsw - lsw):
                t_pq = s_pq[level].copy()
                t_plp = s_plp[level]
                t_pg = s_pg[level].copy()
            rho_init = s_rho[level].copy()
            rho = rho_init + t_rho
            persist = _jit_crit(s_psbeg[level], t_psend, rho)
            if persist:
                persist = _jit_crit(s_psbeg[level], t_psbeg, rho_init + t_pbeg)
            if persist:
                persist = _jit_crit(s_psend[level], t_psend, t_rho + s_pend[level])
            t_lsw = lsw
            t_rho = rho
            t_psbeg = s_psbeg[level].copy()
            t_pbeg = s_pbeg[level].copy()
            if not persist:
                return (False, False, q, p, g, lp, t_pq, t_plp, t_pg, t_lsw, t_rho,
                        t_psbeg, t_psend, t_pbeg, t_pend, n_leap, sum_metro)
            level += 1
        if level < depth:
            s_lsw[level] = t_lsw
            s_pq[level] = t_pq
            s_plp[level] = t_plp
            s_pg[level] = t_pg
            s_rho[level] = t_rho
            s_psbeg[level] = t_psbeg
            s_psend[level] = t_psend
            s_pbeg[level] = t_pbeg
            s_pend[level] = t_pend
    return (True, False, q, p, g, lp, t_pq, t_plp, t_pg, t_lsw, t_rho,
            t_psbeg, t_psend, t_pbeg, t_pend, n_leap, sum_metro)


@numba.njit(cache=True)
def _jit_transition(fn, args, q, lp, g, eps, inv_metric, max_depth, rng, threshold):
    p = rng.standard_normal(inv_metric.shape[0]) / np.sqrt(inv_metric)
    H0 = _jit_hamiltonian(lp, p, inv_metric)
    fq, fp, fg, flp = q, p, g, lp
    bq, bp, bg, blp = q, p, g, lp
    sq, slp, sg = q, lp, g
    sp = p
    rho = p.copy()
    ps = inv_metric * p
    ps_fwd_bck = ps_fwd_fwd = ps_bck_fwd = ps_bck_bck = ps
    p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = p
    rho_fwd = rho
    rho_bck = rho
    log_sum_w = 0.0
    depth = 0
    n_leap = 0
    sum_metro = 0.0
    divergent = False
    while depth < max_depth:
        if rng.uniform() > 0.5:
            rho_bck = rho
            p_bck_fwd = p_fwd_fwd
            ps_bck_fwd = ps_fwd_fwd
            (ok, div, fq, fp, fg, flp, pq, plp, pg, lsw_sub, rho_fwd,
             ps_fwd_bck, ps_fwd_fwd, p_fwd_bck, p_fwd_fwd, nl, sm) = _jit_subtree(
                fn, args, depth, fq, fp, fg, flp, eps, inv_metric, H0, rng, threshold)
            endp = fp
        else:
            rho_fwd = rho
            p_fwd_bck = p_bck_bck
            ps_fwd_bck = ps_bck_bck
            (ok, div, bq, bp, bg, blp, pq, plp, pg, lsw_sub, rho_bck,
             ps_bck_fwd, ps_bck_bck, p_bck_fwd, p_bck_bck, nl, sm) = _jit_subtree(
                fn, args, depth, bq, bp, bg, blp, -eps, inv_metric, H0, rng, threshold)
            endp = bp
        n_leap += nl
        sum_metro += sm
        if div:
            divergent = True
        if not ok:
            break
        depth += 1
        if lsw_sub > log_sum_w:
            sq, slp, sg = pq, plp, pg
        elif rng.uniform() < math.exp(lsw_sub - log_sum_w):
            sq, slp, sg = pq, plp, pg
        log_sum_w = _jit_lse(log_sum_w, lsw_sub)
        rho = rho_bck + rho_fwd
        persist = _jit_crit(ps_bck_bck, ps_fwd_fwd, rho)
        if persist:
            persist = _jit_crit(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
        if persist:
            persist = _jit_crit(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
        if not persist:
            break
    accept = sum_metro / n_leap if n_leap > 0 else 0.0
    return sq, slp, sg, depth, n_leap, accept, divergent


class _DualAveraging:
    def __init__(self, delta, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(1.0)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat):
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def warmup_windows(warmup: int, base_window: int = 25):
    """Slow-window boundaries [(start, end), ...] for metric estimation.

    Returns an empty list when warmup is too short to split 15/75/10.
    """
    if warmup < 20:
        return []
    init = int(0.15 * warmup)
    term = int(0.10 * warmup)
    slow_end = warmup - term
    base = min(base_window, slow_end - init)
    windows = []
    start, width = init, base
    while start < slow_end:
        end = start + width
        if end + 2 * width > slow_end:
            end = slow_end
        windows.append((start, end))
        start, width = end, 2 * width
    return windows


def _initial_point(target, rng, radius, tries):
    for _ in range(tries):
        q = rng.uniform(-radius, radius, size=target.dim)
        lp, g = target(q)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    raise SamplerError(f"no finite log density and gradient after {tries} initialisation attempts")


def run_chain(target, config: SamplerConfig, chain: int, compiled=None):
    """Warm up and sample one chain. Returns a dict of per-iteration arrays."""
    rng = config.seed.rng(seeding.SAMPLER, chain)
    q, lp, g = _initial_point(target, rng, config.init_radius, config.max_init_tries)
    nuts = NUTSChain(target, rng, config.max_tree_depth, compiled=compiled)
    nuts.init_step_size(q, lp, g)
    da = _DualAveraging(config.adapt_delta)
    da.restart(nuts.step_size)

    windows = warmup_windows(config.warmup, config.base_window)
    window_ends = {end: start for start, end in windows}
    collect = None
    warm_div = 0
    for it in range(config.warmup):
        q, lp, g, depth, nleap, acc, div = nuts.transition(q, lp, g)
        warm_div += div
        nuts.step_size = da.update(acc)
        if any(start <= it < end for start, end in windows):
            if collect is None:
                collect = []
            collect.append(q)
        if it + 1 in window_ends:
            X = np.asarray(collect)
            n = X.shape[0]
            var = X.var(axis=0, ddof=1) if n > 1 else np.ones(target.dim)
            nuts.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            collect = None
            nuts.init_step_size(q, lp, g)
            da.restart(nuts.step_size)
    if config.warmup > 0:
        if warm_div == config.warmup:
            raise SamplerError(
                f"chain {chain}: every warmup iteration diverged (step size {nuts.step_size:.3g}); "
                "the target is badly scaled or improper"
            )
        nuts.step_size = da.final()

    n = config.n_draws
    out = {
        "q": np.empty((n, target.dim)),
        "divergent": np.zeros(n, dtype=bool),
        "tree_depth": np.zeros(n, dtype=np.int64),
        "n_leapfrog": np.zeros(n, dtype=np.int64),
        "accept_stat": np.zeros(n),
    }
    for it in range(n):
        q, lp, g, depth, nleap, acc, div = nuts.transition(q, lp, g)
        out["q"][it] = q
        out["divergent"][it] = div
        out["tree_depth"][it] = depth
        out["n_leapfrog"][it] = nleap
        out["accept_stat"][it] = acc
    out["step_size"] = nuts.step_size
    out["inv_metric"] = nuts.inv_metric.copy()
    out["warmup_divergences"] = warm_div
    return out


def sample(target, config: SamplerConfig | None = None, compiled=None) -> PosteriorDraws:
    """Draw ``config.n_chains`` chains from ``target``.

    ``target`` is any callable ``q -> (log_density, gradient)`` with a ``dim``
    attribute; ``param_names`` and ``constrain`` are used when present, and
    ``standard_coordinates`` maps the stored unconstrained draws back from a
    reparameterised target. Targets that also expose ``jit_fn``/``jit_args`` (a numba function and
    its argument tuple) run through the compiled transition unless
    ``compiled=False``. Chains are independent and deterministic given
    ``config.seed``.
    """
    config = config or SamplerConfig()
    chains = [run_chain(target, config, c, compiled) for c in range(config.n_chains)]
    Q = np.stack([c["q"] for c in chains])
    constrain = getattr(target, "constrain", None)
    if constrain is not None:
        C = constrain(Q.reshape(-1, target.dim)).reshape(Q.shape[0], Q.shape[1], -1)
    else:
        C = Q.copy()
    names = getattr(target, "param_names", None) or [f"x[{j}]" for j in range(C.shape[2])]
    standard = getattr(target, "standard_coordinates", None)
    U = Q if standard is None else standard(Q.reshape(-1, target.dim)).reshape(Q.shape)
    return PosteriorDraws(
        param_names=list(names),
        draws=C,
        divergent=np.stack([c["divergent"] for c in chains]),
        step_size=np.array([c["step_size"] for c in chains]),
        inv_metric=np.stack([c["inv_metric"] for c in chains]),
        unconstrained=U,
        tree_depth=np.stack([c["tree_depth"] for c in chains]),
        n_leapfrog=np.stack([c["n_leapfrog"] for c in chains]),
        accept_stat=np.stack([c["accept_stat"] for c in chains]),
        warmup_divergences=np.array([c["warmup_divergences"] for c in chains]),
        adapt_delta=config.adapt_delta,
        max_tree_depth=config.max_tree_depth,
    )


def _max_rhat(draws: PosteriorDraws) -> float:
    from .diagnostics import split_rhat

    vals = [split_rhat(draws.draws[:, :, j]) for j in range(draws.draws.shape[2])]
    vals = [v for v in vals if np.isfinite(v)]
    return max(vals) if vals else float("nan")


def sample_with_remediation(target, config: SamplerConfig | None = None,
                            remediation_delta: float = REMEDIATION_ADAPT_DELTA,
                            rhat_cutoff: float | None = None, max_extensions: int = 2) -> PosteriorDraws:
    """Sample, then repair the two usual failure modes by rerunning.

    Divergent transitions trigger a rerun at ``remediation_delta``; this
    applies to every run below, and the higher target carries forward. If
    ``rhat_cutoff`` is given and some parameter's split R-hat reaches it (and
    there are at least two chains), the run is repeated with twice the
    iterations and warmup, up to ``max_extensions`` times. If R-hat is still
    too high and the target offers ``strong_data_form(draws)``, a final run
    samples that equivalent target instead, built from the last draws. Every
    rerun uses a fresh seed stream; ``retries`` counts them and
    ``remediation`` lists what was changed.
    """
    config = config or SamplerConfig()
    steps = []

    def run(tgt, cfg):
        d = sample(tgt, cfg)
        if d.n_divergent and cfg.adapt_delta < remediation_delta:
            log.info("%d divergent transitions at adapt_delta=%.2f; retrying at %.2f",
                     d.n_divergent, cfg.adapt_delta, remediation_delta)
            cfg = cfg.replace(adapt_delta=remediation_delta, seed=cfg.seed.child(1))
            d = sample(tgt, cfg)
            steps.append(f"adapt_delta={remediation_delta}")
        return d, cfg

    draws, config = run(target, config)
    if rhat_cutoff is not None and config.n_chains > 1:
        for ext in range(max_extensions):
            rh = _max_rhat(draws)
            if not rh >= rhat_cutoff:
                break
            log.info("max split R-hat %.3f >= %.2f; doubling the run length", rh, rhat_cutoff)
            config = config.replace(iter=2 * config.iter, warmup=2 * config.warmup,
                                    seed=config.seed.child(2 + ext))
            steps.append(f"iter={config.iter}")
            draws, config = run(target, config)
        alternative = getattr(target, "strong_data_form", None)
        if alternative is not None and _max_rhat(draws) >= rhat_cutoff:
            log.info("max split R-hat %.3f still >= %.2f; resampling a reparameterised target",
                     _max_rhat(draws), rhat_cutoff)
            config = config.replace(seed=config.seed.child(2 + max_extensions))
            steps.append("reparameterised")
            draws, config = run(alternative(draws.flat_unconstrained()), config)
    draws.retries = len(steps)
    draws.remediation = steps
    return draws


def thin(draws: PosteriorDraws, k: int) -> PosteriorDraws:
    """Keep iterations whose index is 0 mod ``k`` in every chain."""
    k = int(k)
    if k < 1:
        raise ValueError("thinning factor must be >= 1")
    if k > draws.n_iter:
        raise ValueError(f"thinning factor {k} exceeds chain length {draws.n_iter}")
    if k == 1:
        return draws
    sl = slice(None, None, k)

    def cut(a):
        return None if a is None else a[:, sl]

    return replace(
        draws,
        draws=draws.draws[:, sl],
        divergent=draws.divergent[:, sl],
        unconstrained=cut(draws.unconstrained),
        tree_depth=cut(draws.tree_depth),
        n_leapfrog=cut(draws.n_leapfrog),
        accept_stat=cut(draws.accept_stat),
        thin=draws.thin * k,
        iteration_index=draws.iteration_index[sl],
    )
