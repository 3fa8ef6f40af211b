"""Shared desk-scale ensembles for the acceptance tests and scripts/.

The HMC ensembles take tens of minutes on one core, so results are stored on
disk under a key built from the run settings and a hash of the numerical
source files (code only, comments and docstrings ignored). Any code change
triggers a recomputation.
"""
from __future__ import annotations

import ast
import math
import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numba
import numpy as np

from rtworkflow.bridge import bf_workflow
from rtworkflow.ensemble import EnsembleConfig, SimulationFit, run_ensemble
from rtworkflow.hmc import SamplerConfig
from rtworkflow.model import PriorSpec
from rtworkflow.seeding import SeedSpec
from rtworkflow.sensitivity import prior_sd
from rtworkflow.simulate import draw_prior, generate_design, simulate_dataset

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("RTWORKFLOW_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
# numerical modules behind each cached result
SOURCES = ("hmc.py", "model.py", "simulate.py", "ensemble.py", "diagnostics.py", "sbc.py", "seeding.py")
BF_SOURCES = SOURCES + ("bridge.py",)

MASTER_SEED = 20190603
N_SIMS = 200
ENSEMBLE_SAMPLER = SamplerConfig(n_chains=4, iter=600)
BF_SAMPLER = SamplerConfig(n_chains=4, iter=3000, warmup=1000)
BF_DATASETS = 20
BF_REPETITIONS = 3

PRESETS = {
    "weakly-informative": ("weakly-informative", 37, 15),
    "diffuse": ("diffuse", 37, 15),
    "pooled": ("weakly-informative", 74, 15),
}


def _code_only(text: str) -> str:
    # comments and docstrings do not change results
    tree = ast.parse(text)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_hash(sources=SOURCES) -> str:
    pkg = ROOT / "src" / "rtworkflow"
    h = hashlib.sha256()
    for name in sources:
        h.update(_code_only((pkg / name).read_text()).encode())
    return h.hexdigest()[:16]


def _key(settings: dict, sources=SOURCES) -> str:
    blob = json.dumps(settings, sort_keys=True) + source_hash(sources)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def cache_path(name: str, settings: dict, sources=SOURCES) -> Path:
    return CACHE / f"{name}-{_key(settings, sources)}.json"


def _cached(name: str, settings: dict, compute, encode, decode, sources=SOURCES):
    path = cache_path(name, settings, sources)
    if path.exists():
        return decode(json.loads(path.read_text()))
    result = compute()
    CACHE.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"settings": settings, "result": encode(result)}, indent=1))
    tmp.replace(path)
    return result


def ensemble_config(preset: str) -> EnsembleConfig:
    prior, ns, ni = PRESETS[preset]
    return EnsembleConfig.for_dims(PriorSpec.preset(prior), ns, ni, sampler=ENSEMBLE_SAMPLER,
                                   seed=SeedSpec(MASTER_SEED))


def ensemble_settings(preset: str, n_sims: int = N_SIMS) -> dict:
    cfg = ensemble_config(preset)
    return {"preset": preset, "n_sims": n_sims, "prior": cfg.prior.to_dict(), "ns": cfg.design.n_subjects,
            "ni": cfg.design.n_items, "iter": cfg.sampler.iter, "warmup": cfg.sampler.warmup,
            "chains": cfg.sampler.n_chains, "thin": cfg.thin, "seed": MASTER_SEED}


def ensemble(preset: str, n_sims: int = N_SIMS, jobs: int = 1, progress=None) -> list[SimulationFit]:
    """The ``n_sims`` HMC fits behind the calibration and sensitivity criteria."""
    cfg = ensemble_config(preset)
    return _cached(
        f"ensemble-{preset}", ensemble_settings(preset, n_sims),
        lambda: run_ensemble(cfg, n_sims, jobs=jobs, progress=progress),
        lambda fits: [asdict(f) for f in fits],
        lambda d: [SimulationFit(**f) for f in d["result"]],
    )


def null_dataset(index: int):
    """Data from the null model (no condition effect) on the 37 x 15 design."""
    design = generate_design(37, 15)
    seed = SeedSpec(MASTER_SEED).child(99)
    theta = draw_prior(PriorSpec.weakly_informative(), design, seed, index, include_slope=False)
    return simulate_dataset(theta, design, seed, index)


def bf_null_study(n_datasets: int = BF_DATASETS, progress=None) -> dict:
    """BF01 for each null-generated data set under both prior presets."""
    settings = {"n": n_datasets, "iter": BF_SAMPLER.iter, "warmup": BF_SAMPLER.warmup,
                "chains": BF_SAMPLER.n_chains, "reps": BF_REPETITIONS, "seed": MASTER_SEED}

    def compute():
        out = {"diffuse": [], "weakly-informative": [], "spread": [], "divergent": [], "retries": [], "max_rhat": []}
        for i in range(n_datasets):
            data = null_dataset(i)
            for name in ("diffuse", "weakly-informative"):
                seed = SeedSpec(MASTER_SEED).child(98, i)
                rep = bf_workflow(data, PriorSpec.preset(name), BF_SAMPLER.replace(seed=seed), BF_REPETITIONS,
                                  seed)
                out[name].append(rep.bf10.inverse.bf)
                out["spread"].append(max(e.repeat_spread for e in rep.estimates.values()))
                out["divergent"].append(sum(rep.divergent.values()))
                out["retries"].append(sum(rep.retries.values()))
                out["max_rhat"].append(max(rep.max_rhat.values()))
                if progress:
                    progress(i, name, rep)
        return out

    return _cached("bf-null", settings, compute, lambda r: r, lambda d: d["result"], BF_SOURCES)


def sbc_counts(fits, parameter="beta1", bins=20):
    from rtworkflow.sbc import results_from_fits

    return results_from_fits(fits, (parameter,), bins)[parameter]


def mean_contraction(fits, prior: PriorSpec, parameter="beta1") -> float:
    sd0 = prior_sd(prior, parameter)
    s = [1.0 - (f.post_sd[parameter] / sd0) ** 2 for f in fits if not f.failed]
    return float(np.mean(s))


def cli_pipeline(out, jobs: int = 1, seed: int = 11) -> dict:
    """Run every subcommand at toy scale into ``out``; returns {command: exit code}."""
    from rtworkflow.cli import main

    out = str(out)
    small = ["--seed", str(seed), "--out", out, "--subjects", "6", "--items", "4", "--iter", "300", "--chains", "2"]
    data = ["--data", os.path.join(out, "data.csv")]
    runs = {
        "gen-design": ["gen-design", "--simulate", *small],
        "prior-predict": ["prior-predict", *small, "--n-sims", "50"],
        "fit": ["fit", *small, *data],
        "sbc": ["sbc", *small, "--n-sims", "4", "--jobs", str(jobs)],
        "sensitivity": ["sensitivity", *small, "--n-sims", "4", "--jobs", str(jobs)],
        "ppc": ["ppc", *small, *data, "--n-sims", "50"],
        "bf": ["bf", *small, *data],
        "report": ["report", "--out", out],
    }
    return {name: main(argv) for name, argv in runs.items()}


def output_bytes(out) -> dict:
    """Contents of every CSV/JSON file below ``out``."""
    root = Path(out)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in (".csv", ".json")}


@numba.njit
def _funnel_kernel(q, args):
    # Neal's funnel, centered: v ~ N(0, 3), x_k ~ N(0, exp(v / 2))
    v = q[0]
    g = np.empty_like(q)
    lp = -v * v / 18.0
    g[0] = -v / 9.0
    n = q.size - 1
    ev = math.exp(-v)
    for k in range(1, q.size):
        lp += -0.5 * q[k] * q[k] * ev
        g[k] = -q[k] * ev
        g[0] += 0.5 * q[k] * q[k] * ev
    lp += -0.5 * n * v
    g[0] += -0.5 * n
    return lp, g


class Funnel:
    dim = 5
    jit_fn = _funnel_kernel
    jit_args = (0.0,)

    def __call__(self, q):
        return _funnel_kernel(np.asarray(q, dtype=float), self.jit_args)
