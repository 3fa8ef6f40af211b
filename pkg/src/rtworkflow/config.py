"""Run configuration: a TOML file plus command-line overrides, validated in one pass.

Example file::

    seed = 20190603
    out = "runs/weak"
    jobs = 1

    [model]
    variant = "full"                 # or "null"
    prior = "weakly-informative"     # "diffuse", or a path to a prior TOML file

    [prior.slope]                    # optional per-parameter overrides
    family = "normal"
    mean = 0.0
    sd = 0.05

    [design]
    n_subjects = 37
    n_items = 15
    # data = "data.csv"

    [sampler]
    chains = 4
    iter = 2000
    warmup = 1000
    adapt_delta = 0.8
    max_tree_depth = 10

    [workflow]
    n_sims = 200
    thin = 8
    bins = 20
    coverage = 0.99
    monitored = ["beta1"]
    bridge_repetitions = 3
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .hmc import SamplerConfig
from .model import PriorSpec
from .seeding import SeedSpec

PRIOR_PARAMS = ("intercept", "slope", "sd_subj_int", "sd_subj_so", "sd_item_int", "sd_item_so", "sigma",
                "cor_subj", "cor_item")

# section -> key -> (type, default)
SCHEMA = {
    "": {"seed": (int, 20190603), "out": (str, "out"), "jobs": (int, 1)},
    "model": {"variant": (str, "full"), "prior": (str, "weakly-informative")},
    "design": {"n_subjects": (int, 37), "n_items": (int, 15), "data": (str, None)},
    "sampler": {"chains": (int, 4), "iter": (int, 2000), "warmup": (int, None), "adapt_delta": (float, 0.8),
                "max_tree_depth": (int, 10)},
    "workflow": {"n_sims": (int, None), "thin": (int, 8), "bins": (int, 20), "coverage": (float, 0.99),
                 "monitored": (list, ["beta1"]), "bridge_repetitions": (int, 3)},
}


@dataclass
class RunConfig:
    seed: int = 20190603
    out: Path = Path("out")
    jobs: int = 1
    include_slope: bool = True
    prior: PriorSpec = field(default_factory=PriorSpec.weakly_informative)
    n_subjects: int = 37
    n_items: int = 15
    data: Path | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_sims: int | None = None
    thin: int = 8
    bins: int = 20
    coverage: float = 0.99
    monitored: tuple = ("beta1",)
    bridge_repetitions: int = 3

    @property
    def seed_spec(self) -> SeedSpec:
        return SeedSpec(self.seed)

    @property
    def model_name(self) -> str:
        return "full" if self.include_slope else "null"

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model_name,
            "prior": self.prior.to_dict(),
            "design": {"n_subjects": self.n_subjects, "n_items": self.n_items,
                       "data": str(self.data) if self.data else None},
            "sampler": {"chains": self.sampler.n_chains, "iter": self.sampler.iter,
                        "warmup": self.sampler.warmup, "adapt_delta": self.sampler.adapt_delta,
                        "max_tree_depth": self.sampler.max_tree_depth},
            "workflow": {"n_sims": self.n_sims, "thin": self.thin, "bins": self.bins,
                         "coverage": self.coverage, "monitored": list(self.monitored),
                         "bridge_repetitions": self.bridge_repetitions},
        }


def _check_type(value, kind):
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, kind)


def load_prior(spec: str, overrides: dict | None, problems: list, where: str) -> PriorSpec | None:
    """Resolve a preset name or a prior TOML path, then apply per-parameter overrides."""
    base = None
    try:
        base = PriorSpec.preset(spec)
    except KeyError:
        path = Path(spec)
        if not path.exists():
            problems.append(f"{where}: unknown prior {spec!r} (expected 'diffuse', 'weakly-informative' "
                            "or an existing TOML file)")
            return None
        try:
            table = tomllib.loads(path.read_text())
            base = PriorSpec.from_dict(table.get("prior", table))
        except (tomllib.TOMLDecodeError, KeyError, ValueError, TypeError) as exc:
            problems.append(f"{where}: cannot read prior file {spec}: {exc}")
            return None
    if not overrides:
        return base
    d = base.to_dict()
    ok = True
    for key, entry in overrides.items():
        if key not in PRIOR_PARAMS:
            problems.append(f"prior.{key}: unknown prior parameter (expected one of {', '.join(PRIOR_PARAMS)})")
            ok = False
            continue
        if not isinstance(entry, dict):
            problems.append(f"prior.{key}: expected a table with family and its hyperparameters")
            ok = False
            continue
        d[key] = {**d[key], **entry}
    families = {"intercept": "normal", "slope": "normal", "cor_subj": "lkj", "cor_item": "lkj"}
    for key in overrides:
        want = families.get(key, "half-normal")
        if key in PRIOR_PARAMS and isinstance(overrides[key], dict) and d[key].get("family") != want:
            problems.append(f"prior.{key}: family must be {want!r}, got {d[key].get('family')!r}")
            ok = False
    if not ok:
        return None
    try:
        return PriorSpec.from_dict(d | {"name": "custom"})
    except (KeyError, ValueError, TypeError) as exc:
        problems.append(f"prior: invalid hyperparameters: {exc}")
        return None


def resolve(file_values: dict | None = None, overrides: dict | None = None, source: str = "config") -> RunConfig:
    """Merge file values with flag overrides (``{"sampler.iter": 600, ...}``) and validate everything.

    Raises ConfigError listing every problem found.
    """
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    problems = []
    merged = {sec: {} for sec in SCHEMA}
    origin = {}
    for key, value in file_values.items():
        if key in SCHEMA and key != "" and isinstance(value, dict):
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    problems.append(f"{key}.{k}: unknown key (in {source})")
                    continue
                merged[key][k] = v
                origin[f"{key}.{k}"] = source
        elif key == "prior" and isinstance(value, dict):
            continue
        elif key in SCHEMA[""]:
            merged[""][key] = value
            origin[key] = source
        else:
            problems.append(f"{key}: unknown key (in {source})")
    for dotted, value in overrides.items():
        sec, _, k = dotted.rpartition(".")
        if sec not in SCHEMA or k not in SCHEMA[sec]:
            problems.append(f"{dotted}: unknown setting")
            continue
        merged[sec][k] = value
        origin[dotted] = "command line"
    values = {}
    for sec, keys in SCHEMA.items():
        for k, (kind, default) in keys.items():
            dotted = f"{sec}.{k}" if sec else k
            v = merged[sec].get(k, default)
            if v is not None and not _check_type(v, kind):
                problems.append(f"{dotted}: expected {kind.__name__}, got {v!r} (from {origin.get(dotted, 'default')})")
                v = default
            values[dotted] = v

    def bad(dotted, msg):
        problems.append(f"{dotted}: {msg}, got {values[dotted]!r} (from {origin.get(dotted, 'default')})")

    if values["seed"] is not None and not 0 <= values["seed"] < 2**64:
        bad("seed", "must be an unsigned 64-bit integer")
    if values["jobs"] < 1:
        bad("jobs", "must be >= 1")
    if values["model.variant"] not in ("full", "null"):
        bad("model.variant", "must be 'full' or 'null'")
    for k in ("design.n_subjects", "design.n_items"):
        if values[k] < 1:
            bad(k, "must be >= 1")
    if values["design.data"] is not None and not Path(values["design.data"]).exists():
        bad("design.data", "file does not exist")
    if values["sampler.chains"] < 1:
        bad("sampler.chains", "must be >= 1")
    if values["sampler.iter"] < 2:
        bad("sampler.iter", "must be >= 2")
    warm = values["sampler.warmup"]
    if warm is not None and not 0 <= warm < values["sampler.iter"]:
        bad("sampler.warmup", f"must satisfy 0 <= warmup < iter ({values['sampler.iter']})")
    if not 0 < values["sampler.adapt_delta"] < 1:
        bad("sampler.adapt_delta", "must lie in (0, 1)")
    if values["sampler.max_tree_depth"] < 1:
        bad("sampler.max_tree_depth", "must be >= 1")
    if values["workflow.n_sims"] is not None and values["workflow.n_sims"] < 1:
        bad("workflow.n_sims", "must be >= 1")
    if values["workflow.thin"] < 1:
        bad("workflow.thin", "must be >= 1")
    if values["workflow.bins"] < 1:
        bad("workflow.bins", "must be >= 1")
    if not 0 < values["workflow.coverage"] < 1:
        bad("workflow.coverage", "must lie in (0, 1)")
    if values["workflow.bridge_repetitions"] < 1:
        bad("workflow.bridge_repetitions", "must be >= 1")
    mon = values["workflow.monitored"]
    if not mon or not all(isinstance(m, str) for m in mon):
        bad("workflow.monitored", "must be a non-empty list of parameter names")
    elif values["model.variant"] == "null" and "beta1" in mon:
        bad("workflow.monitored", "the null model has no beta1")

    prior = load_prior(values["model.prior"], file_values.get("prior"), problems, "model.prior")
    if problems:
        raise ConfigError(problems)
    sampler = SamplerConfig(n_chains=values["sampler.chains"], iter=values["sampler.iter"], warmup=warm,
                            adapt_delta=values["sampler.adapt_delta"],
                            max_tree_depth=values["sampler.max_tree_depth"], seed=SeedSpec(values["seed"]))
    return RunConfig(
        seed=values["seed"],
        out=Path(values["out"]),
        jobs=values["jobs"],
        include_slope=values["model.variant"] == "full",
        prior=prior,
        n_subjects=values["design.n_subjects"],
        n_items=values["design.n_items"],
        data=Path(values["design.data"]) if values["design.data"] else None,
        sampler=sampler,
        n_sims=values["workflow.n_sims"],
        thin=values["workflow.thin"],
        bins=values["workflow.bins"],
        coverage=values["workflow.coverage"],
        monitored=tuple(mon),
        bridge_repetitions=values["workflow.bridge_repetitions"],
    )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    file_values = {}
    source = "defaults"
    if path is not None:
        p = Path(path)
        try:
            file_values = tomllib.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {p} does not exist"]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{p}: {exc}"]) from None
        source = str(p)
    return resolve(file_values, overrides, source)
