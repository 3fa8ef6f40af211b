"""Hierarchical lognormal mixed model for a two-condition repeated-measures design.

Reading time of subject ``s`` on item ``i`` in condition ``so`` (coded -1/+1)::

    log rt ~ Normal(mu, sigma)
    mu = beta0 + S0[s] + I0[i] + (beta1 + S1[s] + I1[i]) * so

with correlated (intercept, slope) adjustments per subject and per item. The
latent adjustments are sampled non-centered: ``S = L_S @ z`` with ``z`` standard
normal and ``L_S`` the Cholesky factor of the 2x2 covariance. All densities are
fully normalised so that marginal likelihoods come out right.

Unconstrained layout (full model, 9 + 2 * n_subjects + 2 * n_items entries)::

    beta0, beta1,
    log sd_subj_int, log sd_subj_so, atanh cor_subj,
    log sd_item_int, log sd_item_so, atanh cor_item,
    log sigma,
    z_subj_int[n_s], z_subj_so[n_s], z_item_int[n_i], z_item_so[n_i]

The null variant drops ``beta1``.
"""
from __future__ import annotations

import math
from dataclasses import InitVar, dataclass, field
from functools import cached_property

import numba
import numpy as np
from scipy import special

from .errors import BoundaryError, DensityUnderflowError, DesignError, OutOfSupportError

LOG_2PI = math.log(2.0 * math.pi)
LOG_SQRT_2PI = 0.5 * LOG_2PI
# |log sd| or |atanh rho| beyond these is treated as a zero-density region
_MAX_LOG_SD = 300.0
_MAX_ATANH = 300.0


# ---------------------------------------------------------------------------
# design and data


@dataclass(frozen=True, eq=False)
class ExperimentDesign:
    """Subjects x items layout with sum-coded condition per trial.

    ``subject``, ``item`` and ``so`` are parallel integer arrays, one entry per
    trial. Pass ``require_balance=False`` for ingested data whose Latin square
    is incomplete.
    """

    n_subjects: int
    n_items: int
    subject: np.ndarray
    item: np.ndarray
    so: np.ndarray
    require_balance: InitVar[bool] = True

    def __post_init__(self, require_balance):
        subject = np.asarray(self.subject, dtype=np.int64)
        item = np.asarray(self.item, dtype=np.int64)
        so = np.asarray(self.so, dtype=np.int64)
        for name, arr in (("subject", subject), ("item", item), ("so", so)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.n_subjects < 1 or self.n_items < 1:
            raise DesignError("a design needs at least one subject and one item")
        if not (subject.shape == item.shape == so.shape) or subject.ndim != 1:
            raise DesignError("subject, item and so must be 1-d arrays of equal length")
        if subject.size == 0:
            raise DesignError("design has no trials")
        if subject.min() < 0 or subject.max() >= self.n_subjects:
            raise DesignError("subject index out of range")
        if item.min() < 0 or item.max() >= self.n_items:
            raise DesignError("item index out of range")
        if not np.all(np.abs(so) == 1):
            raise DesignError("condition codes must be -1 (subject relative) or +1 (object relative)")
        cell = subject * self.n_items + item
        if np.unique(cell).size != cell.size:
            raise DesignError("a (subject, item) pair occurs more than once")
        if require_balance and not self.is_balanced():
            raise DesignError("condition counts within a subject differ by more than one")

    @property
    def n_trials(self) -> int:
        return int(self.subject.size)

    @property
    def trials(self):
        return list(zip(self.subject.tolist(), self.item.tolist(), self.so.tolist()))

    def condition_counts(self, by="subject"):
        """(n_groups, 2) array of (#so=-1, #so=+1) per subject or per item."""
        idx, n = (self.subject, self.n_subjects) if by == "subject" else (self.item, self.n_items)
        out = np.zeros((n, 2), dtype=np.int64)
        np.add.at(out, (idx, (self.so > 0).astype(np.int64)), 1)
        return out

    def is_balanced(self) -> bool:
        counts = self.condition_counts("subject")
        return bool(np.all(np.abs(counts[:, 0] - counts[:, 1]) <= 1))

    def __eq__(self, other):
        if not isinstance(other, ExperimentDesign):
            return NotImplemented
        return (
            self.n_subjects == other.n_subjects
            and self.n_items == other.n_items
            and np.array_equal(self.subject, other.subject)
            and np.array_equal(self.item, other.item)
            and np.array_equal(self.so, other.so)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    design: ExperimentDesign
    rt_ms: np.ndarray

    def __post_init__(self):
        rt = np.asarray(self.rt_ms, dtype=float)
        rt.setflags(write=False)
        object.__setattr__(self, "rt_ms", rt)
        if rt.shape != (self.design.n_trials,):
            raise DesignError(f"expected {self.design.n_trials} reading times, got shape {rt.shape}")
        if not np.all(np.isfinite(rt)) or np.any(rt <= 0):
            raise DesignError("reading times must be finite and strictly positive")

    @cached_property
    def log_rt(self) -> np.ndarray:
        return np.log(self.rt_ms)


# ---------------------------------------------------------------------------
# prior families


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd >= 0:
            raise ValueError("Normal sd must be non-negative")

    def logpdf(self, x):
        if self.sd == 0:
            raise OutOfSupportError("density of a point-mass prior is undefined")
        return -0.5 * ((x - self.mean) / self.sd) ** 2 - math.log(self.sd) - LOG_SQRT_2PI

    def sample(self, rng, size=None):
        return self.mean + self.sd * rng.standard_normal(size)

    def std(self):
        return float(self.sd)


@dataclass(frozen=True)
class HalfNormal:
    """Normal(0, sd) truncated to the positive half-line."""

    sd: float

    def __post_init__(self):
        if not self.sd >= 0:
            raise ValueError("HalfNormal sd must be non-negative")

    def logpdf(self, x):
        if np.any(np.asarray(x) < 0):
            raise OutOfSupportError(f"half-normal parameter must be >= 0, got {x}")
        if self.sd == 0:
            raise OutOfSupportError("density of a point-mass prior is undefined")
        return math.log(2.0) - 0.5 * (x / self.sd) ** 2 - math.log(self.sd) - LOG_SQRT_2PI

    def sample(self, rng, size=None):
        return np.abs(self.sd * rng.standard_normal(size))

    def std(self):
        return float(self.sd) * math.sqrt(1.0 - 2.0 / math.pi)


@dataclass(frozen=True)
class LKJ:
    """LKJ(eta) on a 2x2 correlation matrix, i.e. a density on the scalar rho."""

    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("LKJ eta must be positive")

    @property
    def log_normalizer(self) -> float:
        # integral of (1 - rho^2)^(eta - 1) over (-1, 1)
        return (2.0 * self.eta - 1.0) * math.log(2.0) + special.betaln(self.eta, self.eta)

    def logpdf(self, rho):
        if np.any(np.abs(np.asarray(rho)) >= 1):
            raise OutOfSupportError(f"correlation must lie in (-1, 1), got {rho}")
        return (self.eta - 1.0) * np.log1p(-np.square(rho)) - self.log_normalizer

    def sample(self, rng, size=None):
        return 2.0 * rng.beta(self.eta, self.eta, size) - 1.0

    def std(self):
        # rho = 2B - 1 with B ~ Beta(eta, eta)
        return 2.0 * math.sqrt(1.0 / (4.0 * (2.0 * self.eta + 1.0)))


@dataclass(frozen=True)
class PriorSpec:
    intercept: Normal
    slope: Normal
    sd_subj_int: HalfNormal
    sd_subj_so: HalfNormal
    sd_item_int: HalfNormal
    sd_item_so: HalfNormal
    sigma: HalfNormal
    cor_subj: LKJ
    cor_item: LKJ
    name: str = "custom"

    @classmethod
    def diffuse(cls) -> "PriorSpec":
        return cls(
            intercept=Normal(0.0, 10.0),
            slope=Normal(0.0, 1.0),
            sd_subj_int=HalfNormal(1.0),
            sd_subj_so=HalfNormal(1.0),
            sd_item_int=HalfNormal(1.0),
            sd_item_so=HalfNormal(1.0),
            sigma=HalfNormal(1.0),
            cor_subj=LKJ(2.0),
            cor_item=LKJ(2.0),
            name="diffuse",
        )

    @classmethod
    def weakly_informative(cls) -> "PriorSpec":
        return cls(
            intercept=Normal(6.0, 0.6),
            slope=Normal(0.0, 0.05),
            sd_subj_int=HalfNormal(0.1),
            sd_subj_so=HalfNormal(0.1),
            sd_item_int=HalfNormal(0.1),
            sd_item_so=HalfNormal(0.1),
            sigma=HalfNormal(0.5),
            cor_subj=LKJ(2.0),
            cor_item=LKJ(2.0),
            name="weakly-informative",
        )

    @classmethod
    def preset(cls, name: str) -> "PriorSpec":
        key = name.lower().replace("_", "-")
        if key == "diffuse":
            return cls.diffuse()
        if key in ("weakly-informative", "weak", "informative"):
            return cls.weakly_informative()
        raise KeyError(f"unknown prior preset {name!r} (expected 'diffuse' or 'weakly-informative')")

    def replace(self, **changes) -> "PriorSpec":
        from dataclasses import replace

        return replace(self, **changes)

    def family(self, parameter: str):
        """The prior family attached to a structural parameter name."""
        table = {
            "beta0": self.intercept,
            "beta1": self.slope,
            "sd_subj_int": self.sd_subj_int,
            "sd_subj_so": self.sd_subj_so,
            "cor_subj": self.cor_subj,
            "sd_item_int": self.sd_item_int,
            "sd_item_so": self.sd_item_so,
            "cor_item": self.cor_item,
            "sigma": self.sigma,
        }
        try:
            return table[parameter]
        except KeyError:
            raise KeyError(f"no prior declared for parameter {parameter!r}") from None

    def hyper_array(self) -> np.ndarray:
        """Flat hyperparameter vector consumed by the compiled density."""
        return np.array(
            [
                self.intercept.mean,
                self.intercept.sd,
                self.slope.mean,
                self.slope.sd,
                self.sd_subj_int.sd,
                self.sd_subj_so.sd,
                self.sd_item_int.sd,
                self.sd_item_so.sd,
                self.sigma.sd,
                self.cor_subj.eta,
                self.cor_item.eta,
                self.cor_subj.log_normalizer,
                self.cor_item.log_normalizer,
            ],
            dtype=float,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "intercept": {"family": "normal", "mean": self.intercept.mean, "sd": self.intercept.sd},
            "slope": {"family": "normal", "mean": self.slope.mean, "sd": self.slope.sd},
            "sd_subj_int": {"family": "half-normal", "sd": self.sd_subj_int.sd},
            "sd_subj_so": {"family": "half-normal", "sd": self.sd_subj_so.sd},
            "sd_item_int": {"family": "half-normal", "sd": self.sd_item_int.sd},
            "sd_item_so": {"family": "half-normal", "sd": self.sd_item_so.sd},
            "sigma": {"family": "half-normal", "sd": self.sigma.sd},
            "cor_subj": {"family": "lkj", "eta": self.cor_subj.eta},
            "cor_item": {"family": "lkj", "eta": self.cor_item.eta},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        builders = {"normal": lambda e: Normal(float(e["mean"]), float(e["sd"])),
                    "half-normal": lambda e: HalfNormal(float(e["sd"])),
                    "lkj": lambda e: LKJ(float(e["eta"]))}
        base = cls.preset(d["base"]) if "base" in d else None
        fields_ = {}
        for key in ("intercept", "slope", "sd_subj_int", "sd_subj_so", "sd_item_int",
                    "sd_item_so", "sigma", "cor_subj", "cor_item"):
            if key in d:
                entry = d[key]
                fields_[key] = builders[entry["family"]](entry)
            elif base is not None:
                fields_[key] = getattr(base, key)
            else:
                raise KeyError(f"prior entry {key!r} missing")
        return cls(name=str(d.get("name", "custom")), **fields_)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FixedEffects:
    beta0: float
    beta1: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.beta0) or (self.beta1 is not None and not math.isfinite(self.beta1)):
            raise ValueError("fixed effects must be finite")


@dataclass(frozen=True)
class RandomEffectBlock:
    sigma_int: float
    sigma_slope: float
    rho: float

    def __post_init__(self):
        if self.sigma_int < 0 or self.sigma_slope < 0:
            raise OutOfSupportError("random-effect SDs must be non-negative")
        if not -1 < self.rho < 1:
            raise OutOfSupportError("random-effect correlation must lie in (-1, 1)")

    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma_int * self.sigma_slope
        return np.array([[self.sigma_int**2, c], [c, self.sigma_slope**2]])

    def cholesky(self) -> np.ndarray:
        return np.array(
            [[self.sigma_int, 0.0],
             [self.rho * self.sigma_slope, self.sigma_slope * math.sqrt(1.0 - self.rho**2)]]
        )


@dataclass(frozen=True, eq=False)
class LatentEffects:
    subject_effects: np.ndarray  # (n_subjects, 2): intercept, slope adjustments
    item_effects: np.ndarray  # (n_items, 2)

    def __post_init__(self):
        for name in ("subject_effects", "item_effects"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"{name} must have shape (n, 2)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    fixed: FixedEffects
    subj_block: RandomEffectBlock
    item_block: RandomEffectBlock
    sigma_rt: float
    latents: LatentEffects

    def __post_init__(self):
        if not self.sigma_rt >= 0:
            raise OutOfSupportError("sigma_rt must be non-negative")

    @property
    def include_slope(self) -> bool:
        return self.fixed.beta1 is not None

    def structural(self) -> dict:
        out = {"beta0": self.fixed.beta0}
        if self.include_slope:
            out["beta1"] = self.fixed.beta1
        out.update(
            sd_subj_int=self.subj_block.sigma_int,
            sd_subj_so=self.subj_block.sigma_slope,
            cor_subj=self.subj_block.rho,
            sd_item_int=self.item_block.sigma_int,
            sd_item_so=self.item_block.sigma_slope,
            cor_item=self.item_block.rho,
            sigma=self.sigma_rt,
        )
        return out

    def linear_predictor(self, design: ExperimentDesign) -> np.ndarray:
        S = self.latents.subject_effects
        I = self.latents.item_effects
        if S.shape[0] != design.n_subjects or I.shape[0] != design.n_items:
            raise DesignError("latent effects do not match the design dimensions")
        b1 = self.fixed.beta1 if self.include_slope else 0.0
        s, i, x = design.subject, design.item, design.so
        return self.fixed.beta0 + S[s, 0] + I[i, 0] + (b1 + S[s, 1] + I[i, 1]) * x

    def to_flat(self) -> np.ndarray:
        """Constrained values in the order of :meth:`ModelVariant.param_names`."""
        S = self.latents.subject_effects
        I = self.latents.item_effects
        return np.concatenate([list(self.structural().values()), S[:, 0], S[:, 1], I[:, 0], I[:, 1]])


# ---------------------------------------------------------------------------
# model variants and transforms

_STRUCT_FULL = ("beta0", "beta1", "sd_subj_int", "sd_subj_so", "cor_subj",
                "sd_item_int", "sd_item_so", "cor_item", "sigma")


@dataclass(frozen=True)
class ModelVariant:
    include_slope: bool = True

    @property
    def name(self) -> str:
        return "full" if self.include_slope else "null"

    @property
    def structural_names(self) -> tuple[str, ...]:
        if self.include_slope:
            return _STRUCT_FULL
        return tuple(n for n in _STRUCT_FULL if n != "beta1")

    @property
    def n_structural(self) -> int:
        return len(self.structural_names)

    def n_params(self, design: ExperimentDesign) -> int:
        return self.n_structural + 2 * design.n_subjects + 2 * design.n_items

    def param_names(self, design: ExperimentDesign) -> list[str]:
        names = list(self.structural_names)
        names += [f"subj_int[{s}]" for s in range(design.n_subjects)]
        names += [f"subj_so[{s}]" for s in range(design.n_subjects)]
        names += [f"item_int[{i}]" for i in range(design.n_items)]
        names += [f"item_so[{i}]" for i in range(design.n_items)]
        return names

    def unconstrained_names(self, design: ExperimentDesign) -> list[str]:
        tr = {"sd_subj_int": "log_sd_subj_int", "sd_subj_so": "log_sd_subj_so",
              "sd_item_int": "log_sd_item_int", "sd_item_so": "log_sd_item_so",
              "cor_subj": "atanh_cor_subj", "cor_item": "atanh_cor_item", "sigma": "log_sigma"}
        names = [tr.get(n, n) for n in self.structural_names]
        names += [f"z_subj_int[{s}]" for s in range(design.n_subjects)]
        names += [f"z_subj_so[{s}]" for s in range(design.n_subjects)]
        names += [f"z_item_int[{i}]" for i in range(design.n_items)]
        names += [f"z_item_so[{i}]" for i in range(design.n_items)]
        return names


def model_variant(include_slope: bool = True) -> ModelVariant:
    """Full model (``include_slope=True``) or the null model without ``beta1``.

    Both keep the by-subject and by-item random slopes and share every prior
    except the one on ``beta1``.
    """
    return ModelVariant(bool(include_slope))


def _check_interior_sd(value, name):
    if value <= 0:
        raise BoundaryError(f"{name} = {value} lies on the boundary of (0, inf)")


def _check_interior_rho(value, name):
    if not -1 < value < 1:
        raise BoundaryError(f"{name} = {value} lies on the boundary of (-1, 1)")


def to_unconstrained(params: ParameterVector) -> np.ndarray:
    """Map constrained parameters to the flat unconstrained vector."""
    sb, ib = params.subj_block, params.item_block
    for value, name in ((sb.sigma_int, "sd_subj_int"), (sb.sigma_slope, "sd_subj_so"),
                        (ib.sigma_int, "sd_item_int"), (ib.sigma_slope, "sd_item_so"),
                        (params.sigma_rt, "sigma")):
        _check_interior_sd(value, name)
    _check_interior_rho(sb.rho, "cor_subj")
    _check_interior_rho(ib.rho, "cor_item")

    def standardize(effects, block):
        z0 = effects[:, 0] / block.sigma_int
        z1 = (effects[:, 1] / block.sigma_slope - block.rho * z0) / math.sqrt(1.0 - block.rho**2)
        return z0, z1

    zs0, zs1 = standardize(params.latents.subject_effects, sb)
    zi0, zi1 = standardize(params.latents.item_effects, ib)
    head = [params.fixed.beta0]
    if params.include_slope:
        head.append(params.fixed.beta1)
    head += [math.log(sb.sigma_int), math.log(sb.sigma_slope), math.atanh(sb.rho),
             math.log(ib.sigma_int), math.log(ib.sigma_slope), math.atanh(ib.rho),
             math.log(params.sigma_rt)]
    return np.concatenate([head, zs0, zs1, zi0, zi1])


def _split(q, variant: ModelVariant, n_subjects: int, n_items: int):
    q = np.asarray(q, dtype=float)
    k = variant.n_structural
    expected = k + 2 * n_subjects + 2 * n_items
    if q.shape[-1] != expected:
        raise ValueError(f"expected unconstrained vector of length {expected}, got {q.shape[-1]}")
    head = q[..., :k]
    zs = q[..., k:k + 2 * n_subjects]
    zi = q[..., k + 2 * n_subjects:]
    return head, zs[..., :n_subjects], zs[..., n_subjects:], zi[..., :n_items], zi[..., n_items:]


def to_constrained(q, design: ExperimentDesign, variant: ModelVariant | None = None) -> ParameterVector:
    """Inverse of :func:`to_unconstrained`; the variant is inferred from the length of ``q``."""
    q = np.asarray(q, dtype=float)
    if variant is None:
        variant = _infer_variant(q.shape[-1], design)
    head, zs0, zs1, zi0, zi1 = _split(q, variant, design.n_subjects, design.n_items)
    k = 0
    beta0 = float(head[0])
    beta1 = None
    if variant.include_slope:
        beta1 = float(head[1])
        k = 1
    sb = RandomEffectBlock(math.exp(head[k + 1]), math.exp(head[k + 2]), math.tanh(head[k + 3]))
    ib = RandomEffectBlock(math.exp(head[k + 4]), math.exp(head[k + 5]), math.tanh(head[k + 6]))
    sigma = math.exp(head[k + 7])
    for value, name in ((sb.sigma_int, "sd_subj_int"), (sb.sigma_slope, "sd_subj_so"),
                        (ib.sigma_int, "sd_item_int"), (ib.sigma_slope, "sd_item_so"), (sigma, "sigma")):
        if value == 0 or not math.isfinite(value):
            raise BoundaryError(f"{name} under/overflowed to {value}")
    _check_interior_rho(sb.rho, "cor_subj")
    _check_interior_rho(ib.rho, "cor_item")
    S = np.column_stack([zs0, zs1]) @ sb.cholesky().T
    I = np.column_stack([zi0, zi1]) @ ib.cholesky().T
    return ParameterVector(FixedEffects(beta0, beta1), sb, ib, sigma, LatentEffects(S, I))


def _infer_variant(length, design):
    for variant in (ModelVariant(True), ModelVariant(False)):
        if variant.n_params(design) == length:
            return variant
    raise ValueError(f"vector of length {length} matches neither model variant for this design")


def constrain_draws(Q: np.ndarray, design: ExperimentDesign, variant: ModelVariant) -> np.ndarray:
    """Vectorised constraining transform; rows of ``Q`` are unconstrained draws."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    head, zs0, zs1, zi0, zi1 = _split(Q, variant, design.n_subjects, design.n_items)
    k = 1 if variant.include_slope else 0
    out = np.empty_like(Q)
    out[:, : k + 1] = head[:, : k + 1]
    sd_s0, sd_s1, r_s = np.exp(head[:, k + 1]), np.exp(head[:, k + 2]), np.tanh(head[:, k + 3])
    sd_i0, sd_i1, r_i = np.exp(head[:, k + 4]), np.exp(head[:, k + 5]), np.tanh(head[:, k + 6])
    out[:, k + 1:k + 8] = np.column_stack([sd_s0, sd_s1, r_s, sd_i0, sd_i1, r_i, np.exp(head[:, k + 7])])
    ns, ni = design.n_subjects, design.n_items
    j = variant.n_structural
    out[:, j:j + ns] = sd_s0[:, None] * zs0
    out[:, j + ns:j + 2 * ns] = sd_s1[:, None] * (r_s[:, None] * zs0 + np.sqrt(1 - r_s**2)[:, None] * zs1)
    j += 2 * ns
    out[:, j:j + ni] = sd_i0[:, None] * zi0
    out[:, j + ni:j + 2 * ni] = sd_i1[:, None] * (r_i[:, None] * zi0 + np.sqrt(1 - r_i**2)[:, None] * zi1)
    return out


def log_jacobian(q, variant: ModelVariant) -> float:
    """log |d constrained / d unconstrained| for the structural parameters.

    The latent coordinates are the non-centered ``z`` themselves, so they
    contribute nothing here: their prior is written directly on ``z``.
    """
    q = np.asarray(q, dtype=float)
    k = 1 if variant.include_slope else 0
    log_sds = q[[k + 1, k + 2, k + 4, k + 5, k + 7]]
    atanhs = q[[k + 3, k + 6]]
    return float(np.sum(log_sds) + np.sum(np.log1p(-np.tanh(atanhs) ** 2)))


def log_jacobian_sd(q, variant: ModelVariant) -> float:
    """Part of :func:`log_jacobian` coming from the log transform of the SDs."""
    q = np.asarray(q, dtype=float)
    k = 1 if variant.include_slope else 0
    return float(np.sum(q[[k + 1, k + 2, k + 4, k + 5, k + 7]]))


# ---------------------------------------------------------------------------
# densities on the constrained scale (reference implementations)


def log_likelihood(data: Dataset, params: ParameterVector) -> float:
    """Exact lognormal log likelihood summed over trials (nats)."""
    sigma = params.sigma_rt
    mu = params.linear_predictor(data.design)
    y = data.log_rt
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = (y - mu) / sigma
        value = float(np.sum(-y - math.log(sigma) - LOG_SQRT_2PI - 0.5 * r * r)) if sigma > 0 else -math.inf
    if not math.isfinite(value):
        raise DensityUnderflowError(f"log likelihood is {value} (sigma_rt = {sigma})")
    return value


def log_prior(params: ParameterVector, prior: PriorSpec) -> float:
    """Normalised log prior.

    The latent effects contribute standard-normal terms on their non-centered
    coordinates, so this is a density over (structural parameters, z).
    """
    sb, ib = params.subj_block, params.item_block
    lp = prior.intercept.logpdf(params.fixed.beta0)
    if params.include_slope:
        lp += prior.slope.logpdf(params.fixed.beta1)
    lp += prior.sd_subj_int.logpdf(sb.sigma_int) + prior.sd_subj_so.logpdf(sb.sigma_slope)
    lp += prior.sd_item_int.logpdf(ib.sigma_int) + prior.sd_item_so.logpdf(ib.sigma_slope)
    lp += prior.sigma.logpdf(params.sigma_rt)
    lp += prior.cor_subj.logpdf(sb.rho) + prior.cor_item.logpdf(ib.rho)
    variant = ModelVariant(params.include_slope)
    z = to_unconstrained(params)[variant.n_structural:]
    lp += float(np.sum(-0.5 * z * z) - z.size * LOG_SQRT_2PI)
    return float(lp)


# ---------------------------------------------------------------------------
# compiled joint density and gradient


@numba.njit(cache=True)
def _log_sech2(u):
    a = abs(u)
    return 2.0 * (math.log(2.0) - a - math.log1p(math.exp(-2.0 * a)))


@numba.njit(cache=True)
def _log_joint_grad(q, subj, item, x, y, ns, ni, hyper, slope, use_lik):
    d = q.shape[0]
    grad = np.zeros(d)
    k = 1 if slope else 0
    for j in range(k + 1, k + 8):
        if not math.isfinite(q[j]):
            return -math.inf, grad
    for j in (k + 1, k + 2, k + 4, k + 5, k + 7):
        if abs(q[j]) > _MAX_LOG_SD:
            return -math.inf, grad
    if abs(q[k + 3]) > _MAX_ATANH or abs(q[k + 6]) > _MAX_ATANH:
        return -math.inf, grad

    b0 = q[0]
    b1 = q[1] if slope else 0.0
    sds0 = math.exp(q[k + 1])
    sds1 = math.exp(q[k + 2])
    rs = math.tanh(q[k + 3])
    cs = 1.0 / math.cosh(q[k + 3])
    sdi0 = math.exp(q[k + 4])
    sdi1 = math.exp(q[k + 5])
    ri = math.tanh(q[k + 6])
    ci = 1.0 / math.cosh(q[k + 6])
    sig = math.exp(q[k + 7])

    o = k + 8
    zs0 = q[o:o + ns]
    zs1 = q[o + ns:o + 2 * ns]
    zi0 = q[o + 2 * ns:o + 2 * ns + ni]
    zi1 = q[o + 2 * ns + ni:o + 2 * ns + 2 * ni]

    S0 = sds0 * zs0
    S1 = sds1 * (rs * zs0 + cs * zs1)
    I0 = sdi0 * zi0
    I1 = sdi1 * (ri * zi0 + ci * zi1)

    lp = 0.0
    if use_lik:
        G0s = np.zeros(ns)
        G1s = np.zeros(ns)
        G0i = np.zeros(ni)
        G1i = np.zeros(ni)
        gb0 = 0.0
        gb1 = 0.0
        ss = 0.0
        sy = 0.0
        n = y.shape[0]
        for t in range(n):
            s = subj[t]
            i = item[t]
            xt = x[t]
            mu = b0 + S0[s] + I0[i] + (b1 + S1[s] + I1[i]) * xt
            r = (y[t] - mu) / sig
            ss += r * r
            sy += y[t]
            g = r / sig
            gx = g * xt
            gb0 += g
            gb1 += gx
            G0s[s] += g
            G1s[s] += gx
            G0i[i] += g
            G1i[i] += gx
        lp += -sy - n * math.log(sig) - n * LOG_SQRT_2PI - 0.5 * ss
        grad[0] += gb0
        if slope:
            grad[1] += gb1
        grad[k + 7] += ss - n
        gs0 = 0.0
        gs1 = 0.0
        gu = 0.0
        for s in range(ns):
            gs0 += G0s[s] * S0[s]
            gs1 += G1s[s] * S1[s]
            gu += G1s[s] * sds1 * (zs0[s] * cs * cs - rs * cs * zs1[s])
            grad[o + s] += G0s[s] * sds0 + G1s[s] * sds1 * rs
            grad[o + ns + s] += G1s[s] * sds1 * cs
        grad[k + 1] += gs0
        grad[k + 2] += gs1
        grad[k + 3] += gu
        gi0 = 0.0
        gi1 = 0.0
        gv = 0.0
        for i in range(ni):
            gi0 += G0i[i] * I0[i]
            gi1 += G1i[i] * I1[i]
            gv += G1i[i] * sdi1 * (zi0[i] * ci * ci - ri * ci * zi1[i])
            grad[o + 2 * ns + i] += G0i[i] * sdi0 + G1i[i] * sdi1 * ri
            grad[o + 2 * ns + ni + i] += G1i[i] * sdi1 * ci
        grad[k + 4] += gi0
        grad[k + 5] += gi1
        grad[k + 6] += gv

    # fixed effects: Normal priors
    m0 = hyper[0]
    s0 = hyper[1]
    lp += -0.5 * ((b0 - m0) / s0) ** 2 - math.log(s0) - LOG_SQRT_2PI
    grad[0] += -(b0 - m0) / (s0 * s0)
    if slope:
        m1 = hyper[2]
        s1 = hyper[3]
        lp += -0.5 * ((b1 - m1) / s1) ** 2 - math.log(s1) - LOG_SQRT_2PI
        grad[1] += -(b1 - m1) / (s1 * s1)
    # SDs: half-normal prior plus log-transform Jacobian (u = log sd)
    sds = (sds0, sds1, sdi0, sdi1, sig)
    idx = (k + 1, k + 2, k + 4, k + 5, k + 7)
    scales = (hyper[4], hyper[5], hyper[6], hyper[7], hyper[8])
    for j in range(5):
        v = sds[j]
        h = scales[j]
        lp += math.log(2.0) - 0.5 * (v / h) ** 2 - math.log(h) - LOG_SQRT_2PI + q[idx[j]]
        grad[idx[j]] += -(v * v) / (h * h) + 1.0
    # correlations: LKJ prior plus tanh Jacobian, both powers of (1 - rho^2)
    eta_s = hyper[9]
    eta_i = hyper[10]
    lp += eta_s * _log_sech2(q[k + 3]) - hyper[11]
    lp += eta_i * _log_sech2(q[k + 6]) - hyper[12]
    grad[k + 3] += -2.0 * eta_s * rs
    grad[k + 6] += -2.0 * eta_i * ri
    # non-centered latents
    zz = 0.0
    for j in range(o, d):
        zz += q[j] * q[j]
        grad[j] += -q[j]
    lp += -0.5 * zz - (d - o) * LOG_SQRT_2PI
    if not math.isfinite(lp):
        return -math.inf, np.zeros(d)
    for j in range(d):
        if not math.isfinite(grad[j]):
            return -math.inf, np.zeros(d)
    return lp, grad


@numba.njit(cache=True)
def _log_cosh(w):
    a = abs(w)
    return a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0)


@numba.njit(cache=True)
def _centered_log_joint_grad(qc, subj, item, x, y, ns, ni, hyper, slope, use_lik):
    # Latents enter as the adjustments themselves; z = L^{-1} s per group member,
    # then the non-centered density plus the log |dz/ds| Jacobian.
    d = qc.shape[0]
    k = 1 if slope else 0
    o = k + 8
    qn = qc.copy()
    for b in range(2):
        u0 = qc[k + 1 + 3 * b]
        u1 = qc[k + 2 + 3 * b]
        w = qc[k + 3 + 3 * b]
        if not (abs(u0) <= _MAX_LOG_SD and abs(u1) <= _MAX_LOG_SD and abs(w) <= _MAX_ATANH):
            return -math.inf, np.zeros(d)
        n = ns if b == 0 else ni
        a = o if b == 0 else o + 2 * ns
        sd0 = math.exp(u0)
        sd1 = math.exp(u1)
        ch = math.cosh(w)
        sh = math.sinh(w)
        for j in range(n):
            z0 = qc[a + j] / sd0
            qn[a + j] = z0
            qn[a + n + j] = qc[a + n + j] / sd1 * ch - z0 * sh
    lp, gn = _log_joint_grad(qn, subj, item, x, y, ns, ni, hyper, slope, use_lik)
    if not math.isfinite(lp):
        return -math.inf, np.zeros(d)
    g = gn.copy()
    for b in range(2):
        iu0 = k + 1 + 3 * b
        u0 = qc[iu0]
        u1 = qc[iu0 + 1]
        w = qc[iu0 + 2]
        n = ns if b == 0 else ni
        a = o if b == 0 else o + 2 * ns
        sd0 = math.exp(u0)
        sd1 = math.exp(u1)
        ch = math.cosh(w)
        sh = math.sinh(w)
        for j in range(n):
            z0 = qn[a + j]
            av = qc[a + n + j] / sd1
            gz0 = gn[a + j]
            gz1 = gn[a + n + j]
            g[a + j] = (gz0 - gz1 * sh) / sd0
            g[a + n + j] = gz1 * ch / sd1
            g[iu0] += -gz0 * z0 + gz1 * z0 * sh
            g[iu0 + 1] += -gz1 * av * ch
            g[iu0 + 2] += gz1 * (av * sh - z0 * ch)
        lp += n * (_log_cosh(w) - u0 - u1)
        g[iu0] -= n
        g[iu0 + 1] -= n
        g[iu0 + 2] += n * math.tanh(w)
    if not math.isfinite(lp):
        return -math.inf, np.zeros(d)
    return lp, g


@numba.njit(cache=True)
def _model_kernel(q, args):
    subj, item, x, y, ns, ni, hyper, slope, use_lik = args
    return _log_joint_grad(q, subj, item, x, y, ns, ni, hyper, slope, use_lik)


@numba.njit(cache=True)
def _centered_kernel(q, args):
    subj, item, x, y, ns, ni, hyper, slope, use_lik = args
    return _centered_log_joint_grad(q, subj, item, x, y, ns, ni, hyper, slope, use_lik)


@numba.njit(cache=True)
def _preconditioned_kernel(y, args):
    inner, shift, chol = args
    subj, item, x, yy, ns, ni, hyper, slope, use_lik = inner
    lp, g = _centered_log_joint_grad(shift + chol @ y, subj, item, x, yy, ns, ni, hyper, slope, use_lik)
    return lp, chol.T @ g


def centered_to_noncentered(Q, design: ExperimentDesign, variant: ModelVariant) -> np.ndarray:
    """Map centered unconstrained vectors (latents as adjustments) to the standard layout."""
    Q = np.array(Q, dtype=float)
    squeeze = Q.ndim == 1
    Q = np.atleast_2d(Q)
    k = variant.n_structural - 8
    o = k + 8
    for b, (n, a) in enumerate(((design.n_subjects, o), (design.n_items, o + 2 * design.n_subjects))):
        i = k + 1 + 3 * b
        sd0, sd1, w = np.exp(Q[:, i:i + 1]), np.exp(Q[:, i + 1:i + 2]), Q[:, i + 2:i + 3]
        z0 = Q[:, a:a + n] / sd0
        z1 = Q[:, a + n:a + 2 * n] / sd1 * np.cosh(w) - z0 * np.sinh(w)
        Q[:, a:a + n], Q[:, a + n:a + 2 * n] = z0, z1
    return Q[0] if squeeze else Q


def noncentered_to_centered(Q, design: ExperimentDesign, variant: ModelVariant) -> np.ndarray:
    Q = np.array(Q, dtype=float)
    squeeze = Q.ndim == 1
    Q = np.atleast_2d(Q)
    k = variant.n_structural - 8
    o = k + 8
    for b, (n, a) in enumerate(((design.n_subjects, o), (design.n_items, o + 2 * design.n_subjects))):
        i = k + 1 + 3 * b
        sd0, sd1, w = np.exp(Q[:, i:i + 1]), np.exp(Q[:, i + 1:i + 2]), Q[:, i + 2:i + 3]
        z0, z1 = Q[:, a:a + n].copy(), Q[:, a + n:a + 2 * n].copy()
        Q[:, a:a + n] = sd0 * z0
        Q[:, a + n:a + 2 * n] = sd1 * (np.tanh(w) * z0 + z1 / np.cosh(w))
    return Q[0] if squeeze else Q


class ModelTarget:
    """Unconstrained log joint of the mixed model with its exact gradient.

    ``centered=True`` samples the subject and item adjustments directly
    instead of their standardised versions; the density includes the
    Jacobian, so both versions have the same marginal likelihood.

    Instances are plain picklable values: a sampler or a worker process can call
    them concurrently without any shared state.
    """

    def __init__(self, data: Dataset | None, prior: PriorSpec, variant: ModelVariant | None = None,
                 design: ExperimentDesign | None = None, centered: bool = False):
        if data is None and design is None:
            raise ValueError("need data, or a design for a prior-only target")
        self.variant = variant or ModelVariant(True)
        self.prior = prior
        self.data = data
        self.design = data.design if data is not None else design
        dsg = self.design
        self._subj = np.ascontiguousarray(dsg.subject, dtype=np.int64)
        self._item = np.ascontiguousarray(dsg.item, dtype=np.int64)
        self._x = np.ascontiguousarray(dsg.so, dtype=float)
        self._y = np.ascontiguousarray(data.log_rt if data is not None else np.zeros(dsg.n_trials))
        self._use_lik = data is not None
        self._hyper = prior.hyper_array()
        if np.any(self._hyper[[1, 3, 4, 5, 6, 7, 8]] <= 0):
            raise OutOfSupportError("prior scales must be positive to evaluate densities")
        self.dim = self.variant.n_params(dsg)
        self.centered = bool(centered)

    @property
    def param_names(self) -> list[str]:
        return self.variant.param_names(self.design)

    @property
    def jit_fn(self):
        return _centered_kernel if self.centered else _model_kernel

    @property
    def jit_args(self):
        return (self._subj, self._item, self._x, self._y, self.design.n_subjects, self.design.n_items,
                self._hyper, self.variant.include_slope, self._use_lik)

    def __call__(self, q) -> tuple[float, np.ndarray]:
        q = np.asarray(q, dtype=float)
        kernel = _centered_log_joint_grad if self.centered else _log_joint_grad
        return kernel(q, self._subj, self._item, self._x, self._y, self.design.n_subjects,
                      self.design.n_items, self._hyper, self.variant.include_slope, self._use_lik)

    def log_density(self, q) -> float:
        return self(q)[0]

    def constrain(self, Q) -> np.ndarray:
        if self.centered:
            Q = centered_to_noncentered(Q, self.design, self.variant)
        return constrain_draws(Q, self.design, self.variant)

    def standard_coordinates(self, Q) -> np.ndarray:
        """Unconstrained draws in the non-centered layout, whatever this target samples."""
        return centered_to_noncentered(Q, self.design, self.variant) if self.centered else np.asarray(Q)

    def strong_data_form(self, Q) -> "PreconditionedTarget":
        """Equivalent target for data that pin the latent effects down tightly.

        When the residual SD is small relative to the random-effect SDs the
        non-centered posterior becomes a thin curved shell and the centered one
        a thin straight ridge (intercept against the mean adjustment). This
        samples the centered density through ``q = shift + chol @ y``, with
        the mean and covariance of the draws ``Q`` (standard layout, e.g. from
        a run that failed to mix), which straightens the ridge out.
        """
        base = ModelTarget(self.data, self.prior, self.variant, self.design, centered=True)
        Qc = noncentered_to_centered(np.atleast_2d(Q), self.design, self.variant)
        cov = np.atleast_2d(np.cov(Qc, rowvar=False))
        cov = cov + 1e-10 * np.diag(np.maximum(np.diag(cov), 1e-12))
        return PreconditionedTarget(base, Qc.mean(axis=0), np.linalg.cholesky(cov))


class PreconditionedTarget:
    """A centered :class:`ModelTarget` sampled through a fixed affine map ``q = shift + chol @ y``.

    A diagonal metric on ``y`` then acts as a dense metric on ``q``. Draws
    map back to the standard layout through :meth:`standard_coordinates`.
    """

    def __init__(self, base: ModelTarget, shift, chol):
        if not base.centered:
            raise ValueError("the base target must use the centered parameterisation")
        self.base = base
        self.shift = np.ascontiguousarray(shift, dtype=float)
        self.chol = np.ascontiguousarray(chol, dtype=float)
        self.dim = base.dim
        self.design, self.variant = base.design, base.variant

    @property
    def param_names(self) -> list[str]:
        return self.base.param_names

    @property
    def jit_fn(self):
        return _preconditioned_kernel

    @property
    def jit_args(self):
        return (self.base.jit_args, self.shift, self.chol)

    def to_base(self, Y) -> np.ndarray:
        return self.shift + np.asarray(Y) @ self.chol.T

    def __call__(self, y) -> tuple[float, np.ndarray]:
        lp, g = self.base(self.shift + self.chol @ np.asarray(y, dtype=float))
        return lp, self.chol.T @ g

    def constrain(self, Y) -> np.ndarray:
        return self.base.constrain(self.to_base(Y))

    def standard_coordinates(self, Y) -> np.ndarray:
        return self.base.standard_coordinates(self.to_base(Y))


def log_joint_unconstrained(data: Dataset, prior: PriorSpec, q) -> tuple[float, np.ndarray]:
    """Log likelihood + log prior + log Jacobian at ``q``, with its gradient.

    A non-finite density comes back as ``-inf`` with a zero gradient; the
    gradient is never NaN.
    """
    variant = _infer_variant(np.asarray(q).shape[-1], data.design)
    return ModelTarget(data, prior, variant)(q)
