"""Normal-normal model with closed-form posterior and evidence.

Used as a reference problem wherever an exact answer is needed: sampler
accuracy, rank-uniformity of the calibration loop, contraction, and
marginal-likelihood estimation.

    theta ~ Normal(prior_mean, prior_sd)
    y_j | theta ~ Normal(theta, noise_sd),  j = 1..n
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ConjugateNormal:
    prior_mean: float = 0.0
    prior_sd: float = 1.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if not (self.prior_sd > 0 and self.noise_sd > 0):
            raise ValueError("prior_sd and noise_sd must be positive")

    def posterior(self, y) -> tuple[float, float]:
        """Posterior (mean, sd) of theta."""
        y = np.asarray(y, dtype=float)
        prec = 1.0 / self.prior_sd**2 + y.size / self.noise_sd**2
        mean = (self.prior_mean / self.prior_sd**2 + y.sum() / self.noise_sd**2) / prec
        return float(mean), float(math.sqrt(1.0 / prec))

    def contraction(self, n: int) -> float:
        """Expected posterior contraction, tau0^2 n / (sigma^2 + n tau0^2)."""
        t2 = self.prior_sd**2
        return t2 * n / (self.noise_sd**2 + n * t2)

    def log_evidence(self, y) -> float:
        """log p(y): y is jointly normal with compound-symmetric covariance."""
        y = np.asarray(y, dtype=float)
        n = y.size
        cov = self.noise_sd**2 * np.eye(n) + self.prior_sd**2 * np.ones((n, n))
        return float(stats.multivariate_normal(np.full(n, self.prior_mean), cov).logpdf(y))

    def log_joint(self, theta: float, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(stats.norm.logpdf(theta, self.prior_mean, self.prior_sd)
                     + stats.norm.logpdf(y, theta, self.noise_sd).sum())

    def simulate(self, rng: np.random.Generator, n: int):
        """(theta, y) drawn from the joint."""
        theta = self.prior_mean + self.prior_sd * rng.standard_normal()
        return float(theta), theta + self.noise_sd * rng.standard_normal(n)

    def sample_posterior(self, y, rng: np.random.Generator, size: int, shift_sd: float = 0.0,
                         scale: float = 1.0) -> np.ndarray:
        """Exact posterior draws; ``shift_sd`` and ``scale`` inject a bias or width error."""
        mean, sd = self.posterior(y)
        return mean + shift_sd * sd + scale * sd * rng.standard_normal(size)

    def target(self, y) -> "ConjugateTarget":
        return ConjugateTarget(self, np.asarray(y, dtype=float))


@dataclass
class ConjugateTarget:
    """Normalised log joint of the normal-normal model as a sampler target on theta."""

    model: ConjugateNormal
    y: np.ndarray
    dim: int = 1
    param_names: tuple = ("theta",)

    def __call__(self, q):
        m = self.model
        th = float(q[0])
        n = self.y.size
        lp = (-0.5 * ((th - m.prior_mean) / m.prior_sd) ** 2 - math.log(m.prior_sd)
              - 0.5 * np.sum((self.y - th) ** 2) / m.noise_sd**2 - n * math.log(m.noise_sd)
              - 0.5 * (n + 1) * math.log(2.0 * math.pi))
        g = -(th - m.prior_mean) / m.prior_sd**2 + np.sum(self.y - th) / m.noise_sd**2
        return float(lp), np.array([g])
