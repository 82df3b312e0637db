"""Training-timestep samplers.

The shifted sampler draws ``z ~ N(mu, sigma^2)``, squashes it with a sigmoid
to ``u in (0, 1)`` and discretises ``t = clamp(ceil(u * T), 1, T)``. Large
``mu`` concentrates training on the noisiest steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from scipy.special import expit, logit
from scipy.stats import norm


_SNAP = 1e-9


@dataclass(frozen=True)
class TimestepSampler:
    kind: str = "uniform"  # uniform | shifted
    T: int = 200
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "shifted"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.kind == "shifted" and not self.sigma > 0:
            raise ValueError("shifted sampler needs sigma > 0")

    @classmethod
    def uniform(cls, T: int) -> "TimestepSampler":
        return cls("uniform", T)

    @classmethod
    def shifted(cls, T: int, mu: float, sigma: float = 1.0) -> "TimestepSampler":
        return cls("shifted", T, float(mu), float(sigma))

    @property
    def label(self) -> str:
        return "uniform" if self.kind == "uniform" else f"mu={self.mu:g}"

    def sample_u(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Continuous ``u = sigmoid(z)`` draws (shifted kind only)."""
        if self.kind != "shifted":
            raise ValueError("sample_u is defined for the shifted sampler")
        z = self.mu + self.sigma * torch.randn(n, generator=generator, dtype=torch.float64)
        return torch.sigmoid(z)

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.kind == "uniform":
            return torch.randint(1, self.T + 1, (n,), generator=generator)
        u = self.sample_u(n, generator)
        # values within rounding distance of an integer stay on it, so u = 0.5 + tiny maps to ceil(T / 2)
        return torch.ceil(u * self.T - _SNAP).long().clamp(1, self.T)

    def u_cdf(self, u):
        """Analytic CDF of ``u``: ``Phi((logit(u) - mu) / sigma)``."""
        return norm.cdf((logit(u) - self.mu) / self.sigma)

    def tail_mass(self, frac: float) -> float:
        """``P(t > frac * T)`` for the discretised shifted sampler."""
        if self.kind == "uniform":
            return (self.T - math.floor(frac * self.T)) / self.T
        # t > k  <=>  ceil(u T) > k  <=>  u > k / T
        k = math.floor(frac * self.T)
        return float(1.0 - self.u_cdf((k + _SNAP) / self.T))

    def median_t(self) -> int:
        if self.kind == "uniform":
            return (self.T + 1) // 2
        return int(min(max(math.ceil(expit(self.mu) * self.T), 1), self.T))


def sample_timestep(sampler: TimestepSampler, generator: torch.Generator | None = None) -> int:
    return int(sampler.sample(1, generator)[0])
