"""Ornstein-Uhlenbeck process with exploding variance (OUVE) in the complex STFT domain.

All quantities are evaluated in float64. Noise is circularly symmetric: real
and imaginary parts are independent N(0, 1/2), so E|phi|^2 = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class SdeConfig:
    eta: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_min: float = 0.03
    T: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0 < self.t_min < self.T:
            raise ValueError("need 0 < t_min < T")


@dataclass
class PerturbationSample:
    x_t: torch.Tensor
    phi: torch.Tensor
    t: float


def complex_normal(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    """Standard circularly-symmetric complex normal draw."""
    re = torch.randn(shape, generator=generator, dtype=dtype)
    im = torch.randn(shape, generator=generator, dtype=dtype)
    return torch.complex(re, im) * math.sqrt(0.5)


class OUVESDE:
    def __init__(self, config: SdeConfig = SdeConfig()):
        self.config = config
        self._log_ratio = math.log(config.sigma_max / config.sigma_min)

    @property
    def T(self) -> float:
        return self.config.T

    def _check_t(self, t, lower: float = 0.0):
        tt = torch.as_tensor(t, dtype=torch.float64)
        if torch.any(tt < lower) or torch.any(tt > self.config.T):
            raise ValueError(f"t={t} outside [{lower}, {self.config.T}]")

    def drift(self, x_t: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
        if x_t.shape != y_hat.shape:
            raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(y_hat.shape)}")
        return self.config.eta * (y_hat - x_t)

    def diffusion_coeff(self, t):
        self._check_t(t)
        c = self.config
        return c.sigma_min * (c.sigma_max / c.sigma_min) ** t * math.sqrt(2 * self._log_ratio)

    def _decay(self, t):
        return torch.exp(-self.config.eta * t) if isinstance(t, torch.Tensor) else math.exp(-self.config.eta * t)

    def mean(self, x0: torch.Tensor, y_hat: torch.Tensor, t):
        if x0.shape != y_hat.shape:
            raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(y_hat.shape)}")
        self._check_t(t)
        d = self._decay(t)
        return d * x0 + (1 - d) * y_hat

    def var(self, t):
        self._check_t(t)
        c = self.config
        L = self._log_ratio
        ratio = c.sigma_max / c.sigma_min
        if isinstance(t, torch.Tensor):
            growth = ratio ** (2 * t) - torch.exp(-2 * c.eta * t)
        else:
            growth = ratio ** (2 * t) - math.exp(-2 * c.eta * t)
        return c.sigma_min**2 * growth * L / (c.eta + L)

    def std(self, t):
        v = self.var(t)
        return torch.sqrt(v) if isinstance(v, torch.Tensor) else math.sqrt(v)

    def sample_perturbed(self, x0, y_hat, t, generator: torch.Generator | None = None) -> PerturbationSample:
        self._check_t(t, lower=self.config.t_min)
        phi = complex_normal(x0.shape, generator)
        return PerturbationSample(self.mean(x0, y_hat, t) + self.std(t) * phi, phi, t)

    def true_score(self, x_t, x0, y_hat, t):
        if torch.any(torch.as_tensor(t) < self.config.t_min):
            raise ValueError(f"t={t} below t_min={self.config.t_min}")
        return -(x_t - self.mean(x0, y_hat, t)) / self.var(t)

    def sample_prior(self, y_hat, generator: torch.Generator | None = None):
        return y_hat + self.std(self.config.T) * complex_normal(y_hat.shape, generator)

    def sample_time(self, generator: torch.Generator | None = None) -> float:
        u = torch.rand((), generator=generator, dtype=torch.float64).item()
        return self.config.t_min + (self.config.T - self.config.t_min) * u

    def table(self, n: int):
        """Rows of (t, g(t), exp(-eta t), sigma(t)) on a uniform grid over [0, T]."""
        rows = []
        for i in range(n):
            t = self.config.T * i / max(n - 1, 1)
            rows.append((t, self.diffusion_coeff(t), math.exp(-self.config.eta * t), self.std(t)))
        return rows
