"""Hard concrete gates: stretched, clamped logistic relaxations of Bernoulli masks.

All three gate functions accept either a float/ndarray (returning numpy
values) or a :class:`Tensor` (returning a differentiable Tensor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNIFORM_EPS = 1e-6


@dataclass(frozen=True)
class HardConcreteConfig:
    beta: float = 2.0 / 3.0
    stretch_lo: float = -0.1
    stretch_hi: float = 1.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.stretch_lo < 0 and self.stretch_hi > 1):
            raise ValueError(f"need stretch_lo < 0 < 1 < stretch_hi, got ({self.stretch_lo}, {self.stretch_hi})")

    @property
    def prob_shift(self) -> float:
        return self.beta * math.log(-self.stretch_lo / self.stretch_hi)


DEFAULT_CONFIG = HardConcreteConfig()


def _finish(out: Tensor, was_tensor: bool):
    if was_tensor:
        return out
    return float(out.data) if out.data.ndim == 0 else out.data


def sample_gate(log_alpha, u, config: HardConcreteConfig = DEFAULT_CONFIG):
    """Reparameterised gate sample ``z`` in [0, 1] for uniform noise ``u``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    was_tensor = isinstance(log_alpha, Tensor)
    la = log_alpha if was_tensor else Tensor(log_alpha)
    noise = np.log(u) - np.log1p(-u)
    s = ad.sigmoid((la + noise) * (1.0 / config.beta))
    stretched = s * (config.stretch_hi - config.stretch_lo) + config.stretch_lo
    return _finish(ad.clamp(stretched, 0.0, 1.0), was_tensor)


def prob_nonzero(log_alpha, config: HardConcreteConfig = DEFAULT_CONFIG):
    """Closed-form P(z > 0) under the hard concrete distribution."""
    was_tensor = isinstance(log_alpha, Tensor)
    la = log_alpha if was_tensor else Tensor(log_alpha)
    return _finish(ad.sigmoid(la - config.prob_shift), was_tensor)


def deterministic_gate(log_alpha, config: HardConcreteConfig = DEFAULT_CONFIG):
    """Noise-free gate value used at evaluation time."""
    was_tensor = isinstance(log_alpha, Tensor)
    la = log_alpha if was_tensor else Tensor(log_alpha)
    stretched = ad.sigmoid(la) * (config.stretch_hi - config.stretch_lo) + config.stretch_lo
    return _finish(ad.clamp(stretched, 0.0, 1.0), was_tensor)


def draw_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(UNIFORM_EPS, 1.0 - UNIFORM_EPS, size=shape)


@dataclass
class GateParams:
    """Unconstrained log-alpha parameters, one per structural variable."""

    log_alpha: Tensor
    config: HardConcreteConfig = DEFAULT_CONFIG

    def __post_init__(self):
        if self.log_alpha.ndim != 1:
            raise ValueError(f"log_alpha must be a vector, got shape {self.log_alpha.shape}")
        if not np.all(np.isfinite(self.log_alpha.data)):
            raise ValueError("log_alpha has non-finite entries")

    @classmethod
    def init(cls, size: int, rng: np.random.Generator, mean: float = 2.0, sd: float = 0.01,
             config: HardConcreteConfig = DEFAULT_CONFIG) -> "GateParams":
        return cls(Tensor(rng.normal(mean, sd, size=size), requires_grad=True, name="log_alpha"), config)

    @classmethod
    def zeros(cls, size: int, config: HardConcreteConfig = DEFAULT_CONFIG) -> "GateParams":
        return cls(Tensor(np.zeros(size), requires_grad=True, name="log_alpha"), config)

    def __len__(self) -> int:
        return self.log_alpha.shape[0]

    def sample(self, rng: np.random.Generator) -> Tensor:
        return sample_gate(self.log_alpha, draw_uniform(rng, len(self)), self.config)

    def probs(self) -> Tensor:
        return prob_nonzero(self.log_alpha, self.config)

    def deterministic(self) -> np.ndarray:
        return deterministic_gate(self.log_alpha.data, self.config)
