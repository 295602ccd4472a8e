"""Sharing structural variables between a target task T and an auxiliary task A."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gates import DEFAULT_CONFIG, GateParams, HardConcreteConfig

STRATEGIES = ("single_mask", "multi_mask", "delta")
TASKS = ("T", "A")
SHIPPED_WEIGHTS = ((1.0, 1.0), (1.0, 2.0), (2.0, 1.0))


@dataclass(frozen=True)
class CouplingStrategy:
    kind: str = "delta"
    delta_reg_weight: float = 1e-2

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown coupling strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.delta_reg_weight < 0:
            raise ValueError("delta_reg_weight must be non-negative")


@dataclass(frozen=True)
class TaskWeights:
    w_T: float = 1.0
    w_A: float = 1.0

    def __post_init__(self):
        if not (self.w_T > 0 and self.w_A > 0):
            raise ValueError("task weights must be positive")

    def of(self, task: str) -> float:
        return self.w_T if task == "T" else self.w_A


@dataclass
class CoupledGateParams:
    """Structural parameters for both tasks under one coupling strategy.

    single_mask: ``base`` only. multi_mask: ``per_task`` holds two independent
    GateParams. delta: ``base`` plus log-alpha offsets ``delta_T``/``delta_A``.
    """

    strategy: CouplingStrategy
    base: GateParams | None = None
    delta_T: Tensor | None = None
    delta_A: Tensor | None = None
    per_task: dict[str, GateParams] = field(default_factory=dict)

    @classmethod
    def init(cls, strategy: CouplingStrategy, size: int, rng: np.random.Generator,
             config: HardConcreteConfig = DEFAULT_CONFIG) -> "CoupledGateParams":
        if strategy.kind == "multi_mask":
            return cls(strategy, per_task={t: GateParams.init(size, rng, config=config) for t in TASKS})
        base = GateParams.init(size, rng, config=config)
        if strategy.kind == "single_mask":
            return cls(strategy, base=base)
        return cls(strategy, base=base,
                   delta_T=Tensor(np.zeros(size), requires_grad=True, name="delta_T"),
                   delta_A=Tensor(np.zeros(size), requires_grad=True, name="delta_A"))

    @property
    def config(self) -> HardConcreteConfig:
        return self.base.config if self.base is not None else self.per_task["T"].config

    def parameters(self) -> list[Tensor]:
        if self.strategy.kind == "multi_mask":
            return [self.per_task[t].log_alpha for t in TASKS]
        params = [self.base.log_alpha]
        if self.strategy.kind == "delta":
            params += [self.delta_T, self.delta_A]
        return params

    def delta(self, task: str) -> Tensor:
        if self.strategy.kind != "delta":
            raise ValueError(f"no task offsets under the {self.strategy.kind} strategy")
        return self.delta_T if task == "T" else self.delta_A


def resolve_task_gates(coupled: CoupledGateParams, task: str) -> GateParams:
    """Task-specific log-alpha parameters (differentiable back to the shared ones)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    kind = coupled.strategy.kind
    if kind == "single_mask":
        return coupled.base
    if kind == "multi_mask":
        return coupled.per_task[task]
    return GateParams(ad.add(coupled.base.log_alpha, coupled.delta(task)), coupled.config)


def delta_regularizer(coupled: CoupledGateParams, weight: float | None = None) -> Tensor:
    """weight * (||delta_T||^2 + ||delta_A||^2)."""
    if coupled.strategy.kind != "delta":
        raise ValueError("delta_regularizer only applies to the delta strategy")
    w = coupled.strategy.delta_reg_weight if weight is None else weight
    return (ad.sum(coupled.delta_T * coupled.delta_T) + ad.sum(coupled.delta_A * coupled.delta_A)) * w


def multitask_loss(loss_T, loss_A, weights: TaskWeights, penalty=0.0, reg=0.0):
    """w_T * loss_T + w_A * loss_A + penalty + reg; either task loss may be None."""
    total = 0.0
    if loss_T is not None:
        total = ad.mul(loss_T, weights.w_T)
    if loss_A is not None:
        total = ad.add(total, ad.mul(loss_A, weights.w_A))
    return ad.add(ad.add(total, penalty), reg)
