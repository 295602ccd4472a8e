"""SGD and Adam over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or Inf; the step is not applied."""


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


class Optimizer:
    """Updates ``params`` in place from their ``.grad`` fields.

    Parameters whose grad is ``None`` (not reached by the last backward) are
    left untouched and keep their moment buffers. ``step`` consumes the
    gradients: every grad is reset to ``None`` afterwards so a stale gradient
    is never applied twice.
    """

    def __init__(self, params: list[Tensor], kind: str = "adam", lr: float = 1e-3):
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr)
        if kind == "adam":
            self.state.m = [np.zeros_like(p.data) for p in self.params]
            self.state.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {p.name or p.shape}")
        st = self.state
        st.step_count += 1
        if st.kind == "sgd":
            for p, g in zip(self.params, grads):
                if g is not None:
                    p.data -= st.learning_rate * g
            self.zero_grad()
            return
        t = st.step_count
        c1 = 1.0 - st.beta1**t
        c2 = 1.0 - st.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            m, v = st.m[i], st.v[i]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= st.learning_rate * (m / c1) / (np.sqrt(v / c2) + st.eps)
        self.zero_grad()
