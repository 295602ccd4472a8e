"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def numerical_grads(fn: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6
                    ) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with ad.no_grad():
        for a in arrays:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = fn(*[ad.Tensor(x) for x in arrays]).item()
                flat[i] = keep - eps
                down = fn(*[ad.Tensor(x) for x in arrays]).item()
                flat[i] = keep
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grads(fn: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    ad.backward(fn(*leaves))
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradient_error(fn: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Worst relative error between analytic and numerical gradients over all inputs."""
    num = numerical_grads(fn, arrays, eps)
    ana = analytic_grads(fn, arrays)
    return max(relative_error(x, y) for x, y in zip(ana, num))
