"""Parameter-count sparsity, the Lagrangian size penalty and exact-budget binarization.

Cost model (``H`` = number of retained residual columns, ``d_h`` = head width):

* head: ``4 * d_h * H`` projection weights plus ``3 * d_h`` q/k/v biases
* FFN unit: ``2 * H`` weights plus one bias
* attention / FFN sublayer kept open: ``H`` output-bias entries, plus ``2 * H``
  layernorm entries if at least one child unit survives

Embeddings, the final layernorm and task heads are not prunable. With binary
gates the expected count equals the parameter count of the compacted model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gates import DEFAULT_CONFIG, GateParams, HardConcreteConfig, deterministic_gate, prob_nonzero
from .model import GateSet, ModelConfig
from .optim import Optimizer

log = logging.getLogger(__name__)

SHIPPED_TARGETS = (0.40, 0.70, 0.90, 0.95, 0.98)


@dataclass(frozen=True)
class SparsityTarget:
    target: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    multiplier_lr: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must lie in [0, 1), got {self.target}")
        if not self.multiplier_lr > 0:
            raise ValueError("multiplier_lr must be positive")


def head_cost(config: ModelConfig, hidden: float) -> float:
    return 4 * config.head_dim * hidden + 3 * config.head_dim


def fc_cost(hidden: float) -> float:
    return 2 * hidden + 1


def prunable_param_count(config: ModelConfig) -> int:
    """Total prunable parameters with every gate open."""
    d = config.hidden_dim
    attn = config.num_heads * head_cost(config, d) + 3 * d
    ffn = config.ffn_dim * fc_cost(d) + 3 * d
    return int(config.num_layers * (attn + ffn))


def expected_retained(probs: GateSet, config: ModelConfig):
    """Expected retained parameter count given per-gate open probabilities."""
    probs.validate(config)
    d_h = config.head_dim
    hidden = ad.sum(probs.z_hidden)
    p_head = ad.reshape(probs.z_head, (config.num_layers, config.num_heads))
    p_fc = ad.reshape(probs.z_fc, (config.num_layers, config.ffn_dim))
    any_head = 1.0 - ad.prod(1.0 - p_head, axis=-1)
    any_fc = 1.0 - ad.prod(1.0 - p_fc, axis=-1)
    attn = ad.sum(p_head, axis=-1) * (hidden * (4.0 * d_h) + 3.0 * d_h) + hidden + any_head * hidden * 2.0
    ffn = ad.sum(p_fc, axis=-1) * (hidden * 2.0 + 1.0) + hidden + any_fc * hidden * 2.0
    return ad.sum(ad.mul(probs.z_mha, attn) + ad.mul(probs.z_ffn, ffn))


def expected_sparsity(probs: GateSet, config: ModelConfig):
    """1 - E[retained] / M; a Tensor if any family is a Tensor, else a float."""
    retained = expected_retained(probs, config)
    out = 1.0 - retained * (1.0 / prunable_param_count(config))
    if any(isinstance(getattr(probs, k), Tensor) for k in GateSet.FAMILIES):
        return out
    return float(out.data)


def gate_probs(log_alpha, config: ModelConfig, hc: HardConcreteConfig = DEFAULT_CONFIG) -> GateSet:
    """Open probabilities for a flat log-alpha vector (array or Tensor)."""
    return GateSet.from_flat(prob_nonzero(log_alpha, hc), config)


def lagrangian_penalty(s_hat, target: SparsityTarget):
    gap = s_hat - target.target
    return gap * target.lambda1 + gap * gap * target.lambda2


def update_multipliers(target: SparsityTarget, s_hat: float) -> SparsityTarget:
    """One gradient-ascent step on both multipliers."""
    gap = float(s_hat) - target.target
    return replace(target,
                   lambda1=target.lambda1 + target.multiplier_lr * gap,
                   lambda2=target.lambda2 + target.multiplier_lr * gap * gap)


def mask_param_count(mask: GateSet, config: ModelConfig) -> int:
    """Exact prunable parameter count of the model compacted under a binary mask."""
    if not mask.is_binary():
        raise ValueError("mask_param_count needs a binary mask")
    return int(round(float(expected_retained(mask, config).data)))


def mask_sparsity(mask: GateSet, config: ModelConfig) -> float:
    return 1.0 - mask_param_count(mask, config) / prunable_param_count(config)


def unit_granularity(config: ModelConfig) -> float:
    """Largest single-step change in sparsity a greedy unit addition can make."""
    d = config.hidden_dim
    return (head_cost(config, d) + 3 * d) / prunable_param_count(config)


def binarize_scores(head_scores: np.ndarray, fc_scores: np.ndarray, hidden_mask: np.ndarray,
                    target: float, config: ModelConfig) -> GateSet:
    """Greedy exact-budget selection of heads and FFN units by descending score.

    Ties fall back to (layer, heads before FFN units, unit index). Selection
    stops at the first unit that would overflow the ``(1 - target) * M`` budget.
    """
    n, n_h, n_f = config.num_layers, config.num_heads, config.ffn_dim
    hidden_mask = np.asarray(hidden_mask, dtype=np.float64)
    hidden = float(hidden_mask.sum())
    budget = (1.0 - target) * prunable_param_count(config)

    layer_idx = np.concatenate([np.repeat(np.arange(n), n_h), np.repeat(np.arange(n), n_f)])
    kind = np.concatenate([np.zeros(n * n_h, int), np.ones(n * n_f, int)])
    unit_idx = np.concatenate([np.tile(np.arange(n_h), n), np.tile(np.arange(n_f), n)])
    scores = np.concatenate([np.asarray(head_scores, float).reshape(-1), np.asarray(fc_scores, float).reshape(-1)])
    order = np.lexsort((unit_idx, kind, layer_idx, -scores))

    costs = (head_cost(config, hidden), fc_cost(hidden))
    opened = np.zeros((2, n), dtype=bool)
    head = np.zeros((n, n_h))
    fc = np.zeros((n, n_f))
    used = 0.0
    for u in order:
        i, k = layer_idx[u], kind[u]
        step = costs[k] + (0.0 if opened[k, i] else 3 * hidden)
        if used + step > budget + 1e-9:
            break
        used += step
        opened[k, i] = True
        (head if k == 0 else fc)[i, unit_idx[u]] = 1.0

    if not opened.any():
        log.warning("top-ranked unit exceeds the budget at target sparsity %.4f; returning an empty mask", target)
        hidden_mask = np.zeros_like(hidden_mask)
    return GateSet(z_mha=opened[0].astype(float), z_head=head, z_ffn=opened[1].astype(float), z_fc=fc,
                   z_hidden=hidden_mask)


def binarize_to_target(log_alpha, target: float, config: ModelConfig,
                       hc: HardConcreteConfig = DEFAULT_CONFIG) -> GateSet:
    """Binary mask at the exact parameter budget from trained log-alphas.

    Residual columns are decided first (open iff their deterministic gate is
    nonzero); heads and FFN units are then ranked by the product of their
    coarse and fine deterministic gates.
    """
    la = np.asarray(log_alpha.data if isinstance(log_alpha, Tensor) else log_alpha, dtype=np.float64)
    det = GateSet.from_flat(deterministic_gate(la, hc), config)
    hidden_mask = (det.z_hidden > 0).astype(np.float64)
    head_scores = det.z_mha[:, None] * det.z_head
    fc_scores = det.z_ffn[:, None] * det.z_fc
    return binarize_scores(head_scores, fc_scores, hidden_mask, target, config)


def random_mask(target: float, config: ModelConfig, rng: np.random.Generator) -> GateSet:
    """Budget-respecting mask over uniformly random unit ranks, all residual columns kept."""
    n = config.num_layers
    return binarize_scores(rng.random((n, config.num_heads)), rng.random((n, config.ffn_dim)),
                           np.ones(config.hidden_dim), target, config)


def warmup_target(target: float, step: int, total_steps: int, warmup_fraction: float = 0.2) -> float:
    """Linear ramp of the sparsity target from 0 over the first warmup steps."""
    warm = max(1, math.ceil(warmup_fraction * total_steps))
    return target * min(1.0, step / warm)


def drive_to_target(config: ModelConfig, target: float, steps: int = 10000, lr: float = 0.1,
                    seed: int = 0, warmup_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Gate-only closed loop: Adam on log-alphas against the Lagrangian penalty alone.

    Returns the final log-alphas and the expected-sparsity trajectory. Useful
    for checking the controller in isolation from any task loss.
    """
    gates = GateParams.init(config.num_gates, np.random.default_rng(seed))
    opt = Optimizer([gates.log_alpha], "adam", lr)
    state = SparsityTarget(target, multiplier_lr=lr)
    trace = np.empty(steps)
    for step in range(steps):
        state = replace(state, target=warmup_target(target, step, steps, warmup_fraction))
        s = expected_sparsity(gate_probs(gates.log_alpha, config), config)
        ad.backward(lagrangian_penalty(s, state))
        opt.step()
        trace[step] = float(s.data)
        state = update_multipliers(state, trace[step])
    return gates.log_alpha.data.copy(), trace
