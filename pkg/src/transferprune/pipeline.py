"""Two-stage prune -> finetune procedure under the transfer schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .compact import compact
from .coupling import (CouplingStrategy, CoupledGateParams, TaskWeights, delta_regularizer,
                       multitask_loss, resolve_task_gates)
from .data import BatchStream, Task, score
from .model import (MASK_ID, NUM_SPECIAL, GatedTransformer, GateSet, ModelConfig, TaskHead, forward,
                    trainable_parameters)
from .optim import NonFiniteGradientError, Optimizer
from .sparsity import (SparsityTarget, binarize_to_target, expected_sparsity, gate_probs, lagrangian_penalty,
                       mask_sparsity, random_mask, update_multipliers, warmup_target)

log = logging.getLogger(__name__)

TASK_ORDER = ("T", "A")

SCHEDULES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "no_transfer": (("T",), ("T",)),
    "prune_A-ft_T": (("A",), ("T",)),
    "prune_T-ft_AT": (("T",), ("T", "A")),
    "prune_AT-ft_T": (("T", "A"), ("T",)),
    "prune_AT-ft_AT": (("T", "A"), ("T", "A")),
}
ABLATION_MODES = ("weights_only", "masks_only", "both")


class RunFailed(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


@dataclass(frozen=True)
class ScheduleSpec:
    prune_tasks: tuple[str, ...] = ("T", "A")
    finetune_tasks: tuple[str, ...] = ("T",)
    coupling: CouplingStrategy = field(default_factory=CouplingStrategy)
    weights: TaskWeights = field(default_factory=TaskWeights)
    target: float = 0.95
    prune_steps: int = 10000
    finetune_epochs: int = 20
    seeds: tuple[int, ...] = (0,)
    model_lr_prune: float = 1e-4
    model_lr_finetune: float = 1e-4
    structure_lr: float = 0.1
    multiplier_lr: float | None = None
    batch_size: int = 16
    warmup_fraction: float = 0.2
    early_stopping: bool = True
    freeze_embeddings: bool = True

    def __post_init__(self):
        for name in ("prune_tasks", "finetune_tasks"):
            tasks = getattr(self, name)
            if not tasks:
                raise ValueError(f"{name} must be non-empty")
            if any(t not in TASK_ORDER for t in tasks):
                raise ValueError(f"{name} may only contain 'T' and 'A', got {tasks}")
            object.__setattr__(self, name, tuple(t for t in TASK_ORDER if t in tasks))
        if self.prune_steps < 0 or self.finetune_epochs < 0:
            raise ValueError("step and epoch counts must be non-negative")
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must lie in [0, 1), got {self.target}")

    @classmethod
    def named(cls, schedule: str, **kwargs) -> "ScheduleSpec":
        if schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {schedule!r}; expected one of {sorted(SCHEDULES)}")
        prune, finetune = SCHEDULES[schedule]
        return cls(prune_tasks=prune, finetune_tasks=finetune, **kwargs)

    @property
    def name(self) -> str:
        for key, (p, f) in SCHEDULES.items():
            if (p, f) == (self.prune_tasks, self.finetune_tasks):
                return key
        return f"prune_{''.join(self.prune_tasks)}-ft_{''.join(self.finetune_tasks)}"

    def prune_key(self) -> tuple:
        """Fields the prune stage depends on (used to share prune results across schedules)."""
        coupling = self.coupling if len(self.prune_tasks) > 1 else None
        weights = self.weights if len(self.prune_tasks) > 1 else None
        return (self.prune_tasks, coupling, weights, self.target, self.prune_steps, self.model_lr_prune,
                self.structure_lr, self.multiplier_lr, self.batch_size, self.warmup_fraction,
                self.freeze_embeddings)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["prune_tasks"] = list(self.prune_tasks)
        out["finetune_tasks"] = list(self.finetune_tasks)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ScheduleSpec":
        payload = dict(payload)
        if "schedule" in payload:
            prune, finetune = SCHEDULES[payload.pop("schedule")]
            payload.setdefault("prune_tasks", prune)
            payload.setdefault("finetune_tasks", finetune)
        if isinstance(payload.get("coupling"), dict):
            payload["coupling"] = CouplingStrategy(**payload["coupling"])
        elif isinstance(payload.get("coupling"), str):
            payload["coupling"] = CouplingStrategy(payload["coupling"])
        if isinstance(payload.get("weights"), dict):
            payload["weights"] = TaskWeights(**payload["weights"])
        elif isinstance(payload.get("weights"), (list, tuple)):
            payload["weights"] = TaskWeights(*payload["weights"])
        for key in ("prune_tasks", "finetune_tasks", "seeds"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload)


@dataclass
class PruneResult:
    model: GatedTransformer
    heads: dict[str, TaskHead]
    gates: CoupledGateParams
    masks: dict[str, GateSet]
    mask: GateSet
    expected_sparsity: dict[str, float]
    batches: dict[str, int]
    history: list[dict]


@dataclass
class PrunedModel:
    masks: GateSet
    model: GatedTransformer
    heads: dict[str, TaskHead]
    provenance: dict
    metrics: dict[str, float] = field(default_factory=dict)
    batches: dict[str, int] = field(default_factory=dict)

    @property
    def sparsity(self) -> float:
        return mask_sparsity(self.masks, self.model.config)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise RunFailed(f"non-finite loss during {where}")


def make_heads(tasks: dict[str, Task], hidden_dim: int, seed: int) -> dict[str, TaskHead]:
    heads = {}
    for i, name in enumerate(TASK_ORDER):
        if name in tasks:
            spec = tasks[name].spec
            heads[name] = TaskHead.create(name, spec.kind, hidden_dim, _rng(seed, 10, i), spec.num_classes)
    return heads


def prune_stage(pretrained: GatedTransformer, tasks: dict[str, Task], spec: ScheduleSpec, seed: int,
                log_every: int = 0) -> PruneResult:
    """Jointly learn gates and weights on ``spec.prune_tasks``, then binarize at the budget."""
    for t in spec.prune_tasks:
        if t not in tasks:
            raise ValueError(f"prune stage needs task {t!r}")
    cfg = pretrained.config
    model = pretrained.copy()
    heads = make_heads(tasks, cfg.hidden_dim, seed)
    joint = len(spec.prune_tasks) > 1
    coupling = spec.coupling if joint else CouplingStrategy("single_mask")
    gates = CoupledGateParams.init(coupling, cfg.num_gates, _rng(seed, 11))
    mask_keys = ("T", "A") if joint and coupling.kind != "single_mask" else (spec.prune_tasks[0],)

    params = trainable_parameters(model, [heads[t] for t in spec.prune_tasks], spec.freeze_embeddings)
    opt_model = Optimizer(params, "adam", spec.model_lr_prune)
    opt_gate = Optimizer(gates.parameters(), "adam", spec.structure_lr)
    mlr = spec.multiplier_lr if spec.multiplier_lr is not None else spec.structure_lr
    targets = {k: SparsityTarget(spec.target, multiplier_lr=mlr) for k in mask_keys}
    streams = {t: BatchStream(tasks[t].train, spec.batch_size, _rng(seed, 12, i))
               for i, t in enumerate(TASK_ORDER) if t in spec.prune_tasks}
    noise = _rng(seed, 13)
    history: list[dict] = []

    for step in range(spec.prune_steps):
        t_now = warmup_target(spec.target, step, spec.prune_steps, spec.warmup_fraction)
        resolved = {k: resolve_task_gates(gates, k) if joint else gates.base for k in spec.prune_tasks}
        losses = {}
        for t in spec.prune_tasks:
            z = GateSet.from_flat(resolved[t].sample(noise), cfg)
            tok, y = streams[t].next()
            losses[t] = heads[t].loss(forward(model, tok, z, heads[t]), y)
        penalty = 0.0
        s_hat = {}
        for k in mask_keys:
            s = expected_sparsity(gate_probs(resolved[k].log_alpha, cfg), cfg)
            s_hat[k] = float(s.data)
            penalty = ad.add(penalty, lagrangian_penalty(s, replace(targets[k], target=t_now)))
        reg = delta_regularizer(gates) if coupling.kind == "delta" else 0.0
        total = multitask_loss(losses.get("T"), losses.get("A"), spec.weights, penalty, reg)
        _check_finite(total.item(), "pruning")
        ad.backward(total)
        try:
            opt_model.step()
            opt_gate.step()
        except NonFiniteGradientError as exc:
            raise RunFailed(str(exc)) from exc
        for k in mask_keys:
            targets[k] = update_multipliers(replace(targets[k], target=t_now), s_hat[k])
        if log_every and (step % log_every == 0 or step == spec.prune_steps - 1):
            entry = {"step": step, "target": t_now, **{f"loss_{t}": losses[t].item() for t in losses},
                     **{f"sparsity_{k}": v for k, v in s_hat.items()}}
            history.append(entry)
            log.debug("prune %s", entry)

    final = {k: (resolve_task_gates(gates, k) if joint else gates.base).log_alpha.data.copy()
             for k in (("T", "A") if joint else spec.prune_tasks)}
    masks = {k: binarize_to_target(la, spec.target, cfg) for k, la in final.items()}
    exp_sp = {k: expected_sparsity(gate_probs(la, cfg), cfg) for k, la in final.items()}
    primary = "T" if "T" in spec.prune_tasks else spec.prune_tasks[0]
    return PruneResult(model, heads, gates, masks, masks[primary], exp_sp,
                       {t: s.consumed for t, s in streams.items()}, history)


def evaluate(model: GatedTransformer, mask: GateSet, head: TaskHead, task: Task, split: str = "test",
             batch_size: int = 512) -> float:
    small = compact(model, mask)
    data = task.split(split)
    outs = [small.forward(data.tokens[i:i + batch_size], head) for i in range(0, len(data), batch_size)]
    return score(task.spec, np.concatenate(outs, axis=0), data.labels)


def finetune_stage(model: GatedTransformer, heads: dict[str, TaskHead], mask: GateSet, tasks: dict[str, Task],
                   spec: ScheduleSpec, seed: int) -> PrunedModel:
    """Update weights (and task heads) with the binary mask frozen."""
    if not mask.is_binary():
        raise ValueError("finetuning requires a binary mask")
    ft = spec.finetune_tasks
    for t in ft:
        if t not in tasks:
            raise ValueError(f"finetune stage needs task {t!r}")
    mask = mask.copy()
    frozen = mask.flat().copy()
    model = model.copy()
    heads = {k: h.copy() for k, h in heads.items()}
    opt = Optimizer(trainable_parameters(model, [heads[t] for t in ft], spec.freeze_embeddings), "adam",
                    spec.model_lr_finetune)
    streams = {t: BatchStream(tasks[t].train, spec.batch_size, _rng(seed, 20, i))
               for i, t in enumerate(TASK_ORDER) if t in ft}
    primary = "T" if "T" in ft else ft[0]
    steps_per_epoch = streams[primary].steps_per_epoch()

    best_dev, best_state = -math.inf, None
    for epoch in range(spec.finetune_epochs):
        for _ in range(steps_per_epoch):
            losses = {}
            for t in ft:
                tok, y = streams[t].next()
                losses[t] = heads[t].loss(forward(model, tok, mask, heads[t]), y)
            total = multitask_loss(losses.get("T"), losses.get("A"), spec.weights)
            _check_finite(total.item(), "finetuning")
            ad.backward(total)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise RunFailed(str(exc)) from exc
        if spec.early_stopping:
            dev = evaluate(model, mask, heads[primary], tasks[primary], "dev")
            if dev > best_dev:
                best_dev = dev
                best_state = (model.state(), {k: (h.weight.data.copy(), h.bias.data.copy()) for k, h in heads.items()})
    if best_state is not None:
        model.load_state(best_state[0])
        for k, (w, b) in best_state[1].items():
            heads[k].weight.data, heads[k].bias.data = w, b
    if not np.array_equal(frozen, mask.flat()):
        raise AssertionError("mask changed during finetuning")

    metrics = {}
    for t in ft:
        metrics[f"test_{t}"] = evaluate(model, mask, heads[t], tasks[t], "test")
    if spec.early_stopping and best_state is not None:
        metrics[f"dev_{primary}"] = best_dev
    return PrunedModel(mask, model, heads, {"schedule": spec.name, "seed": seed}, metrics,
                       {t: s.consumed for t, s in streams.items()})


def run_schedule(pretrained: GatedTransformer, tasks: dict[str, Task], spec: ScheduleSpec, seed: int,
                 prune_cache: dict | None = None) -> PrunedModel:
    """Prune then finetune; identical prune stages are shared through ``prune_cache``."""
    key = (spec.prune_key(), seed)
    if prune_cache is not None and key in prune_cache:
        pruned = prune_cache[key]
    else:
        pruned = prune_stage(pretrained, tasks, spec, seed)
        if prune_cache is not None:
            prune_cache[key] = pruned
    result = finetune_stage(pruned.model, pruned.heads, pruned.mask, tasks, spec, seed)
    result.provenance.update({"spec": spec.to_dict(), "expected_sparsity": pruned.expected_sparsity,
                              "prune_batches": pruned.batches})
    result.batches = {"prune": pruned.batches, "finetune": result.batches}
    return result


def run_ablation(mode: str, pretrained: GatedTransformer, tasks: dict[str, Task], spec: ScheduleSpec, seed: int,
                 prune_cache: dict | None = None) -> PrunedModel:
    """Transfer weights, masks or both from a Prune(A) run, then finetune on T only."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    aux_spec = replace(spec, prune_tasks=("A",), finetune_tasks=("T",))
    key = (aux_spec.prune_key(), seed)
    if prune_cache is not None and key in prune_cache:
        pruned = prune_cache[key]
    else:
        pruned = prune_stage(pretrained, tasks, aux_spec, seed)
        if prune_cache is not None:
            prune_cache[key] = pruned
    if mode == "weights_only":
        mask = random_mask(spec.target, pretrained.config, _rng(seed, 30))
        model = pruned.model
    elif mode == "masks_only":
        mask = pruned.mask
        model = pretrained.copy()
    else:
        mask = pruned.mask
        model = pruned.model
    result = finetune_stage(model, pruned.heads, mask, tasks, aux_spec, seed)
    result.provenance.update({"ablation": mode, "spec": aux_spec.to_dict()})
    return result


# pretraining ----------------------------------------------------------------


def pretrain_mlm(config: ModelConfig, corpus: np.ndarray, steps: int, seed: int, lr: float = 1e-3,
                 batch_size: int = 32, mask_prob: float = 0.15, log_every: int = 0) -> GatedTransformer:
    """Brief masked-token prediction run producing the 'pre-trained' starting point.

    The output projection is a separate matrix so the token embeddings are
    not dragged towards a shared softmax direction.
    """
    rng = _rng(seed, 40)
    model = GatedTransformer.init(config, rng)
    out_w = ad.Tensor(rng.normal(0.0, 0.02, (config.hidden_dim, config.vocab_size)), requires_grad=True,
                      name="mlm_out")
    out_bias = ad.Tensor(np.zeros(config.vocab_size), requires_grad=True, name="mlm_bias")
    opt = Optimizer(trainable_parameters(model, freeze_embeddings=True) + [out_w, out_bias], "adam", lr)
    for step in range(steps):
        idx = rng.integers(0, len(corpus), batch_size)
        tokens = corpus[idx].copy()
        maskable = tokens >= NUM_SPECIAL
        chosen = maskable & (rng.random(tokens.shape) < mask_prob)
        if not chosen.any():
            continue
        targets = tokens[chosen]
        tokens[chosen] = MASK_ID
        hidden = forward(model, tokens, None, None)
        picked = ad.getitem(hidden.reshape(-1, config.hidden_dim), np.flatnonzero(chosen.reshape(-1)))
        logits = picked @ out_w + out_bias
        loss = ad.cross_entropy(logits, targets)
        _check_finite(loss.item(), "pretraining")
        ad.backward(loss)
        opt.step()
        if log_every and step % log_every == 0:
            log.info("mlm step %d loss %.4f", step, loss.item())
    return model
