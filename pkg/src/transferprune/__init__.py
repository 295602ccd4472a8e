"""Structured pruning of small transformers with auxiliary-task transfer."""

from .autodiff import ShapeError, Tensor, backward, no_grad
from .compact import CompactModel, compact, dense
from .coupling import CouplingStrategy, CoupledGateParams, TaskWeights, delta_regularizer, resolve_task_gates
from .data import SyntheticPairParams, Task, TaskSpec, load_task, synth_task_pair
from .gates import GateParams, HardConcreteConfig, deterministic_gate, prob_nonzero, sample_gate
from .model import GatedTransformer, GateSet, ModelConfig, TaskHead, forward, load_checkpoint, save_checkpoint
from .pipeline import PrunedModel, RunFailed, ScheduleSpec, finetune_stage, prune_stage, run_ablation, run_schedule
from .sparsity import SparsityTarget, binarize_to_target, expected_sparsity, lagrangian_penalty, update_multipliers

__version__ = "0.1.0"
