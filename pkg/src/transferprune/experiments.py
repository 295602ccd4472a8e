"""Run configs, the shipped experiment matrices, the data-fraction sweep and the pretrained fixture."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .coupling import CouplingStrategy, TaskWeights
from .data import SyntheticPairParams, SyntheticWorld, Task, load_task, synth_task_pair
from .model import GatedTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (ABLATION_MODES, SCHEDULES, PrunedModel, ScheduleSpec, pretrain_mlm, run_ablation,
                       run_schedule)
from .records import ExperimentRecord, RecordSink, config_hash, mask_bits, mask_digest, utc_now
from .report import structure_report
from .sparsity import SHIPPED_TARGETS

log = logging.getLogger(__name__)

FIXTURE = "synthetic-small"
PAIR_SEED = 0
SHIPPED_PAIR = SyntheticPairParams()
SWEEP_PAIR = replace(SHIPPED_PAIR, n_T=2000)
SWEEP_FRACTIONS = (0.05, 0.10, 0.50)
EXPERIMENT_MODEL = ModelConfig(num_layers=4, hidden_dim=32, num_heads=8, ffn_dim=64, vocab_size=1000,
                               max_seq_len=16)
SHIPPED_RECIPE = dict(target=0.95, prune_steps=1000, finetune_epochs=20, model_lr_prune=3e-3,
                      model_lr_finetune=3e-3, structure_lr=0.01, batch_size=16, freeze_embeddings=False)
PRETRAIN_RECIPE = dict(corpus_size=20000, steps=1500, seed=0, lr=1e-3, batch_size=32)


# pretrained starting point -----------------------------------------------------


def build_pretrained(pair: SyntheticPairParams = SHIPPED_PAIR, pair_seed: int = PAIR_SEED,
                     config: ModelConfig = EXPERIMENT_MODEL, corpus_size: int = 20000, steps: int = 1500,
                     seed: int = 0, lr: float = 1e-3, batch_size: int = 32) -> GatedTransformer:
    """Masked-token pretraining on unlabeled text from the synthetic world."""
    world = SyntheticWorld.create(pair, pair_seed)
    rng = np.random.default_rng([pair_seed, 2])
    corpus = world.render(world.sample_latents(corpus_size, rng), rng)
    return pretrain_mlm(config, corpus, steps, seed, lr=lr, batch_size=batch_size)


def fixture_path(name: str = FIXTURE) -> Path:
    return Path(str(resources.files("transferprune") / "fixtures" / name))


def write_fixture(path: str | Path, pair: SyntheticPairParams = SHIPPED_PAIR, pair_seed: int = PAIR_SEED,
                  config: ModelConfig = EXPERIMENT_MODEL, **recipe) -> Path:
    recipe = {**PRETRAIN_RECIPE, **recipe}
    model = build_pretrained(pair, pair_seed, config, **recipe)
    return save_checkpoint(path, model, extra={"pretrain": recipe, "pair": asdict(pair), "pair_seed": pair_seed})


def load_pretrained(ref: str, config: ModelConfig = EXPERIMENT_MODEL) -> GatedTransformer:
    """``ref`` is a fixture name, a checkpoint directory, or ``random:<seed>``."""
    if ref.startswith("random:"):
        return GatedTransformer.init(config, np.random.default_rng([int(ref.split(":", 1)[1]), 41]))
    path = Path(ref)
    if not (path / "manifest.json").exists():
        path = fixture_path(ref)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no pretrained checkpoint or fixture named {ref!r}")
    model = load_checkpoint(path).model
    if model.config != config:
        raise ValueError(f"pretrained checkpoint {ref!r} has config {model.config}, the run expects {config}")
    return model


# run configs ---------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one run apart from its seed.

    ``mode`` is ``"schedule"`` or one of the ablation modes. ``fraction``
    subsamples T's train split, drawing a fresh subsample per run seed.
    ``task_files`` replaces the synthetic pair with newline-delimited JSON
    tasks keyed by role (``"T"``/``"A"``).
    """

    spec: ScheduleSpec = field(default_factory=lambda: ScheduleSpec(**SHIPPED_RECIPE))
    mode: str = "schedule"
    pair: SyntheticPairParams = SHIPPED_PAIR
    pair_seed: int = PAIR_SEED
    pretrained: str = FIXTURE
    model: ModelConfig = EXPERIMENT_MODEL
    fraction: float = 1.0
    task_files: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.mode != "schedule" and self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")

    @property
    def label(self) -> str:
        return self.spec.name if self.mode == "schedule" else f"ablation:{self.mode}"

    def to_dict(self) -> dict:
        spec = self.spec.to_dict()
        spec.pop("seeds")
        return {"mode": self.mode, "spec": spec, "pair": asdict(self.pair), "pair_seed": self.pair_seed,
                "pretrained": self.pretrained, "model": asdict(self.model), "fraction": self.fraction,
                "task_files": [list(p) for p in self.task_files]}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        payload = dict(payload)
        spec = ScheduleSpec.from_dict(payload.pop("spec", {}))
        pair = SyntheticPairParams(**payload.pop("pair", {}))
        model = ModelConfig(**payload.pop("model", {}))
        files = tuple(tuple(p) for p in payload.pop("task_files", ()))
        return cls(spec=spec, pair=pair, model=model, task_files=files, **payload)

    def hash(self) -> str:
        return config_hash(self.to_dict())


class Workbench:
    """Caches tasks, pretrained models and prune-stage results across runs."""

    def __init__(self, artifacts: str | Path | None = None):
        self.artifacts = Path(artifacts) if artifacts is not None else None
        self._tasks: dict[str, dict[str, Task]] = {}
        self._pretrained: dict[str, GatedTransformer] = {}
        self._prune: dict[tuple, dict] = {}

    def _data_key(self, run: RunConfig, seed: int) -> str:
        # subsamples differ per run seed; full datasets are shared
        sub = seed if run.fraction < 1.0 else None
        return json.dumps([asdict(run.pair), run.pair_seed, run.fraction, sub, run.task_files, asdict(run.model)])

    def tasks(self, run: RunConfig, seed: int) -> dict[str, Task]:
        key = self._data_key(run, seed)
        if key in self._tasks:
            return self._tasks[key]
        full_key = self._data_key(replace(run, fraction=1.0), seed)
        if full_key not in self._tasks:
            if run.task_files:
                self._tasks[full_key] = {role: load_task(path, name=role, vocab_size=run.model.vocab_size,
                                                         seq_len=run.model.max_seq_len)
                                         for role, path in run.task_files}
            else:
                t, a = synth_task_pair(run.pair, run.pair_seed)
                self._tasks[full_key] = {"T": t, "A": a}
        tasks = dict(self._tasks[full_key])
        if run.fraction < 1.0:
            tasks["T"] = tasks["T"].subsample(run.fraction, seed)
        self._tasks[key] = tasks
        return tasks

    def pretrained(self, run: RunConfig) -> GatedTransformer:
        if run.pretrained not in self._pretrained:
            self._pretrained[run.pretrained] = load_pretrained(run.pretrained, run.model)
        return self._pretrained[run.pretrained]

    def run(self, run: RunConfig, seed: int) -> PrunedModel:
        cache = self._prune.setdefault((self._data_key(run, seed), run.pretrained), {})
        tasks, pre = self.tasks(run, seed), self.pretrained(run)
        if run.mode == "schedule":
            return run_schedule(pre, tasks, run.spec, seed, cache)
        return run_ablation(run.mode, pre, tasks, run.spec, seed, cache)

    def execute(self, run: RunConfig, seed: int) -> ExperimentRecord:
        """Run and summarize; failures come back as records with status "failed"."""
        record = ExperimentRecord(run.hash(), run.to_dict(), seed, started=utc_now())
        try:
            result = self.run(run, seed)
        except Exception as exc:  # a failed run must not stop a matrix
            log.warning("run %s seed %d failed: %s", run.label, seed, exc)
            record.status, record.error = "failed", f"{type(exc).__name__}: {exc}"
            record.finished = utc_now()
            return record
        cfg = result.model.config
        record.metrics = dict(result.metrics)
        record.sparsity = result.sparsity
        record.mask_bits = mask_bits(result.masks)
        record.mask_sha256 = mask_digest(result.masks)
        record.structure = structure_report(result.masks, cfg)
        record.batches = result.batches
        if self.artifacts is not None:
            out = self.artifacts / f"{record.config_hash}-{seed}"
            save_checkpoint(out, result.model, list(result.heads.values()), masks=result.masks,
                            extra={"config": record.config, "seed": seed})
            (out / "provenance.json").write_text(json.dumps(
                {"config": record.config, "config_hash": record.config_hash, "seed": seed,
                 "metrics": record.metrics, "sparsity": record.sparsity}, indent=1, sort_keys=True))
            record.artifact = str(out)
        record.finished = utc_now()
        return record


# matrices ------------------------------------------------------------------------


def _labels_to_modes(labels) -> list[tuple[str, str | None]]:
    out = []
    for label in labels:
        if label.startswith("ablation:"):
            out.append((label.split(":", 1)[1], None))
        elif label in SCHEDULES:
            out.append(("schedule", label))
        else:
            raise ValueError(f"unknown schedule {label!r}")
    return out


def expand_grid(grid: dict) -> tuple[list[RunConfig], list[int]]:
    """Cartesian product of the list-valued grid axes.

    Axes: ``schedules`` (schedule names or ``ablation:<mode>``), ``couplings``,
    ``weights`` ([w_T, w_A] pairs), ``model_lrs``, ``structure_lrs``,
    ``sparsities``, ``fractions``. ``base`` holds scalar ScheduleSpec overrides;
    ``pair``, ``pair_seed``, ``pretrained`` and ``model`` configure the data.
    """
    known = {"schedules", "couplings", "weights", "model_lrs", "structure_lrs", "sparsities", "fractions",
             "seeds", "base", "pair", "pair_seed", "pretrained", "model", "task_files"}
    unknown = set(grid) - known
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    if not grid.get("schedules"):
        raise ValueError("grid needs at least one schedule")
    base = {**SHIPPED_RECIPE, **grid.get("base", {})}
    common = dict(pair=SyntheticPairParams(**{**asdict(SHIPPED_PAIR), **grid.get("pair", {})}),
                  pair_seed=grid.get("pair_seed", PAIR_SEED), pretrained=grid.get("pretrained", FIXTURE),
                  model=ModelConfig(**{**asdict(EXPERIMENT_MODEL), **grid.get("model", {})}),
                  task_files=tuple(sorted(grid.get("task_files", {}).items())))
    axes = [
        _labels_to_modes(grid["schedules"]),
        [CouplingStrategy(**c) if isinstance(c, dict) else CouplingStrategy(c)
         for c in grid.get("couplings", [base.pop("coupling", "delta")])],
        [TaskWeights(*w) for w in grid.get("weights", [[1.0, 1.0]])],
        grid.get("model_lrs", [None]),
        grid.get("structure_lrs", [base["structure_lr"]]),
        grid.get("sparsities", [base["target"]]),
        grid.get("fractions", [1.0]),
    ]
    runs = []
    for (mode, sched), coupling, weights, mlr, slr, target, fraction in itertools.product(*axes):
        kw = dict(base, coupling=coupling, weights=weights, structure_lr=slr, target=target)
        if mlr is not None:
            kw.update(model_lr_prune=mlr, model_lr_finetune=mlr)
        spec = ScheduleSpec.named(sched, **kw) if sched else ScheduleSpec(**kw)
        runs.append(RunConfig(spec=spec, mode=mode, fraction=fraction, **common))
    seeds = [int(s) for s in grid.get("seeds", [0])]
    if not seeds:
        raise ValueError("grid needs at least one seed")
    return runs, seeds


def run_matrix(grid: dict, sink: RecordSink | None = None, workbench: Workbench | None = None
               ) -> list[ExperimentRecord]:
    """Execute every (config, seed) pair; pairs already recorded as ok in ``sink`` are skipped."""
    runs, seeds = expand_grid(grid)
    workbench = workbench or Workbench()
    done = sink.completed() if sink is not None else set()
    records = []
    for seed in seeds:
        for run in runs:
            if (run.hash(), seed) in done:
                log.info("skip %s seed %d (already recorded)", run.label, seed)
                continue
            record = workbench.execute(run, seed)
            log.info("%s seed %d: %s", run.label, seed, record.metrics or record.error)
            if sink is not None:
                sink.append(record)
            records.append(record)
    return records


def when_to_transfer_grid(seeds=range(5)) -> dict:
    """The four transfer schedules plus the no-transfer baseline."""
    return {"schedules": list(SCHEDULES), "seeds": list(seeds)}


def ablation_grid(seeds=range(5)) -> dict:
    return {"schedules": [f"ablation:{m}" for m in ABLATION_MODES], "seeds": list(seeds)}


def sparsity_sweep_grid(seeds=range(5), schedules=("no_transfer", "prune_AT-ft_T")) -> dict:
    return {"schedules": list(schedules), "sparsities": list(SHIPPED_TARGETS), "seeds": list(seeds)}


def data_fraction_grid(fractions=SWEEP_FRACTIONS, sparsities=SHIPPED_TARGETS, seeds=range(5)) -> dict:
    return {"schedules": ["no_transfer"], "fractions": list(fractions), "sparsities": list(sparsities),
            "seeds": list(seeds), "pair": asdict(SWEEP_PAIR)}


def data_fraction_sweep(fractions=SWEEP_FRACTIONS, sparsities=SHIPPED_TARGETS, seeds=range(5),
                        sink: RecordSink | None = None, workbench: Workbench | None = None,
                        **overrides) -> tuple[list[ExperimentRecord], dict]:
    """No-transfer pruning per (train fraction, sparsity); returns records and mean-accuracy curves."""
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    grid = {**data_fraction_grid(fractions, sparsities, seeds), **overrides}
    records = run_matrix(grid, sink, workbench)
    return records, summarize(records, by=("fraction", "target"))


def summarize(records: list[ExperimentRecord], by=("label",), metric: str = "test_T") -> dict:
    """Mean metric grouped by record fields; ``label`` groups by schedule or ablation name."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if r.status != "ok":
            continue
        run = RunConfig.from_dict(r.config)
        values = {"label": run.label, "fraction": run.fraction, "target": run.spec.target}
        key = tuple(values[b] for b in by)
        groups.setdefault(key, []).append(r.metrics[metric])
    return {k if len(k) > 1 else k[0]: float(np.mean(v)) for k, v in sorted(groups.items())}


def reproduce(record: ExperimentRecord, workbench: Workbench | None = None) -> ExperimentRecord:
    """Re-run a record's config and seed from scratch."""
    return (workbench or Workbench()).execute(RunConfig.from_dict(record.config), record.seed)


def same_outcome(a: ExperimentRecord, b: ExperimentRecord) -> bool:
    return a.mask_sha256 == b.mask_sha256 and a.mask_bits == b.mask_bits and a.metrics == b.metrics


# directional checks ----------------------------------------------------------------

JOINT_SCHEDULES = ("prune_AT-ft_T", "prune_AT-ft_AT")


def check_transfer_trend(means: dict[str, float], margin: float = 0.02) -> tuple[bool, str]:
    """Both joint-prune schedules beat the baseline; the better one by at least ``margin``."""
    base = means["no_transfer"]
    joint = {k: means[k] for k in JOINT_SCHEDULES}
    best = max(joint.values())
    ok = all(v > base for v in joint.values()) and best - base >= margin
    detail = ", ".join(f"{k}={v:.4f}" for k, v in joint.items())
    return ok, f"no_transfer={base:.4f}, {detail}, best gain={best - base:+.4f} (need >= {margin})"


def check_ablation_trend(means: dict[str, float]) -> tuple[bool, str]:
    both, masks, weights = (means[f"ablation:{m}"] for m in ("both", "masks_only", "weights_only"))
    ok = both >= masks and both >= weights
    return ok, f"both={both:.4f}, masks_only={masks:.4f}, weights_only={weights:.4f}"


def accuracy_drop(curves: dict, fraction: float, dense_target: float, sparse_target: float) -> float:
    return curves[(fraction, dense_target)] - curves[(fraction, sparse_target)]


def check_fraction_trend(curves: dict, low: float = 0.05, high: float = 0.50, dense_target: float = 0.40,
                         sparse_target: float = 0.98) -> tuple[bool, str]:
    """The accuracy lost between the two sparsities is larger with less data."""
    d_low = accuracy_drop(curves, low, dense_target, sparse_target)
    d_high = accuracy_drop(curves, high, dense_target, sparse_target)
    return d_low > d_high, f"drop at fraction {low}: {d_low:+.4f}, at fraction {high}: {d_high:+.4f}"
