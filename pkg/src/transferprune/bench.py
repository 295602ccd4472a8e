"""Wall-clock inference latency of compacted models."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .compact import CompactModel, compact, dense
from .model import load_checkpoint


class BenchmarkError(RuntimeError):
    pass


@dataclass
class LatencyStats:
    label: str
    median: float
    p95: float
    times: list[float]
    batch_size: int
    num_examples: int
    num_params: int
    speedup: float | None = None
    reference: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def load_compact(path: str | Path) -> CompactModel:
    """Compacted model from a checkpoint directory (dense if it carries no mask)."""
    ckpt = load_checkpoint(path)
    return compact(ckpt.model, ckpt.masks) if ckpt.masks is not None else dense(ckpt.model)


def _one_pass(model: CompactModel, tokens: np.ndarray, batch_size: int) -> float:
    start = time.perf_counter()
    for i in range(0, len(tokens), batch_size):
        model.encode(tokens[i:i + batch_size])
    return time.perf_counter() - start


def benchmark_suite(models: dict[str, CompactModel | str | Path], tokens: np.ndarray, batch_size: int = 128,
                    passes: int = 5, warmup: int = 1, reference: str | None = None) -> dict[str, LatencyStats]:
    """Time full passes over ``tokens`` for several models.

    Passes are interleaved round-robin across models so slow drift in machine
    load hits every model alike. ``reference`` names the model used as the
    speedup denominator.
    """
    if passes < 5:
        raise ValueError("at least 5 timed passes are required")
    if reference is not None and reference not in models:
        raise ValueError(f"reference {reference!r} is not among the benchmarked models")
    tokens = np.asarray(tokens)
    loaded = {k: load_compact(m) if isinstance(m, (str, Path)) else m for k, m in models.items()}
    times: dict[str, list[float]] = {k: [] for k in loaded}
    try:
        for r in range(warmup + passes):
            for label, model in loaded.items():
                elapsed = _one_pass(model, tokens, batch_size)
                if r >= warmup:
                    times[label].append(elapsed)
    except (MemoryError, ShapeError, ValueError) as exc:
        raise BenchmarkError(f"benchmark of {label!r} failed on tokens {tokens.shape} "
                             f"at batch size {batch_size}: {exc}") from exc
    stats = {
        label: LatencyStats(label, float(np.median(t)), float(np.percentile(t, 95)), t, batch_size, len(tokens),
                            loaded[label].num_params())
        for label, t in times.items()
    }
    if reference is not None:
        ref = stats[reference].median
        for s in stats.values():
            s.speedup = ref / s.median
            s.reference = reference
    return stats


def benchmark_inference(model: CompactModel | str | Path, tokens: np.ndarray, batch_size: int = 128,
                        passes: int = 5, warmup: int = 1,
                        reference: CompactModel | str | Path | None = None) -> LatencyStats:
    """Median and p95 latency of one model, with speedup against ``reference`` if given."""
    models = {"model": model}
    if reference is not None:
        models["reference"] = reference
    stats = benchmark_suite(models, tokens, batch_size, passes, warmup,
                            "reference" if reference is not None else None)
    return stats["model"]
