"""Append-only JSON-lines experiment records.

Each line is one :class:`ExperimentRecord`. Field reference:

``schema``        record schema version (currently 1)
``config_hash``   16 hex chars of sha256 over the canonical JSON of ``config``
``config``        everything needed to rebuild the run except the seed
``seed``          run seed
``status``        ``"ok"`` or ``"failed"``
``error``         failure message, ``null`` on success
``metrics``       task metrics, e.g. ``{"test_T": 0.61, "dev_T": 0.6}``
``sparsity``      achieved sparsity of the binary mask
``mask_bits``     the binary mask as a 0/1 string in flat gate order
``mask_sha256``   digest of the float64 flat mask bytes
``latency``       optional benchmark statistics (seconds)
``structure``     per-layer retention rows (see :mod:`transferprune.report`)
``batches``       minibatches consumed per stage and task
``artifact``      checkpoint directory, if one was written
``started`` / ``finished``  UTC ISO-8601 timestamps
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .model import GateSet

SCHEMA_VERSION = 1


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def mask_bits(mask: GateSet) -> str:
    return "".join("1" if v else "0" for v in mask.flat())


def mask_digest(mask: GateSet) -> str:
    return hashlib.sha256(np.ascontiguousarray(mask.flat(), dtype=np.float64).tobytes()).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ExperimentRecord:
    config_hash: str
    config: dict
    seed: int
    status: str = "ok"
    error: str | None = None
    metrics: dict = field(default_factory=dict)
    sparsity: float | None = None
    mask_bits: str | None = None
    mask_sha256: str | None = None
    latency: dict | None = None
    structure: list | None = None
    batches: dict = field(default_factory=dict)
    artifact: str | None = None
    started: str = ""
    finished: str = ""
    schema: int = SCHEMA_VERSION

    @property
    def key(self) -> tuple[str, int]:
        return self.config_hash, self.seed

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentRecord":
        if payload.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {payload.get('schema')!r}")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in known})


class RecordSink:
    """Serialized appends to one JSON-lines file; existing lines are never rewritten."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: ExperimentRecord) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(record.to_json() + "\n")

    def load(self) -> list[ExperimentRecord]:
        if not self.path.exists():
            return []
        with self.path.open() as fh:
            return [ExperimentRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def completed(self) -> set[tuple[str, int]]:
        return {r.key for r in self.load() if r.status == "ok"}
