"""Tasks: synthetic related pairs, newline-delimited JSON ingestion, batching, metrics."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import CLS_ID, NUM_SPECIAL, PAD_ID

SPLITS = ("train", "dev", "test")
_LITERAL = re.compile(r"^#(\d+)$")


class SchemaError(ValueError):
    pass


@dataclass
class Split:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Split":
        return Split(self.tokens[idx], self.labels[idx])


@dataclass
class TaskSpec:
    name: str
    kind: str = "classification"
    num_classes: int = 2
    source: dict = field(default_factory=dict)
    train_size: int | float | None = None
    metric: str = "accuracy"

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric not in ("accuracy", "pearson"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "pearson" and self.kind != "regression":
            raise ValueError("pearson is only defined for regression tasks")
        if self.metric == "accuracy" and self.kind != "classification":
            raise ValueError("accuracy is only defined for classification tasks")


@dataclass
class Task:
    spec: TaskSpec
    train: Split
    dev: Split
    test: Split

    @property
    def name(self) -> str:
        return self.spec.name

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def with_train(self, train: Split) -> "Task":
        return Task(self.spec, train, self.dev, self.test)

    def subsample(self, fraction: float, seed: int) -> "Task":
        """Seeded subsample of the training split; dev and test are untouched."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        n = len(self.train)
        if fraction == 1.0:
            return self
        keep = max(1, int(round(fraction * n)))
        idx = np.sort(np.random.default_rng(seed).permutation(n)[:keep])
        return self.with_train(self.train.subset(idx))


# metrics --------------------------------------------------------------------


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def pearson(pred: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise ValueError("pearson correlation is undefined when either input has zero variance")
    return float(xc @ yc) / denom


def score(spec: TaskSpec, outputs: np.ndarray, labels: np.ndarray) -> float:
    if spec.metric == "accuracy":
        return accuracy(outputs.argmax(axis=1), labels)
    return pearson(outputs, labels)


# synthetic pairs ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPairParams:
    """Two classification tasks over a shared bag-of-features generator.

    ``relatedness`` is the fraction of T's latent features that A also reads,
    with identical weights; the rest of A's features are disjoint from T's.
    """

    relatedness: float = 0.8
    n_T: int = 100
    n_A: int = 10000
    vocab_size: int = 1000
    seq_len: int = 16
    noise: float = 0.05
    num_features: int = 12
    features_per_task: int = 5
    tokens_per_feature: int = 4
    background_size: int = 64
    feature_prob: float = 0.5
    n_dev: int = 100
    n_test: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError("relatedness must lie in [0, 1]")
        if min(self.n_T, self.n_A, self.n_dev, self.n_test) <= 0:
            raise ValueError("dataset sizes must be positive")
        if self.num_features < 2 * self.features_per_task:
            raise ValueError("num_features must allow disjoint feature sets for the two tasks")
        if self.num_features * self.tokens_per_feature + self.background_size > self.vocab_size - NUM_SPECIAL:
            raise ValueError("vocabulary too small for the feature and background token sets")
        if self.background_size < 1:
            raise ValueError("background_size must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")


@dataclass
class LinearThresholdLabeler:
    """label = [sum_k w_k x_k > threshold] over a subset of binary latents."""

    features: np.ndarray
    weights: np.ndarray
    threshold: float

    def __call__(self, latents: np.ndarray) -> np.ndarray:
        return (latents[:, self.features] @ self.weights > self.threshold).astype(np.int64)


def _balanced_threshold(weights: np.ndarray) -> float:
    # midpoint between the two central scores of all 2^m equally likely patterns
    m = len(weights)
    patterns = (np.arange(2**m)[:, None] >> np.arange(m)) & 1
    scores = np.sort(patterns @ weights)
    half = len(scores) // 2
    return float(0.5 * (scores[half - 1] + scores[half]))


@dataclass
class SyntheticWorld:
    params: SyntheticPairParams
    feature_tokens: np.ndarray  # (num_features, tokens_per_feature)
    background: np.ndarray
    labelers: dict[str, LinearThresholdLabeler]

    @classmethod
    def create(cls, params: SyntheticPairParams, seed: int) -> "SyntheticWorld":
        rng = np.random.default_rng([seed, 0])
        content = rng.permutation(np.arange(NUM_SPECIAL, params.vocab_size))
        n_feat_tok = params.num_features * params.tokens_per_feature
        feature_tokens = content[:n_feat_tok].reshape(params.num_features, params.tokens_per_feature)
        background = np.sort(content[n_feat_tok:n_feat_tok + params.background_size])
        order = rng.permutation(params.num_features)
        m = params.features_per_task
        shared = int(round(params.relatedness * m))
        t_feat = order[:m]
        a_feat = np.concatenate([t_feat[:shared], order[m:m + (m - shared)]])
        t_w = rng.normal(size=m)
        a_w = np.concatenate([t_w[:shared], rng.normal(size=m - shared)])
        labelers = {
            "T": LinearThresholdLabeler(t_feat, t_w, _balanced_threshold(t_w)),
            "A": LinearThresholdLabeler(a_feat, a_w, _balanced_threshold(a_w)),
        }
        return cls(params, feature_tokens, background, labelers)

    def sample_latents(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return (rng.random((n, self.params.num_features)) < self.params.feature_prob).astype(np.int64)

    def render(self, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Token sequences: [CLS], one or two tokens per active feature, background filler."""
        p = self.params
        n = len(latents)
        body = p.seq_len - 1
        tokens = rng.choice(self.background, size=(n, body))
        for r in range(n):
            pieces = []
            for k in np.flatnonzero(latents[r]):
                count = 1 + int(rng.random() < 0.5)
                pieces.extend(rng.choice(self.feature_tokens[k], size=count))
            pieces = pieces[:body]
            pos = rng.choice(body, size=len(pieces), replace=False)
            tokens[r, pos] = pieces
        return np.concatenate([np.full((n, 1), CLS_ID), tokens], axis=1).astype(np.int64)

    def make_split(self, task: str, n: int, rng: np.random.Generator) -> Split:
        latents = self.sample_latents(n, rng)
        labels = self.labelers[task](latents)
        flip = rng.random(n) < self.params.noise
        labels = np.where(flip, 1 - labels, labels)
        return Split(self.render(latents, rng), labels)


def synth_task_pair(params: SyntheticPairParams, seed: int) -> tuple[Task, Task]:
    """Materialize the (T, A) pair for one generator seed."""
    world = SyntheticWorld.create(params, seed)
    tasks = []
    for i, (name, n_train) in enumerate((("T", params.n_T), ("A", params.n_A))):
        rng = np.random.default_rng([seed, 1, i])
        spec = TaskSpec(name, "classification", 2,
                        source={"synthetic": asdict(params), "seed": seed}, train_size=n_train)
        tasks.append(Task(spec, world.make_split(name, n_train, rng), world.make_split(name, params.n_dev, rng),
                          world.make_split(name, params.n_test, rng)))
    return tasks[0], tasks[1]


# file ingestion -------------------------------------------------------------


def token_id(word: str, vocab_size: int) -> int:
    """``#<id>`` literals map to that id; every other word is hashed into a bucket."""
    lit = _LITERAL.match(word)
    if lit:
        value = int(lit.group(1))
        if NUM_SPECIAL <= value < vocab_size:
            return value
    return NUM_SPECIAL + zlib.crc32(word.encode("utf-8")) % (vocab_size - NUM_SPECIAL)


def tokenize(text: str, vocab_size: int, seq_len: int) -> np.ndarray:
    ids = [CLS_ID] + [token_id(w, vocab_size) for w in text.split()][: seq_len - 1]
    out = np.full(seq_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def load_task(path: str | Path, name: str | None = None, kind: str = "classification",
              vocab_size: int = 1000, seq_len: int = 16, num_classes: int | None = None,
              split_seed: int = 0, split_fractions: tuple[float, float] = (0.8, 0.1)) -> Task:
    """Read newline-delimited ``{"text": str, "label": int|float}`` records.

    An optional ``"split"`` field pins a record to train/dev/test; records
    without one are assigned by a seeded permutation.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    texts, labels, splits = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str) or "label" not in rec:
                raise SchemaError(f"{path}:{lineno}: expected an object with 'text' (string) and 'label'")
            label = rec["label"]
            if isinstance(label, bool) or not isinstance(label, (int, float)):
                raise SchemaError(f"{path}:{lineno}: label must be a number")
            if kind == "classification":
                if isinstance(label, float) and not label.is_integer():
                    raise SchemaError(f"{path}:{lineno}: non-integer label {label} in a classification task")
                if label < 0:
                    raise SchemaError(f"{path}:{lineno}: class labels must be non-negative")
            split = rec.get("split")
            if split is not None and split not in SPLITS:
                raise SchemaError(f"{path}:{lineno}: unknown split {split!r}")
            texts.append(rec["text"])
            labels.append(label)
            splits.append(split)
    if not texts:
        raise SchemaError(f"{path}: no records")
    tokens = np.stack([tokenize(t, vocab_size, seq_len) for t in texts])
    if kind == "classification":
        y = np.asarray(labels, dtype=np.int64)
        num_classes = num_classes or int(y.max()) + 1
        if y.max() >= num_classes:
            raise SchemaError(f"{path}: label {int(y.max())} exceeds num_classes={num_classes}")
        spec = TaskSpec(name or path.stem, "classification", num_classes, {"file": str(path)})
    else:
        y = np.asarray(labels, dtype=np.float64)
        spec = TaskSpec(name or path.stem, "regression", 1, {"file": str(path)}, metric="pearson")

    assigned = np.array([s if s is not None else "" for s in splits], dtype=object)
    free = np.flatnonzero(assigned == "")
    if len(free):
        perm = free[np.random.default_rng(split_seed).permutation(len(free))]
        n_train = int(round(split_fractions[0] * len(free)))
        n_dev = int(round(split_fractions[1] * len(free)))
        assigned[perm[:n_train]] = "train"
        assigned[perm[n_train:n_train + n_dev]] = "dev"
        assigned[perm[n_train + n_dev:]] = "test"
    parts = {s: np.flatnonzero(assigned == s) for s in SPLITS}
    spec.train_size = len(parts["train"])
    return Task(spec, *(Split(tokens[parts[s]], y[parts[s]]) for s in SPLITS))


def export_task(task: Task, path: str | Path) -> Path:
    """Write a task as newline-delimited JSON using ``#<id>`` literal tokens."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for split in SPLITS:
            data = task.split(split)
            for row, label in zip(data.tokens, data.labels):
                words = [f"#{int(t)}" for t in row[1:] if t != PAD_ID]
                value = int(label) if task.spec.kind == "classification" else float(label)
                fh.write(json.dumps({"text": " ".join(words), "label": value, "split": split}) + "\n")
    return path


# batching -------------------------------------------------------------------


class BatchStream:
    """Endless shuffled minibatches over one split, with a consumption counter."""

    def __init__(self, split: Split, batch_size: int, rng: np.random.Generator):
        if len(split) == 0:
            raise ValueError("cannot batch an empty split")
        self.split = split
        self.batch_size = min(batch_size, len(split))
        self.rng = rng
        self.consumed = 0
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.split))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        self.consumed += 1
        return self.split.tokens[idx], self.split.labels[idx]

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.split) / self.batch_size)
