"""Toy pre-layernorm encoder with coarse and fine structural gates.

Gate insertion points, per layer ``i``:

* attention head ``j`` output is scaled by ``z_head[i, j]`` and the whole
  attention sublayer output (bias included) by ``z_mha[i]``;
* FFN intermediate unit ``j`` is scaled by ``z_fc[i, j]`` and the FFN sublayer
  output by ``z_ffn[i]``;
* ``z_hidden`` (one vector shared by all layers) masks the normalized input
  of every sublayer and its output before the residual addition.

Embeddings and the final layernorm are never gated, so pruned residual
columns carry the embedding values through unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
NUM_SPECIAL = 4
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 1000
    max_seq_len: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (isinstance(value, int) and value > 0):
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError("vocab_size must leave room for the special tokens")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def num_gates(self) -> int:
        n = self.num_layers
        return 2 * n + n * self.num_heads + n * self.ffn_dim + self.hidden_dim


@dataclass
class GateSet:
    """Gate values for the five families; arrays or differentiable Tensors."""

    z_mha: np.ndarray | Tensor
    z_head: np.ndarray | Tensor
    z_ffn: np.ndarray | Tensor
    z_fc: np.ndarray | Tensor
    z_hidden: np.ndarray | Tensor

    FAMILIES = ("z_mha", "z_head", "z_ffn", "z_fc", "z_hidden")

    @staticmethod
    def family_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        n = config.num_layers
        return {
            "z_mha": (n,),
            "z_head": (n, config.num_heads),
            "z_ffn": (n,),
            "z_fc": (n, config.ffn_dim),
            "z_hidden": (config.hidden_dim,),
        }

    @classmethod
    def slices(cls, config: ModelConfig) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in cls.family_shapes(config).items():
            size = math.prod(shape)
            out[name] = slice(start, start + size)
            start += size
        return out

    @classmethod
    def from_flat(cls, flat, config: ModelConfig) -> "GateSet":
        """Split a length-K vector (array or Tensor) into the five families."""
        if flat.shape != (config.num_gates,):
            raise ShapeError(f"gate vector of shape {flat.shape} does not match K={config.num_gates}")
        shapes = cls.family_shapes(config)
        parts = {}
        for name, sl in cls.slices(config).items():
            piece = flat[sl]
            parts[name] = piece.reshape(shapes[name])
        return cls(**parts)

    @classmethod
    def ones(cls, config: ModelConfig) -> "GateSet":
        return cls(**{k: np.ones(s) for k, s in cls.family_shapes(config).items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in self._items()}

    def _items(self):
        return ((k, getattr(self, k)) for k in self.FAMILIES)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays().values()])

    def copy(self) -> "GateSet":
        return GateSet(**self.arrays())

    def validate(self, config: ModelConfig) -> None:
        for name, shape in self.family_shapes(config).items():
            value = getattr(self, name)
            got = tuple(value.shape)
            if got != shape:
                raise ShapeError(f"gate family {name} has shape {got}, model expects {shape}")
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            if np.any(data < 0) or np.any(data > 1):
                raise ValueError(f"gate family {name} has values outside [0, 1]")

    def is_binary(self) -> bool:
        return all(np.all((v == 0) | (v == 1)) for v in self.arrays().values())

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays().items()}

    @classmethod
    def from_json(cls, payload: dict) -> "GateSet":
        return cls(**{k: np.asarray(payload[k], dtype=np.float64) for k in cls.FAMILIES})


@dataclass
class TaskHead:
    task_id: str
    kind: str  # "classification" or "regression"
    num_classes: int
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, task_id: str, kind: str, hidden_dim: int, rng: np.random.Generator,
               num_classes: int = 2) -> "TaskHead":
        if kind not in ("classification", "regression"):
            raise ValueError(f"unknown head kind {kind!r}")
        out = num_classes if kind == "classification" else 1
        if kind == "classification" and num_classes < 2:
            raise ValueError("classification heads need at least two classes")
        return cls(
            task_id,
            kind,
            num_classes if kind == "classification" else 1,
            Tensor(rng.normal(0.0, 0.02, size=(hidden_dim, out)), requires_grad=True, name=f"head.{task_id}.weight"),
            Tensor(np.zeros(out), requires_grad=True, name=f"head.{task_id}.bias"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def copy(self) -> "TaskHead":
        return TaskHead(self.task_id, self.kind, self.num_classes,
                        Tensor(self.weight.data.copy(), True, self.weight.name),
                        Tensor(self.bias.data.copy(), True, self.bias.name))

    def loss(self, out: Tensor, labels: np.ndarray) -> Tensor:
        if self.kind == "classification":
            return ad.cross_entropy(out, np.asarray(labels, dtype=np.int64))
        return ad.mse(out, np.asarray(labels, dtype=np.float64))


LAYER_PARAMS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class GatedTransformer:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    EMBEDDINGS = ("tok_emb", "pos_emb")

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> "GatedTransformer":
        d, f = config.hidden_dim, config.ffn_dim
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, std, (config.vocab_size, d)),
            "pos_emb": rng.normal(0.0, std, (config.max_seq_len, d)),
        }
        for i in range(config.num_layers):
            shapes = {
                "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, f), "w2": (f, d),
            }
            for name in LAYER_PARAMS:
                key = f"layers.{i}.{name}"
                if name in shapes:
                    p[key] = rng.normal(0.0, std, shapes[name])
                elif name.endswith("_g"):
                    p[key] = np.ones(d)
                elif name == "b1":
                    p[key] = np.zeros(f)
                else:
                    p[key] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    def layer(self, i: int) -> dict[str, Tensor]:
        return {name: self.params[f"layers.{i}.{name}"] for name in LAYER_PARAMS}

    def copy(self) -> "GatedTransformer":
        return GatedTransformer(self.config, {k: Tensor(v.data.copy(), True, k) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].data.shape != v.shape:
                raise ShapeError(f"parameter {k}: stored shape {v.shape} vs model {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def encode(self, tokens: np.ndarray, gates: GateSet | None = None) -> Tensor:
        return encode(self, tokens, gates)


def trainable_parameters(model: GatedTransformer, heads: list[TaskHead] | tuple = (),
                         freeze_embeddings: bool = True) -> list[Tensor]:
    """Transformer (and head) parameters an optimizer may update."""
    params = [t for k, t in model.params.items() if not (freeze_embeddings and k in model.EMBEDDINGS)]
    for h in heads:
        params.extend(h.parameters())
    return params


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be a (batch, length) array, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    return tokens.astype(np.int64, copy=False)


def encode(model: GatedTransformer, tokens: np.ndarray, gates: GateSet | None = None) -> Tensor:
    """Final-layernormed hidden states of shape (batch, length, hidden_dim)."""
    cfg = model.config
    tokens = _check_tokens(tokens, cfg)
    if gates is not None:
        gates.validate(cfg)
    b, length = tokens.shape
    n_h, d_h, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim
    p = model.params
    x = ad.embedding(p["tok_emb"], tokens) + p["pos_emb"][:length]
    pad = tokens == PAD_ID
    key_bias = np.where(pad, -1e9, 0.0)[:, None, None, :] if pad.any() else None
    scale = 1.0 / math.sqrt(d_h)
    zh = gates.z_hidden if gates is not None else None

    for i in range(cfg.num_layers):
        w = model.layer(i)
        z_mha = gates.z_mha[i] if gates is not None else None
        z_head = gates.z_head[i] if gates is not None else None
        z_ffn = gates.z_ffn[i] if gates is not None else None
        z_fc = gates.z_fc[i] if gates is not None else None

        h = ad.layernorm(x, w["ln1_g"], w["ln1_b"])
        if zh is not None:
            h = h * zh
        q = (h @ w["wq"] + w["bq"]).reshape(b, length, n_h, d_h).transpose(0, 2, 1, 3)
        k = (h @ w["wk"] + w["bk"]).reshape(b, length, n_h, d_h).transpose(0, 2, 3, 1)
        v = (h @ w["wv"] + w["bv"]).reshape(b, length, n_h, d_h).transpose(0, 2, 1, 3)
        scores = (q @ k) * scale
        if key_bias is not None:
            scores = scores + key_bias
        ctx = ad.softmax(scores, axis=-1) @ v
        if z_head is not None:
            ctx = ctx * ad.reshape(z_head, (n_h, 1, 1))
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, length, d)
        out = ctx @ w["wo"] + w["bo"]
        if z_mha is not None:
            out = out * z_mha
        if zh is not None:
            out = out * zh
        x = x + out

        h = ad.layernorm(x, w["ln2_g"], w["ln2_b"])
        if zh is not None:
            h = h * zh
        act = ad.gelu(h @ w["w1"] + w["b1"])
        if z_fc is not None:
            act = act * z_fc
        out = act @ w["w2"] + w["b2"]
        if z_ffn is not None:
            out = out * z_ffn
        if zh is not None:
            out = out * zh
        x = x + out

    return ad.layernorm(x, p["lnf_g"], p["lnf_b"])


def forward(model: GatedTransformer, tokens: np.ndarray, gates: GateSet | None = None,
            head: TaskHead | None = None) -> Tensor:
    """Head output read from the first ([CLS]) position.

    Classification heads return (batch, num_classes) logits; regression
    heads return (batch,) predictions.
    """
    hidden = encode(model, tokens, gates)
    if head is None:
        return hidden
    if head.weight.shape[0] != model.config.hidden_dim:
        raise ShapeError(f"head {head.task_id} expects width {head.weight.shape[0]}, "
                         f"model has {model.config.hidden_dim}")
    out = hidden[:, 0, :] @ head.weight + head.bias
    if head.kind == "regression":
        out = out.reshape(out.shape[0])
    return out


def predict(model: GatedTransformer, tokens: np.ndarray, gates: GateSet | None, head: TaskHead,
            batch_size: int = 256) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for start in range(0, len(tokens), batch_size):
            outs.append(forward(model, tokens[start:start + batch_size], gates, head).data)
    return np.concatenate(outs, axis=0)


# checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str | Path, model: GatedTransformer, heads: list[TaskHead] = (),
                    gate_log_alpha: dict[str, np.ndarray] | None = None, masks: GateSet | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``tensors.npz`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {f"model/{k}": v.data for k, v in model.params.items()}
    head_meta = []
    for h in heads:
        arrays[f"head/{h.task_id}/weight"] = h.weight.data
        arrays[f"head/{h.task_id}/bias"] = h.bias.data
        head_meta.append({"task_id": h.task_id, "kind": h.kind, "num_classes": h.num_classes})
    for name, la in (gate_log_alpha or {}).items():
        arrays[f"gates/{name}"] = np.asarray(la)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "tensors": {k: list(v.shape) for k, v in arrays.items()},
        "heads": head_meta,
        "gate_params": sorted((gate_log_alpha or {}).keys()),
        "masks": masks.to_json() if masks is not None else None,
        "extra": extra or {},
    }
    np.savez(path / "tensors.npz", **arrays)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


@dataclass
class Checkpoint:
    model: GatedTransformer
    heads: dict[str, TaskHead]
    gate_log_alpha: dict[str, np.ndarray]
    masks: GateSet | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig(**manifest["config"])
    with np.load(path / "tensors.npz") as z:
        arrays = {k: z[k] for k in z.files}
    model = GatedTransformer(config, {
        k[len("model/"):]: Tensor(v, True, k[len("model/"):]) for k, v in arrays.items() if k.startswith("model/")
    })
    heads = {}
    for meta in manifest["heads"]:
        tid = meta["task_id"]
        heads[tid] = TaskHead(tid, meta["kind"], meta["num_classes"],
                              Tensor(arrays[f"head/{tid}/weight"], True, f"head.{tid}.weight"),
                              Tensor(arrays[f"head/{tid}/bias"], True, f"head.{tid}.bias"))
    gate_la = {name: arrays[f"gates/{name}"] for name in manifest["gate_params"]}
    masks = GateSet.from_json(manifest["masks"]) if manifest["masks"] is not None else None
    return Checkpoint(model, heads, gate_la, masks, manifest.get("extra", {}))
