"""Materialize a binary mask as a physically smaller model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .model import PAD_ID, GatedTransformer, GateSet, ModelConfig, TaskHead, _check_tokens

LN_EPS = 1e-5


@dataclass
class CompactSublayer:
    """One attention or FFN block restricted to retained units and columns.

    ``weights`` is empty for a bias-only block (sublayer gate open, no child
    unit retained).
    """

    bias: np.ndarray
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    units: int = 0

    def num_params(self) -> int:
        return int(self.bias.size + sum(w.size for w in self.weights.values()))


@dataclass
class CompactModel:
    config: ModelConfig
    columns: np.ndarray
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    attn: list[CompactSublayer | None]
    ffn: list[CompactSublayer | None]

    def num_params(self) -> int:
        """Prunable parameters still present (embeddings and final layernorm excluded)."""
        return sum(s.num_params() for s in self.attn + self.ffn if s is not None)

    def encode(self, tokens: np.ndarray) -> np.ndarray:
        tokens = _check_tokens(tokens, self.config)
        b, length = tokens.shape
        d_h = self.config.head_dim
        cols = self.columns
        x = self.tok_emb[tokens] + self.pos_emb[:length]
        pad = tokens == PAD_ID
        key_bias = np.where(pad, -1e9, 0.0)[:, None, None, :] if pad.any() else None
        scale = 1.0 / np.sqrt(d_h)
        for attn, ffn in zip(self.attn, self.ffn):
            if attn is not None:
                out = attn.bias
                if attn.units:
                    w = attn.weights
                    h = _layernorm_cols(x, cols, w["ln_g"], w["ln_b"])
                    n_h = attn.units
                    q = (h @ w["wq"] + w["bq"]).reshape(b, length, n_h, d_h).transpose(0, 2, 1, 3)
                    k = (h @ w["wk"] + w["bk"]).reshape(b, length, n_h, d_h).transpose(0, 2, 3, 1)
                    v = (h @ w["wv"] + w["bv"]).reshape(b, length, n_h, d_h).transpose(0, 2, 1, 3)
                    scores = (q @ k) * scale
                    if key_bias is not None:
                        scores = scores + key_bias
                    scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
                    scores /= scores.sum(axis=-1, keepdims=True)
                    ctx = (scores @ v).transpose(0, 2, 1, 3).reshape(b, length, n_h * d_h)
                    out = ctx @ w["wo"] + attn.bias
                x[..., cols] += out
            if ffn is not None:
                out = ffn.bias
                if ffn.units:
                    w = ffn.weights
                    h = _layernorm_cols(x, cols, w["ln_g"], w["ln_b"])
                    out = _gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + ffn.bias
                x[..., cols] += out
        return _layernorm_cols(x, slice(None), self.lnf_g, self.lnf_b)

    def forward(self, tokens: np.ndarray, head: TaskHead | None = None) -> np.ndarray:
        hidden = self.encode(tokens)
        if head is None:
            return hidden
        out = hidden[:, 0, :] @ head.weight.data + head.bias.data
        return out.reshape(-1) if head.kind == "regression" else out


def _layernorm_cols(x: np.ndarray, cols, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # statistics always span the full residual width
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return (xc[..., cols] * inv) * gamma + beta


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * (x * x * x))))


def compact(model: GatedTransformer, masks: GateSet) -> CompactModel:
    """Drop every pruned head, FFN unit and residual column from the weights."""
    cfg = model.config
    masks.validate(cfg)
    if not masks.is_binary():
        raise ValueError("compact needs binary masks")
    m = masks.arrays()
    cols = np.flatnonzero(m["z_hidden"])
    d_h = cfg.head_dim
    attn_blocks: list[CompactSublayer | None] = []
    ffn_blocks: list[CompactSublayer | None] = []
    for i in range(cfg.num_layers):
        w = {k: v.data for k, v in model.layer(i).items()}
        if m["z_mha"][i]:
            heads = np.flatnonzero(m["z_head"][i])
            dims = (heads[:, None] * d_h + np.arange(d_h)).reshape(-1)
            block = CompactSublayer(bias=w["bo"][cols].copy(), units=len(heads))
            if len(heads):
                block.weights = {
                    "ln_g": w["ln1_g"][cols], "ln_b": w["ln1_b"][cols],
                    "wq": w["wq"][np.ix_(cols, dims)], "bq": w["bq"][dims],
                    "wk": w["wk"][np.ix_(cols, dims)], "bk": w["bk"][dims],
                    "wv": w["wv"][np.ix_(cols, dims)], "bv": w["bv"][dims],
                    "wo": w["wo"][np.ix_(dims, cols)],
                }
            attn_blocks.append(block)
        else:
            attn_blocks.append(None)
        if m["z_ffn"][i]:
            units = np.flatnonzero(m["z_fc"][i])
            block = CompactSublayer(bias=w["b2"][cols].copy(), units=len(units))
            if len(units):
                block.weights = {
                    "ln_g": w["ln2_g"][cols], "ln_b": w["ln2_b"][cols],
                    "w1": w["w1"][np.ix_(cols, units)], "b1": w["b1"][units],
                    "w2": w["w2"][np.ix_(units, cols)],
                }
            ffn_blocks.append(block)
        else:
            ffn_blocks.append(None)
    p = model.params
    return CompactModel(cfg, cols, p["tok_emb"].data.copy(), p["pos_emb"].data.copy(),
                        p["lnf_g"].data.copy(), p["lnf_b"].data.copy(), attn_blocks, ffn_blocks)


def dense(model: GatedTransformer) -> CompactModel:
    """The unpruned model in the same execution format, for fair timing."""
    return compact(model, GateSet.ones(model.config))


def compact_forward_check(model: GatedTransformer, masks: GateSet, tokens: np.ndarray,
                          head: TaskHead | None = None) -> float:
    """Max abs difference between the compacted and the masked dense forward."""
    from . import autodiff as ad
    from .model import forward

    small = compact(model, masks)
    with ad.no_grad():
        ref = forward(model, tokens, masks, head).data
    got = small.forward(tokens, head)
    if ref.shape != got.shape:
        raise ShapeError(f"compacted output {got.shape} vs dense {ref.shape}")
    return float(np.max(np.abs(ref - got)))
