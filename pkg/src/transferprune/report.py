"""Per-layer structure of a binary mask: CSV rows and a heatmap payload."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .model import GateSet, ModelConfig
from .sparsity import fc_cost, head_cost

COLUMNS = ("layer", "mha", "ffn", "head_fraction", "fc_fraction", "hidden_columns", "retained_params")


def structure_report(mask: GateSet, config: ModelConfig) -> list[dict]:
    """One row per layer; a head or FFN unit counts only if its sublayer gate is open too."""
    mask.validate(config)
    if not mask.is_binary():
        raise ValueError("structure_report needs a binary mask")
    m = mask.arrays()
    hidden = int(m["z_hidden"].sum())
    rows = []
    for i in range(config.num_layers):
        heads = m["z_mha"][i] * m["z_head"][i]
        units = m["z_ffn"][i] * m["z_fc"][i]
        n_heads, n_units = int(heads.sum()), int(units.sum())
        params = 0.0
        if m["z_mha"][i]:
            params += n_heads * head_cost(config, hidden) + hidden + (2 * hidden if n_heads else 0)
        if m["z_ffn"][i]:
            params += n_units * fc_cost(hidden) + hidden + (2 * hidden if n_units else 0)
        rows.append({
            "layer": i,
            "mha": int(m["z_mha"][i]),
            "ffn": int(m["z_ffn"][i]),
            "head_fraction": n_heads / config.num_heads,
            "fc_fraction": n_units / config.ffn_dim,
            "hidden_columns": hidden,
            "retained_params": int(round(params)),
        })
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def heatmap_payload(rows: list[dict], title: str = "") -> dict:
    """Plot-ready matrix: one row per unit family, one column per layer."""
    return {
        "title": title,
        "x": [r["layer"] for r in rows],
        "y": ["heads", "fc"],
        "z": [[r["head_fraction"] for r in rows], [r["fc_fraction"] for r in rows]],
        "hidden_columns": rows[0]["hidden_columns"] if rows else 0,
    }


def layer_entropy(rows: list[dict]) -> float:
    """Shannon entropy (nats) of retained parameters normalized across layers."""
    counts = np.array([r["retained_params"] for r in rows], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def max_entropy(num_layers: int) -> float:
    return math.log(num_layers)
