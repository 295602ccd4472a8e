import numpy as np
import pytest

from oracles import SMALL, random_binary_mask, random_model, random_tokens
from transferprune.bench import BenchmarkError, benchmark_inference, benchmark_suite, load_compact
from transferprune.compact import compact, dense
from transferprune.model import GateSet, ModelConfig, save_checkpoint
from transferprune.report import (COLUMNS, heatmap_payload, layer_entropy, max_entropy, structure_report, to_csv)
from transferprune.sparsity import mask_param_count, random_mask

CONFIGS = [SMALL, ModelConfig(num_layers=3, hidden_dim=12, num_heads=3, ffn_dim=5, vocab_size=20, max_seq_len=5)]


def test_self_speedup_is_near_one():
    config = ModelConfig()
    model = dense(random_model(config, 0))
    tokens = random_tokens(config, np.random.default_rng(0), batch=512, pad=False)
    stats = benchmark_inference(model, tokens, passes=9, reference=model)
    assert 0.9 <= stats.speedup <= 1.1
    assert stats.p95 >= stats.median > 0
    assert stats.num_examples == 512 and len(stats.times) == 9


def test_checkpoint_paths_are_accepted(tmp_path):
    model = random_model(SMALL, 1)
    mask = random_binary_mask(SMALL, np.random.default_rng(1), 0.6)
    save_checkpoint(tmp_path / "m", model, masks=mask)
    save_checkpoint(tmp_path / "d", model)
    assert load_compact(tmp_path / "m").num_params() == mask_param_count(mask, SMALL)
    stats = benchmark_suite({"m": tmp_path / "m", "d": tmp_path / "d"}, random_tokens(SMALL, np.random.default_rng(2)),
                            reference="d")
    assert stats["d"].speedup == 1.0


def test_benchmark_errors():
    model = dense(random_model(SMALL, 2))
    tokens = random_tokens(SMALL, np.random.default_rng(3))
    with pytest.raises(ValueError):
        benchmark_suite({"a": model}, tokens, passes=3)
    with pytest.raises(ValueError):
        benchmark_suite({"a": model}, tokens, reference="b")
    with pytest.raises(BenchmarkError, match="batch size"):
        benchmark_suite({"a": model}, np.full((2, SMALL.max_seq_len + 3), 5))


@pytest.mark.parametrize("config", CONFIGS, ids=["small", "wide"])
def test_all_ones_report(config):
    rows = structure_report(GateSet.ones(config), config)
    assert len(rows) == config.num_layers
    for row in rows:
        assert row["head_fraction"] == row["fc_fraction"] == 1.0
        assert row["hidden_columns"] == config.hidden_dim


@pytest.mark.parametrize("config", CONFIGS, ids=["small", "wide"])
def test_dropped_layer_reports_zero(config):
    mask = GateSet.ones(config)
    mask.z_mha[1] = mask.z_ffn[1] = 0.0
    row = structure_report(mask, config)[1]
    assert row["head_fraction"] == row["fc_fraction"] == 0.0
    assert row["retained_params"] == 0


@pytest.mark.parametrize("config", CONFIGS, ids=["small", "wide"])
def test_retained_params_add_up_to_compacted_model(config):
    rng = np.random.default_rng(4)
    model = random_model(config, 4)
    for _ in range(20):
        mask = random_binary_mask(config, rng, float(rng.uniform(0.2, 0.9)))
        rows = structure_report(mask, config)
        assert sum(r["retained_params"] for r in rows) == compact(model, mask).num_params()
        assert all(0.0 <= r[k] <= 1.0 for r in rows for k in ("head_fraction", "fc_fraction"))


def test_report_rejects_soft_masks():
    mask = GateSet.ones(SMALL)
    mask.z_head[0, 0] = 0.5
    with pytest.raises(ValueError):
        structure_report(mask, SMALL)


def test_csv_and_heatmap():
    rows = structure_report(random_mask(0.5, SMALL, np.random.default_rng(5)), SMALL)
    text = to_csv(rows).splitlines()
    assert text[0].split(",") == list(COLUMNS)
    assert len(text) == SMALL.num_layers + 1
    payload = heatmap_payload(rows, "demo")
    assert payload["x"] == list(range(SMALL.num_layers))
    assert np.array(payload["z"]).shape == (2, SMALL.num_layers)


def test_layer_entropy():
    config = CONFIGS[1]
    uniform = structure_report(GateSet.ones(config), config)
    assert layer_entropy(uniform) == pytest.approx(max_entropy(config.num_layers))
    mask = GateSet.ones(config)
    mask.z_mha[1:] = mask.z_ffn[1:] = 0.0
    assert layer_entropy(structure_report(mask, config)) == 0.0
    mask = GateSet.ones(config)
    mask.z_fc[0] = 0.0
    assert 0.0 < layer_entropy(structure_report(mask, config)) < max_entropy(config.num_layers)
