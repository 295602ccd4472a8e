import numpy as np
import pytest

from oracles import SMALL, compaction_diff, random_binary_mask, random_model, random_tokens
from transferprune.compact import compact, compact_forward_check, dense
from transferprune.model import GateSet, ModelConfig, TaskHead
from transferprune.sparsity import binarize_scores, mask_param_count, prunable_param_count, unit_granularity

CONFIGS = [SMALL, ModelConfig(num_layers=3, hidden_dim=12, num_heads=3, ffn_dim=5, vocab_size=20, max_seq_len=5)]


@pytest.fixture(params=CONFIGS, ids=["small", "wide"])
def config(request):
    return request.param


def test_all_ones_mask_keeps_every_parameter(config):
    model = random_model(config, 0)
    small = dense(model)
    assert small.num_params() == prunable_param_count(config)
    # every array in the layer except the shared final layernorm is prunable
    direct = sum(t.data.size for k, t in model.params.items() if k.startswith("layers."))
    assert small.num_params() == direct


def test_compacted_forward_matches_masked_dense(config):
    rng = np.random.default_rng(1)
    model = random_model(config, 1)
    head = TaskHead.create("T", "classification", config.hidden_dim, rng)
    worst = 0.0
    for _ in range(100):
        mask = random_binary_mask(config, rng, keep=float(rng.uniform(0.3, 0.9)))
        worst = max(worst, compaction_diff(model, mask, random_tokens(config, rng), head))
    assert worst < 1e-8


def test_param_count_matches_cost_model(config):
    rng = np.random.default_rng(2)
    model = random_model(config, 2)
    for _ in range(50):
        mask = random_binary_mask(config, rng, keep=float(rng.uniform(0.1, 0.9)))
        assert compact(model, mask).num_params() == mask_param_count(mask, config)


def test_empty_layer_is_passthrough(config):
    rng = np.random.default_rng(3)
    model = random_model(config, 3)
    mask = GateSet.ones(config)
    mask.z_head[0] = 0.0
    mask.z_fc[0] = 0.0
    small = compact(model, mask)
    # the sublayer gates stay open, so only the output biases remain
    assert small.attn[0].units == 0 and small.ffn[0].units == 0
    assert small.attn[0].num_params() == config.hidden_dim
    assert compaction_diff(model, mask, random_tokens(config, rng)) < 1e-8


def test_fully_closed_model(config):
    rng = np.random.default_rng(4)
    model = random_model(config, 4)
    mask = GateSet.from_flat(np.zeros(config.num_gates), config)
    small = compact(model, mask)
    assert small.num_params() == 0
    assert compaction_diff(model, mask, random_tokens(config, rng)) < 1e-8


def test_budgeted_mask_stays_within_granularity(config):
    rng = np.random.default_rng(5)
    model = random_model(config, 5)
    n = config.num_layers
    mask = binarize_scores(rng.random((n, config.num_heads)), rng.random((n, config.ffn_dim)),
                           np.ones(config.hidden_dim), 0.95, config)
    retained = compact(model, mask).num_params() / prunable_param_count(config)
    assert retained <= 0.05 + unit_granularity(config)


def test_soft_masks_are_rejected(config):
    mask = GateSet.ones(config)
    mask.z_head[0, 0] = 0.5
    with pytest.raises(ValueError):
        compact(random_model(config, 6), mask)


def test_forward_check_helper(config):
    rng = np.random.default_rng(7)
    model = random_model(config, 7)
    assert compact_forward_check(model, random_binary_mask(config, rng, 0.6), random_tokens(config, rng)) < 1e-8
