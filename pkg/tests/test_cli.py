import json

import pytest

from transferprune.cli import ConfigError, apply_overrides, main

TINY = ["--set", "pretrained=\"random:0\"", "--set", "model.num_layers=1", "--set", "model.hidden_dim=8",
        "--set", "model.num_heads=2", "--set", "model.ffn_dim=8", "--set", "spec.prune_steps=10",
        "--set", "spec.finetune_epochs=1", "--set", "spec.batch_size=8", "--set", "spec.target=0.5",
        "--set", "pair.n_T=24", "--set", "pair.n_A=48", "--set", "pair.n_dev=8", "--set", "pair.n_test=16"]


def test_overrides():
    cfg = apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=[1, 2]", "d=text"])
    assert cfg == {"a": {"b": 2, "c": [1, 2]}, "d": "text"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, ["a.b=2"])


def test_synth(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "pair.n_T=10", "--set", "pair.n_A=10"]) == 0
    assert (tmp_path / "T.jsonl").exists() and (tmp_path / "A.jsonl").exists()
    assert json.loads((tmp_path / "pair.json").read_text())["pair"]["n_T"] == 10


def test_prune_finetune_report_bench(tmp_path, capsys):
    pruned, tuned = tmp_path / "pruned", tmp_path / "tuned"
    assert main(["prune", "--out", str(pruned), "--set", "schedule=\"prune_AT-ft_T\"", *TINY]) == 0
    assert main(["finetune", "--checkpoint", str(pruned), "--out", str(tuned)]) == 0
    provenance = json.loads((tuned / "provenance.json").read_text())
    assert "test_T" in provenance["metrics"]
    assert main(["report", "--checkpoint", str(tuned), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "tuned.csv").exists()
    capsys.readouterr()
    assert main(["bench", str(tuned), "--reference", str(pruned), "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "b.json").read_text())[str(pruned)]["speedup"] == 1.0


def test_matrix_check_and_records(tmp_path, capsys):
    config = tmp_path / "grid.json"
    config.write_text(json.dumps({"schedules": ["no_transfer"], "pretrained": "random:0",
                                  "model": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 8},
                                  "base": {"prune_steps": 5, "finetune_epochs": 1, "target": 0.5},
                                  "pair": {"n_T": 24, "n_A": 48, "n_dev": 8, "n_test": 16}}))
    records = tmp_path / "r.jsonl"
    assert main(["matrix", "--config", str(config), "--records", str(records), "--seeds", "0", "1"]) == 0
    assert len(records.read_text().splitlines()) == 2
    # rerun is a no-op thanks to resumption
    assert main(["matrix", "--config", str(config), "--records", str(records), "--seeds", "0", "1"]) == 0
    assert len(records.read_text().splitlines()) == 2
    assert main(["report", "--records", str(records), "--out", str(tmp_path / "rep")]) == 0


def test_config_errors(tmp_path, capsys):
    assert main(["prune", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["prune", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 1
    assert main(["prune", "--out", str(tmp_path / "x"), "--set", "spec.target=1.5"]) == 1
    assert main(["matrix", "--records", str(tmp_path / "r.jsonl")]) == 1
    assert main(["finetune", "--checkpoint", str(tmp_path / "nothing"), "--out", str(tmp_path / "y")]) == 1
    assert "config error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_failure_exit_code(tmp_path, capsys):
    args = ["prune", "--out", str(tmp_path / "x"), "--set", "spec.model_lr_prune=1e300", *TINY]
    assert main(args) == 2
    assert "run failed" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path, capsys):
    # two runs at the same target cannot show the data-fraction trend
    args = ["sweep", "--fractions", "0.5", "1.0", "--sparsities", "0.5", "0.5", "--seeds", "0", "--check",
            "--set", "pretrained=\"random:0\"", "--set", "base.prune_steps=5", "--set", "base.finetune_epochs=1",
            "--set", "model.num_layers=1", "--set", "model.hidden_dim=8", "--set", "model.num_heads=2",
            "--set", "model.ffn_dim=8", "--set", "pair.n_T=24", "--set", "pair.n_A=48", "--set", "pair.n_dev=8",
            "--set", "pair.n_test=16"]
    assert main(args) == 3
    assert "FAIL" in capsys.readouterr().out
