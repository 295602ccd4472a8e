"""Command-line entry point: ``transferprune <verb> ...``.

Exit codes: 0 success, 1 configuration error, 2 run failure, 3 failed ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from .bench import BenchmarkError, benchmark_suite, load_compact
from .data import SchemaError, SyntheticPairParams, export_task, synth_task_pair
from .model import load_checkpoint, save_checkpoint
from .pipeline import RunFailed, finetune_stage, prune_stage
from .records import RecordSink, mask_bits, mask_digest
from .report import heatmap_payload, layer_entropy, structure_report, to_csv
from .sparsity import SHIPPED_TARGETS, mask_sparsity, unit_granularity

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_CHECK = 0, 1, 2, 3
SHIPPED_GRIDS = {
    "when-to-transfer": ex.when_to_transfer_grid,
    "ablation": ex.ablation_grid,
    "sparsity-sweep": ex.sparsity_sweep_grid,
}


class ConfigError(ValueError):
    pass


class CheckFailed(AssertionError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    config = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = config
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[leaf] = _parse_value(value)
    return config


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = {}
    if path:
        try:
            config = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(config, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    return apply_overrides(config, overrides)


def run_config(config: dict) -> ex.RunConfig:
    """A RunConfig from a config dict; ``schedule`` names one of the shipped schedules."""
    config = dict(config)
    spec = {**ex.SHIPPED_RECIPE, **config.pop("spec", {})}
    if "schedule" in config:
        spec["schedule"] = config.pop("schedule")
    try:
        return ex.RunConfig.from_dict({"spec": spec, **config})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _emit(payload) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True, default=str))


# verbs -------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    params = SyntheticPairParams(**cfg.get("pair", {}))
    t, a = synth_task_pair(params, cfg.get("pair_seed", ex.PAIR_SEED))
    out = Path(args.out)
    paths = {name: str(export_task(task, out / f"{name}.jsonl")) for name, task in (("T", t), ("A", a))}
    (out / "pair.json").write_text(json.dumps({"pair": asdict(params), "pair_seed": cfg.get("pair_seed", 0)},
                                              indent=1))
    _emit(paths)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    path = ex.write_fixture(args.out, steps=args.steps)
    _emit({"checkpoint": str(path)})
    return EXIT_OK


def cmd_prune(args) -> int:
    run = run_config(load_config(args.config, args.set))
    wb = ex.Workbench()
    result = prune_stage(wb.pretrained(run), wb.tasks(run, args.seed), run.spec, args.seed)
    gate_la = {k: np.asarray(v) for k, v in _final_log_alpha(result).items()}
    save_checkpoint(args.out, result.model, list(result.heads.values()), gate_la, result.mask,
                    extra={"stage": "prune", "config": run.to_dict(), "seed": args.seed,
                           "masks": {k: m.to_json() for k, m in result.masks.items()},
                           "expected_sparsity": result.expected_sparsity, "batches": result.batches})
    _emit({"checkpoint": args.out, "sparsity": mask_sparsity(result.mask, result.model.config),
           "expected_sparsity": result.expected_sparsity})
    return EXIT_OK


def _final_log_alpha(result) -> dict:
    gates = result.gates
    if gates.strategy.kind == "delta":
        return {"base": gates.base.log_alpha.data, "delta_T": gates.delta_T.data, "delta_A": gates.delta_A.data}
    if gates.strategy.kind == "multi_mask":
        return {t: g.log_alpha.data for t, g in gates.per_task.items()}
    return {"base": gates.base.log_alpha.data}


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.masks is None or "config" not in ckpt.extra:
        raise ConfigError(f"{args.checkpoint} is not a prune-stage checkpoint")
    config = apply_overrides(ckpt.extra["config"], args.set)
    run = ex.RunConfig.from_dict(config)
    seed = ckpt.extra.get("seed", 0) if args.seed is None else args.seed
    wb = ex.Workbench()
    result = finetune_stage(ckpt.model, ckpt.heads, ckpt.masks, wb.tasks(run, seed), run.spec, seed)
    save_checkpoint(args.out, result.model, list(result.heads.values()), masks=result.masks,
                    extra={"stage": "finetune", "config": run.to_dict(), "seed": seed, "metrics": result.metrics})
    summary = {"checkpoint": args.out, "metrics": result.metrics, "sparsity": result.sparsity,
               "mask_sha256": mask_digest(result.masks)}
    (Path(args.out) / "provenance.json").write_text(json.dumps(
        {**summary, "config": run.to_dict(), "seed": seed, "mask_bits": mask_bits(result.masks)}, indent=1))
    _emit(summary)
    return EXIT_OK


def _grid(args) -> dict:
    if args.shipped:
        grid = SHIPPED_GRIDS[args.shipped]()
    elif args.config:
        grid = load_config(args.config, [])
    else:
        raise ConfigError("matrix needs --config or --shipped")
    grid = apply_overrides(grid, args.set)
    if args.seeds:
        grid["seeds"] = args.seeds
    return grid


def cmd_matrix(args) -> int:
    grid = _grid(args)
    sink = RecordSink(args.records)
    ex.run_matrix(grid, sink, ex.Workbench(args.artifacts))
    runs, seeds = ex.expand_grid(grid)
    wanted = {(r.hash(), s) for r in runs for s in seeds}
    records = [r for r in sink.load() if r.key in wanted]
    failed = [r for r in records if r.status != "ok"]
    by = ("label", "target") if len(grid.get("sparsities", [])) > 1 else ("label",)
    means = ex.summarize(records, by=by)
    _emit({"records": len(records), "failed": len(failed), "mean_test_T": {str(k): v for k, v in means.items()}})
    if args.check:
        _check_matrix(args.shipped, means, records)
    return EXIT_RUN if failed else EXIT_OK


def _check_matrix(name: str | None, means: dict, records) -> None:
    if name == "when-to-transfer":
        ok, msg = ex.check_transfer_trend(means)
    elif name == "ablation":
        ok, msg = ex.check_ablation_trend(means)
    else:
        bad = []
        for r in records:
            run = ex.RunConfig.from_dict(r.config)
            if r.status == "ok" and abs(r.sparsity - run.spec.target) > unit_granularity(run.model):
                bad.append((run.label, run.spec.target, r.sparsity))
        ok, msg = not bad, f"sparsity off target by more than one unit: {bad}" if bad else "all on target"
    print(("PASS " if ok else "FAIL ") + msg)
    if not ok:
        raise CheckFailed(msg)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    wb = ex.Workbench(args.artifacts)
    sink = RecordSink(args.records) if args.records else None
    records, curves = ex.data_fraction_sweep(args.fractions, args.sparsities, args.seeds, sink, wb, **cfg)
    _emit({f"{f}@{t}": v for (f, t), v in curves.items()})
    if args.check:
        ok, msg = ex.check_fraction_trend(curves, min(args.fractions), max(args.fractions),
                                          min(args.sparsities), max(args.sparsities))
        print(("PASS " if ok else "FAIL ") + msg)
        if not ok:
            raise CheckFailed(msg)
    return EXIT_RUN if any(r.status != "ok" for r in records) else EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    models = {str(p): p for p in args.checkpoints}
    if args.reference:
        models.setdefault(str(args.reference), args.reference)
    for path in models.values():
        if not (Path(path) / "manifest.json").exists():
            raise ConfigError(f"no checkpoint at {path}")
    first = load_compact(args.checkpoints[0])
    pair = SyntheticPairParams(**{**asdict(ex.SHIPPED_PAIR), "seq_len": first.config.max_seq_len,
                                  "vocab_size": first.config.vocab_size, **cfg.get("pair", {})})
    t, _ = synth_task_pair(pair, cfg.get("pair_seed", ex.PAIR_SEED))
    stats = benchmark_suite(models, t.test.tokens, args.batch_size, args.passes, 1,
                            str(args.reference) if args.reference else None)
    payload = {k: v.to_dict() for k, v in stats.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))
    _emit({k: {f: v[f] for f in ("median", "p95", "speedup", "num_params")} for k, v in payload.items()})
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sources = {}
    for path in args.checkpoints:
        ckpt = load_checkpoint(path)
        if ckpt.masks is None:
            raise ConfigError(f"{path} carries no mask")
        sources[Path(path).name] = structure_report(ckpt.masks, ckpt.model.config)
    if args.records:
        for r in RecordSink(args.records).load():
            if r.status == "ok" and r.structure:
                sources[f"{r.config_hash}-{r.seed}"] = r.structure
    if not sources:
        raise ConfigError("report needs --checkpoint or --records with at least one finished run")
    summary = {}
    for name, rows in sources.items():
        (out / f"{name}.csv").write_text(to_csv(rows))
        (out / f"{name}.json").write_text(json.dumps(heatmap_payload(rows, name), indent=1))
        summary[name] = {"layer_entropy": layer_entropy(rows)}
    _emit(summary)
    return EXIT_OK


# parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, JSON values)")

    p = sub.add_parser("synth", help="write the synthetic task pair as newline-delimited JSON")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="regenerate the pretrained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=ex.PRETRAIN_RECIPE["steps"])
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="run the prune stage and save gates and mask")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="finetune a prune-stage checkpoint under its frozen mask")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("matrix", help="run an experiment grid (resumable)")
    common(p)
    p.add_argument("--shipped", choices=sorted(SHIPPED_GRIDS))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--records", required=True, help="JSON-lines record file (appended to)")
    p.add_argument("--artifacts", help="directory for per-run checkpoints")
    p.add_argument("--check", action="store_true", help="assert the expected trend")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="accuracy vs sparsity at several train fractions")
    common(p)
    p.add_argument("--fractions", type=float, nargs="+", default=list(ex.SWEEP_FRACTIONS))
    p.add_argument("--sparsities", type=float, nargs="+", default=list(SHIPPED_TARGETS))
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    p.add_argument("--records")
    p.add_argument("--artifacts")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="inference latency of compacted checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="+", type=Path)
    p.add_argument("--reference", type=Path)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--passes", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="per-layer structure tables and heatmap payloads")
    p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[])
    p.add_argument("--records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckFailed:
        return EXIT_CHECK
    except RunFailed as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except BenchmarkError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except (ConfigError, SchemaError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
