"""``mtladapt`` command line: every experiment is driven by one JSON config.

Usage::

    mtladapt train|eval|sweep|ablate|probe|bench|params --config cfg.json [--out DIR] [--seed N]
    mtladapt <command> --config cfg.json --check-config

Exit codes: 0 success, 2 configuration error (missing file, bad JSON, unknown
or invalid fields), 3 runtime failure. Config layout is in docs/config_schema.md.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapters import AdapterConfig, count_trainable
from .errors import ConfigError, InvalidHyperparameterError
from .experiments import (
    AblateSettings,
    DataConfig,
    ProbeSettings,
    SweepGrid,
    run_ablation,
    run_probe,
    run_sweep,
    run_training,
)
from .latency import KINDS, bench_forward, reference_model_config, write_latency_csv
from .model import ModelConfig, MultiTaskModel
from .trainer import TrainConfig, evaluate, write_metrics_csv

COMMANDS = ("train", "eval", "sweep", "ablate", "probe", "bench", "params")
SECTIONS = ("train", "data", "sweep", "ablate", "probe", "bench", "eval", "params", "out")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _strict(cls, data, what):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} section must be a JSON object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")
    return cls(**data)


@dataclass
class EvalSettings:
    checkpoint: str | None = None  # default: <out>/checkpoint
    splits: list = field(default_factory=lambda: ["train", "test"])

    def __post_init__(self):
        bad = set(self.splits) - {"train", "test"}
        if bad or not self.splits:
            raise ConfigError(f"eval.splits must be a non-empty subset of ['train', 'test'], got {self.splits}")


@dataclass
class BenchSettings:
    kinds: list = field(default_factory=lambda: list(KINDS))
    batch_sizes: list = field(default_factory=lambda: [1, 8, 32])
    reps: int = 100
    warmup: int = 10
    seed: int = 0
    model: dict | None = None
    adapter: dict | None = None

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ConfigError(f"bench.kinds must be a non-empty subset of {list(KINDS)}, got {self.kinds}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError("bench.batch_sizes must be a non-empty list of positive ints")
        if self.reps < 30 or self.warmup < 0:
            raise ConfigError("bench needs reps >= 30 and warmup >= 0")
        self.model_config = (reference_model_config() if self.model is None
                             else ModelConfig.from_dict(self.model))
        self.adapter_config = None
        if self.adapter is not None:
            a = dict(self.adapter)
            a.setdefault("num_tasks", self.model_config.num_tasks)
            self.adapter_config = AdapterConfig.from_dict(a)


@dataclass
class ParamsSettings:
    """Base dimensions to count against; defaults are a 7B decoder with Q/K/V/O adapted."""

    d: int = 4096
    k: int = 4096
    matrices_per_block: int = 4
    blocks: int = 32
    base_param_count: float = 6.74e9
    heads_params: int = 0
    adapters: list | None = None

    def __post_init__(self):
        self.dims = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "adapters"}
        for key, v in self.dims.items():
            if key != "heads_params" and not v > 0:
                raise ConfigError(f"params.{key} must be positive")


@dataclass
class Experiment:
    train: TrainConfig
    data: DataConfig
    sweep: SweepGrid
    ablate: AblateSettings
    probe: ProbeSettings
    bench: BenchSettings
    eval: EvalSettings
    params: ParamsSettings
    out: Path


def load_config(path, out=None, seed=None):
    """Read and validate every section of a config file before any work starts."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return parse_config(raw, out=out, seed=seed)


def parse_config(raw, out=None, seed=None):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        train = TrainConfig.from_dict(raw.get("train", {}))
        if seed is not None:
            train = replace(train, seed=int(seed))
        data = DataConfig.from_dict(raw.get("data", {}))
        sweep = SweepGrid.from_dict(raw.get("sweep", {}))
        ablate = AblateSettings.from_dict(raw.get("ablate", {}))
        if seed is not None:
            sweep = replace(sweep, seeds=[int(seed)])
            ablate = replace(ablate, seeds=[int(seed)])
        probe = ProbeSettings.from_dict(raw.get("probe", {}))
        bench = _strict(BenchSettings, raw.get("bench", {}), "bench")
        if seed is not None:
            bench = replace(bench, seed=int(seed))
        ev = _strict(EvalSettings, raw.get("eval", {}), "eval")
        params = _strict(ParamsSettings, raw.get("params", {}), "params")
        if params.adapters is not None:
            if not isinstance(params.adapters, list) or not params.adapters:
                raise ConfigError("params.adapters must be a non-empty list of adapter objects")
            params.adapter_configs = [AdapterConfig.from_dict(a) for a in params.adapters]
        elif train.adapter is not None:
            params.adapter_configs = [train.effective_adapter()]
        else:
            params.adapter_configs = []
    except (TypeError, ValueError, InvalidHyperparameterError) as exc:
        # wrong value types surface as TypeError/ValueError from the dataclasses
        raise ConfigError(str(exc)) from None
    out_dir = out if out is not None else raw.get("out", "mtladapt_out")
    if not isinstance(out_dir, (str, Path)):
        raise ConfigError("out must be a path string")
    return Experiment(train, data, sweep, ablate, probe, bench, ev, params, Path(out_dir))


def _check_for(command, exp: Experiment):
    """Command-specific checks that need more than one section."""
    if command in ("train", "sweep", "ablate", "probe", "eval"):
        exp.data.check(exp.train.model)
    if command in ("sweep", "ablate", "probe") and exp.train.adapter is None:
        raise ConfigError(f"{command} needs train.adapter")
    if command in ("sweep", "ablate") and exp.train.adapter.kind.value != "mtl_lora":
        raise ConfigError(f"{command} varies MTL-LoRA settings; set train.adapter.kind to 'mtl_lora'")
    if command == "params" and not exp.params.adapter_configs:
        raise ConfigError("params needs train.adapter or params.adapters")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return repr(float(v))


# ---- commands -----------------------------------------------------------------


def cmd_train(exp: Experiment):
    result, _ = run_training(exp.train, exp.data)
    write_metrics_csv(result.records, exp.out / "metrics.csv")
    checkpoint.save_model(result.model, exp.out / "checkpoint")
    (exp.out / "config.json").write_text(json.dumps(
        {"train": exp.train.to_dict(), "data": vars(exp.data)}, indent=2, sort_keys=True, default=str) + "\n")
    return [exp.out / "metrics.csv", exp.out / "checkpoint"]


def load_checkpoint(directory):
    """Rebuild a model from a ``train`` checkpoint directory."""
    directory = Path(directory)
    if not (directory / "adapters.json").exists() or not (directory / "base.json").exists():
        raise ConfigError(f"{directory} is not a checkpoint directory (adapters/base manifests missing)")
    cfg, _ = checkpoint.load(directory / "adapters")
    model_cfg = ModelConfig.from_dict(cfg["model"])
    adapter = None if cfg["adapter"] is None else AdapterConfig.from_dict(cfg["adapter"])
    model = MultiTaskModel(model_cfg, adapter, seed=0)
    checkpoint.load_into(model, directory / "base")
    checkpoint.load_into(model, directory / "adapters")
    return model


def cmd_eval(exp: Experiment):
    model = load_checkpoint(exp.eval.checkpoint or exp.out / "checkpoint")
    family = exp.data.build(model.config, exp.train.seed)
    rows = []
    for split in exp.eval.splits:
        ds = family.train if split == "train" else family.test
        if len(ds) == 0:
            raise ConfigError(f"split {split!r} is empty (data.n_test is 0)")
        for t, (loss, acc, n) in evaluate(model, ds).items():
            rows.append([t, split, _num(loss), _num(acc), n])
    _write_rows(exp.out / "eval.csv", ["task", "split", "loss", "accuracy", "count"], rows)
    return [exp.out / "eval.csv"]


def cmd_sweep(exp: Experiment):
    rows = run_sweep(exp.train, exp.data, exp.sweep)
    T = exp.train.model.num_tasks
    header = ["n_up", "tau", "rank"] + [f"task_{t}" for t in range(T)] + ["mean"]
    _write_rows(exp.out / "sweep.csv", header, [
        [r["n_up"], _num(r["tau"]), r["rank"]] + [_num(a) for a in r["per_task"]] + [_num(r["mean"])]
        for r in rows
    ])
    return [exp.out / "sweep.csv"]


def cmd_ablate(exp: Experiment):
    rows = run_ablation(exp.train, exp.data, exp.ablate)
    seeds = exp.ablate.seeds
    header = ["variant", "n_up", "tau", "lambda_trainable", "trainable_params", "mean_accuracy"]
    header += [f"seed_{s}" for s in seeds]
    _write_rows(exp.out / "ablation.csv", header, [
        [r["variant"], r["n_up"], _num(r["tau"]), int(r["lambda_trainable"]), r["trainable_params"],
         _num(r["mean_accuracy"])] + [_num(a) for a in r["per_seed"]]
        for r in rows
    ])
    return [exp.out / "ablation.csv"]


def cmd_probe(exp: Experiment):
    results = run_probe(exp.train, exp.data, exp.probe)
    summary = []
    written = []
    for kind, (table, report) in results.items():
        table.to_csv(exp.out / f"features_{kind}.csv")
        report.to_json(exp.out / f"probe_{kind}.json")
        written += [exp.out / f"features_{kind}.csv", exp.out / f"probe_{kind}.json"]
        summary.append([kind, exp.probe.matrix, exp.probe.block, _num(report.macro_f1),
                        _num(np.std(report.per_seed_macro_f1)), len(report.per_seed_macro_f1)])
    _write_rows(exp.out / "probe_summary.csv",
                ["kind", "matrix", "block", "macro_f1", "macro_f1_std", "n_splits"], summary)
    return written + [exp.out / "probe_summary.csv"]


def cmd_bench(exp: Experiment):
    b = exp.bench
    records = bench_forward(b.kinds, b.batch_sizes, b.model_config, b.reps, b.warmup, b.seed, b.adapter_config)
    write_latency_csv(records, exp.out / "latency.csv")
    for r in records:
        print(f"{r.kind:>10} batch {r.batch:>4}: median {r.median_us:10.1f} us "
              f"(p10 {r.p10_us:.1f}, p90 {r.p90_us:.1f})")
    return [exp.out / "latency.csv"]


def cmd_params(exp: Experiment):
    p = exp.params
    rows = []
    for a in p.adapter_configs:
        res = count_trainable(a, p.dims)
        rows.append([a.kind.value, a.rank, res["per_matrix"], res["count"], f"{res['percent']:.4f}"])
        print(f"{a.kind.value:>10} r={a.rank:<3} trainable {res['count']:>12,d}  ({res['percent']:.4f}% of base)")
    _write_rows(exp.out / "params.csv", ["kind", "rank", "per_matrix", "count", "percent"], rows)
    return [exp.out / "params.csv"]


HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate,
    "probe": cmd_probe, "bench": cmd_bench, "params": cmd_params,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mtladapt", description="Multi-task low-rank adapter experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="override the training seed (and seed lists)")
    p.add_argument("--check-config", action="store_true", help="validate the config and exit")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        exp = load_config(args.config, out=args.out, seed=args.seed)
        _check_for(args.command, exp)
    except ConfigError as exc:
        print(f"mtladapt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.check_config:
        print(f"{args.config}: ok")
        return EXIT_OK
    try:
        exp.out.mkdir(parents=True, exist_ok=True)
        written = HANDLERS[args.command](exp)
    except ConfigError as exc:
        print(f"mtladapt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any failure as a runtime exit code
        print(f"mtladapt: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
