"""Experiment runners shared by the command line and the acceptance suite.

Reference settings for the synthetic benchmarks live here so the CLI configs,
tests and demos all train exactly the same models.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .adapters import AdapterConfig, AdapterKind
from .errors import ConfigError
from .model import ModelConfig
from .synth import extract_features, gen_conflict_tasks, linear_probe
from .trainer import Ablation, TrainConfig, build_model, train


def _reject_unknown(cls, data, what):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} section must be a JSON object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")


@dataclass
class DataConfig:
    """Conflict-family sizes; task count, width and classes come from the model."""

    conflict: float = 1.0
    n_train: int = 2000
    n_test: int = 0
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.conflict <= 1.0:
            raise ConfigError(f"data conflict must lie in [0, 1], got {self.conflict}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("data n_train must be >= 1 and n_test >= 0")

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "data")
        return cls(**data)

    def check(self, model: ModelConfig):
        if len(set(model.classes_per_task)) != 1:
            raise ConfigError("the synthetic family needs the same class count for every task")
        if model.num_tasks < 2:
            raise ConfigError("the synthetic family needs at least 2 tasks")

    def build(self, model: ModelConfig, seed):
        self.check(model)
        return gen_conflict_tasks(
            model.num_tasks, model.d * model.seq_len, model.classes_per_task[0],
            self.n_train, self.n_test, self.conflict,
            seed if self.seed is None else self.seed, seq_len=model.seq_len,
        )


# ---- reference settings -------------------------------------------------------


def conflict_config(kind="mtl_lora", seed=0, **overrides):
    """Shared-head toy model on the 4-task, dim-32 conflict family."""
    model = ModelConfig(d=32, f=64, blocks=2, seq_len=1, num_tasks=4, classes=2, head_mode="shared")
    adapter = AdapterConfig(kind=kind, rank=8, alpha=16.0, n_up=3, tau=0.8, num_tasks=4)
    cfg = TrainConfig(learning_rate=3e-3, epochs=5, batch_size=32, warmup_ratio=0.03,
                      seed=seed, model=model, adapter=adapter)
    return replace(cfg, **overrides)


def ablation_config(seed=0):
    """Ablation setting: one epoch, tau 0.1, 4 classes, routing logits drawn N(0, 1)."""
    cfg = conflict_config(seed=seed, epochs=1, batch_size=16)
    cfg.model = replace(cfg.model, classes=4)
    cfg.adapter = replace(cfg.adapter, tau=0.1, w_init_std=1.0)
    return cfg


ABLATIONS = {
    "full": lambda cfg: cfg,
    "no_lambda": lambda cfg: replace(cfg, ablation=replace(cfg.ablation, freeze_lambda_identity=True)),
    "no_tau": lambda cfg: replace(cfg, ablation=replace(cfg.ablation, tau_override=1.0)),
    "n1": lambda cfg: replace(cfg, adapter=replace(cfg.adapter, n_up=1)),
}


# ---- runners ------------------------------------------------------------------


def final_accuracies(records, split="train"):
    """Per-task accuracy at the last logged epoch for ``split``."""
    last = max(r["epoch"] for r in records)
    rows = sorted((r["task"], r["accuracy"]) for r in records if r["epoch"] == last and r["split"] == split)
    if not rows:
        raise ConfigError(f"no {split!r} records (is n_test zero?)")
    return [acc for _, acc in rows]


def run_training(cfg: TrainConfig, data: DataConfig):
    family = data.build(cfg.model, cfg.seed)
    ev = family.test if len(family.test) else None
    return train(cfg, family.train, eval_dataset=ev), family


def mean_train_accuracy(cfg: TrainConfig, data: DataConfig, split="train"):
    result, _ = run_training(cfg, data)
    return float(np.mean(final_accuracies(result.records, split)))


def adapter_param_count(cfg: TrainConfig):
    """Trainable adapter parameters of the model ``cfg`` builds (heads excluded)."""
    if cfg.adapter is None:
        return 0
    return int(sum(p.data.size for _, p in build_model(cfg).adapter_parameters()))


def _grid_point(args):
    cfg, data, split = args
    with threadpool_limits(limits=1):
        result, _ = run_training(cfg, data)
    return final_accuracies(result.records, split)


def worker_count(n_jobs):
    try:
        cap = int(os.environ.get("MTLADAPT_THREADS", "1"))
    except ValueError:
        raise ConfigError("MTLADAPT_THREADS must be an integer") from None
    return max(1, min(cap, n_jobs))


def map_ordered(fn, jobs):
    """Run ``fn`` over ``jobs``; results come back in job order whatever the worker count."""
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class SweepGrid:
    n_up: list = field(default_factory=lambda: [3])
    tau: list = field(default_factory=lambda: [0.8])
    rank: list = field(default_factory=lambda: [8])
    seeds: list | None = None
    split: str = "train"

    def __post_init__(self):
        for name in ("n_up", "tau", "rank"):
            if not isinstance(getattr(self, name), list) or not getattr(self, name):
                raise ConfigError(f"sweep {name} must be a non-empty list")
        if self.seeds is not None and not self.seeds:
            raise ConfigError("sweep seeds must be non-empty when given")
        if self.split not in ("train", "eval"):
            raise ConfigError("sweep split must be 'train' or 'eval'")

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "sweep")
        return cls(**data)

    def points(self):
        return list(itertools.product(self.n_up, self.tau, self.rank))


def run_sweep(cfg: TrainConfig, data: DataConfig, grid: SweepGrid):
    """One row per grid point in (n, tau, r) order: per-task accuracy averaged over seeds."""
    if cfg.adapter is None or cfg.adapter.kind is not AdapterKind.MTL_LORA:
        raise ConfigError("sweep varies MTL-LoRA hyperparameters; set adapter.kind to 'mtl_lora'")
    seeds = grid.seeds or [cfg.seed]
    jobs, keys = [], []
    for n, tau, r in grid.points():
        adapter = replace(cfg.adapter, n_up=int(n), tau=float(tau), rank=int(r))
        for s in seeds:
            jobs.append((replace(cfg, adapter=adapter, seed=s), data, grid.split))
            keys.append((n, tau, r))
    results = map_ordered(_grid_point, jobs)
    rows = []
    for point in grid.points():
        accs = np.mean([res for key, res in zip(keys, results) if key == point], axis=0)
        rows.append({"n_up": point[0], "tau": point[1], "rank": point[2],
                     "per_task": [float(a) for a in accs], "mean": float(np.mean(accs))})
    return rows


@dataclass
class AblateSettings:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    split: str = "train"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("ablate seeds must be non-empty")
        if self.split not in ("train", "eval"):
            raise ConfigError("ablate split must be 'train' or 'eval'")

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "ablate")
        return cls(**data)


def run_ablation(cfg: TrainConfig, data: DataConfig, settings: AblateSettings):
    """Full MTL-LoRA plus the three single-component ablations, same data and seeds."""
    if cfg.adapter is None or cfg.adapter.kind is not AdapterKind.MTL_LORA:
        raise ConfigError("ablation needs adapter.kind 'mtl_lora'")
    jobs = []
    for name, make in ABLATIONS.items():
        for s in settings.seeds:
            jobs.append((make(replace(cfg, seed=s)), data, settings.split))
    results = map_ordered(_grid_point, jobs)
    rows = []
    k = len(settings.seeds)
    for i, (name, make) in enumerate(ABLATIONS.items()):
        per_seed = [float(np.mean(a)) for a in results[i * k:(i + 1) * k]]
        variant = make(cfg)
        eff = variant.effective_adapter()
        rows.append({
            "variant": name, "n_up": eff.n_up, "tau": eff.tau,
            "lambda_trainable": not eff.freeze_lambda_identity,
            "trainable_params": adapter_param_count(variant),
            "mean_accuracy": float(np.mean(per_seed)), "per_seed": per_seed,
        })
    return rows


@dataclass
class ProbeSettings:
    kinds: list = field(default_factory=lambda: ["mtl_lora", "lora"])
    matrix: str = "o"
    block: int = -1
    include_base: bool = False
    samples_per_task: int = 1000
    n_splits: int = 5
    split_seed: int = 0
    C: float = 1.0

    def __post_init__(self):
        valid = {a.value for a in AdapterKind}
        bad = [k for k in self.kinds if k not in valid]
        if bad or not self.kinds:
            raise ConfigError(f"probe kinds must be a non-empty subset of {sorted(valid)}, got {self.kinds}")
        if self.samples_per_task < 2 or self.n_splits < 1 or not self.C > 0:
            raise ConfigError("probe needs samples_per_task >= 2, n_splits >= 1 and C > 0")

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "probe")
        return cls(**data)


def probe_sample(dataset, per_task):
    """The first ``per_task`` samples of every task, in task order."""
    idx = np.concatenate([np.flatnonzero(dataset.task_ids == t)[:per_task] for t in dataset.tasks])
    return dataset.subset(idx)


def run_probe(cfg: TrainConfig, data: DataConfig, settings: ProbeSettings):
    """Train one model per adapter kind and probe task identity from its branch features.

    Returns ``{kind: (FeatureTable, ProbeReport)}``.
    """
    out = {}
    for kind in settings.kinds:
        kcfg = replace(cfg, adapter=replace(cfg.adapter, kind=AdapterKind(kind)))
        result, family = run_training(kcfg, data)
        sample = probe_sample(family.train, settings.samples_per_task)
        table = extract_features(result.model, sample, settings.matrix, settings.block, settings.include_base)
        report = linear_probe(table, table.task_ids, settings.split_seed, settings.n_splits, C=settings.C)
        out[kind] = (table, report)
    return out


__all__ = [
    "ABLATIONS", "AblateSettings", "DataConfig", "ProbeSettings", "SweepGrid", "ablation_config",
    "adapter_param_count", "conflict_config", "final_accuracies", "map_ordered", "mean_train_accuracy",
    "probe_sample", "run_ablation", "run_probe", "run_sweep", "run_training", "worker_count",
]
