"""Single-threaded forward-latency benchmark across adapter kinds.

Task-agnostic adapters (LoRA, MultiLoRA) are timed merged into the frozen
weights. MTL-LoRA runs its gathered per-task path, MoELoRA its per-expert loop.
Before anything is timed each variant is checked against an independent
reference computation of the same outputs.
"""

from __future__ import annotations

import csv
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .adapters import AdapterConfig, AdapterKind, lora_merge
from .errors import ConfigError, CorrectnessGateError
from .model import ModelConfig, MultiTaskModel
from .tensor import Tensor, no_grad
from .trainer import randomize_parameters

LATENCY_HEADER = ["kind", "batch", "median_us", "p10_us", "p90_us", "reps", "d", "blocks"]
KINDS = ("base", "lora", "multi_lora", "mtl_lora", "moe_lora")
GATE_TOL = 1e-10


def reference_model_config(num_tasks=4):
    """The d=256, 4-block model used for the latency comparison (FFN width 4d)."""
    return ModelConfig(d=256, f=1024, blocks=4, seq_len=1, num_tasks=num_tasks, classes=2)


@dataclass
class LatencyRecord:
    kind: str
    batch: int
    median_us: float
    p10_us: float
    p90_us: float
    reps: int
    d: int
    blocks: int

    def row(self):
        return [self.kind, self.batch, f"{self.median_us:.3f}", f"{self.p10_us:.3f}",
                f"{self.p90_us:.3f}", self.reps, self.d, self.blocks]


def default_adapter(kind, num_tasks):
    """Per-kind budget settings: rank 8 (alpha 16), except MoELoRA at rank 16 (alpha 32) over 8 experts."""
    rank = 16 if kind == "moe_lora" else 8
    return AdapterConfig(kind=kind, rank=rank, alpha=2.0 * rank, n_up=3, tau=0.8,
                         num_tasks=num_tasks, num_experts=8, num_lora_modules=3)


def build_variant(kind, model_config: ModelConfig, seed=0, adapter: AdapterConfig | None = None):
    """Model for one benchmark variant, ready for serving.

    Adapters are moved off their zero init. Task-aware kinds get their per-task
    routing precomputed, the counterpart of merging for task-agnostic kinds.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown benchmark kind {kind!r}; expected one of {KINDS}")
    if kind == "base":
        return MultiTaskModel(model_config, None, seed=seed)
    adapter = adapter or default_adapter(kind, model_config.num_tasks)
    model = MultiTaskModel(model_config, AdapterConfig.from_dict({**adapter.to_dict(), "kind": kind}), seed=seed)
    randomize_parameters(model, seed=seed + 1, scale=0.05)
    model.cache_inference()
    return model


def merged_copy(model: MultiTaskModel):
    """Adapter-free model whose frozen weights carry the merged low-rank updates."""
    merged = MultiTaskModel(model.config, None, seed=0)
    for dst, src in zip(merged.blocks, model.blocks):
        for m, lin in src.linears.items():
            W = lin.W.data if lin.adapter is None else lora_merge(lin.W.data, lin.adapter)
            dst.linears[m].W.data[...] = W
    merged.head_W.data[...] = model.head_W.data
    merged.head_b.data[...] = model.head_b.data
    return merged


@contextmanager
def _dense_moe(model):
    """Temporarily route every MoE layer through its loop-free reference contraction."""
    layers = [layer for _, _, layer in model.adapter_layers()]
    for layer in layers:
        layer.delta = lambda x, t, _l=layer: Tensor(_l.delta_dense(x, t))
    try:
        yield
    finally:
        for layer in layers:
            del layer.delta


def _forward(model, x, tasks):
    with no_grad():
        return model.forward(x, tasks).data


def correctness_gate(kind, model, x, tasks, tol=GATE_TOL):
    """Max abs difference between the timed path and its reference; raises past ``tol``.

    References never read the inference cache, so a stale or wrong cache fails here.
    """
    if kind == "base":
        return 0.0
    if kind in ("lora", "multi_lora"):
        timed = _forward(merged_copy(model), x, tasks)
        ref = _forward(model, x, tasks)
    else:
        model.cache_inference()
        timed = _forward(model, x, tasks)
        model.clear_inference_cache()
        try:
            if kind == "mtl_lora":
                ref = np.concatenate([_forward(model, x[i:i + 1], tasks[i:i + 1]) for i in range(len(tasks))])
            else:
                with _dense_moe(model):
                    ref = _forward(model, x, tasks)
        finally:
            model.cache_inference()
    err = float(np.max(np.abs(timed - ref)))
    if not err <= tol:
        raise CorrectnessGateError(f"{kind}: timed path differs from reference by {err:.3e} > {tol:g}")
    return err


def time_forward(models, x, tasks, reps, warmup):
    """Per-call wall times in microseconds for each model, ``[len(models) x reps]``.

    Calls are interleaved round-robin across models so slow drift in machine
    speed affects every variant alike. Warmup calls are discarded.
    """
    out = np.empty((len(models), reps))
    with no_grad():
        for _ in range(warmup):
            for model in models:
                model.forward(x, tasks)
        for i in range(reps):
            for j, model in enumerate(models):
                t0 = time.perf_counter_ns()
                model.forward(x, tasks)
                out[j, i] = (time.perf_counter_ns() - t0) / 1e3
    return out


def bench_forward(kinds, batch_sizes, model_config: ModelConfig | None = None, reps=100, warmup=10,
                  seed=0, adapter: AdapterConfig | None = None):
    """Median and 10th/90th percentile forward latency for every (kind, batch)."""
    if reps < 30:
        raise ConfigError(f"reps must be >= 30, got {reps}")
    if warmup < 0 or not batch_sizes or min(batch_sizes) < 1:
        raise ConfigError("warmup must be >= 0 and batch sizes positive")
    cfg = model_config or reference_model_config()
    rng = np.random.default_rng([seed, 7])
    inputs = {
        b: (rng.standard_normal((b, cfg.seq_len, cfg.d)), rng.integers(0, cfg.num_tasks, b))
        for b in batch_sizes
    }
    timed = []
    for kind in kinds:
        model = build_variant(kind, cfg, seed, adapter)
        for b in batch_sizes:
            correctness_gate(kind, model, *inputs[b])
        timed.append(merged_copy(model) if kind in ("lora", "multi_lora") else model)
    records = []
    with threadpool_limits(limits=1):
        for b in batch_sizes:
            us = time_forward(timed, *inputs[b], reps, warmup)
            for kind, row in zip(kinds, us):
                p10, med, p90 = np.percentile(row, [10, 50, 90])
                records.append(LatencyRecord(kind, b, float(med), float(p10), float(p90), reps, cfg.d, cfg.blocks))
    return records


def write_latency_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENCY_HEADER)
        for r in records:
            w.writerow(r.row())


def median_of(records, kind, batch):
    for r in records:
        if r.kind == kind and r.batch == batch:
            return r.median_us
    raise KeyError((kind, batch))


__all__ = [
    "KINDS", "LATENCY_HEADER", "LatencyRecord", "bench_forward", "build_variant", "correctness_gate",
    "default_adapter", "median_of", "merged_copy", "reference_model_config", "time_forward",
    "write_latency_csv", "AdapterKind",
]
