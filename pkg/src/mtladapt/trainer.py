"""Joint multi-task training with AdamW and a linear warmup/decay schedule."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .adapters import AdapterConfig, AdapterKind
from .errors import ConfigError
from .model import ModelConfig, MultiTaskModel
from .tensor import cross_entropy, finite_diff_grad, no_grad

METRICS_HEADER = ["step", "epoch", "task", "split", "loss", "accuracy", "lr"]


@dataclass
class MultiTaskDataset:
    """Inputs ``x`` ``[N x seq x d]`` (or ``[N x d]``), integer ``task_ids`` and ``labels``."""

    x: np.ndarray
    task_ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 2:
            self.x = self.x[:, None, :]
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.x) == len(self.task_ids) == len(self.labels)):
            raise ConfigError("x, task_ids and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return MultiTaskDataset(self.x[idx], self.task_ids[idx], self.labels[idx])

    @property
    def tasks(self):
        return np.unique(self.task_ids)


MultiTaskBatch = MultiTaskDataset


@dataclass
class Ablation:
    freeze_lambda_identity: bool = False
    uniform_weights: bool = False
    tau_override: float | None = None

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "ablation")
        return cls(**data)


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 3
    batch_size: int = 8
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_ratio: float = 0.03
    scheduler: str = "linear_decay"
    sampler: str = "shuffle"
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    adapter: AdapterConfig | None = field(default_factory=AdapterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.scheduler != "linear_decay":
            raise ConfigError(f"unsupported scheduler {self.scheduler!r}")
        if self.sampler not in ("shuffle", "balanced"):
            raise ConfigError(f"sampler must be 'shuffle' or 'balanced', got {self.sampler!r}")

    def effective_adapter(self):
        """The adapter config with ablation switches applied."""
        if self.adapter is None:
            return None
        a = self.ablation
        cfg = replace(
            self.adapter,
            freeze_lambda_identity=self.adapter.freeze_lambda_identity or a.freeze_lambda_identity,
            uniform_weights=self.adapter.uniform_weights or a.uniform_weights,
        )
        if a.tau_override is not None:
            cfg = replace(cfg, tau=float(a.tau_override))
        return cfg

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["ablation"] = vars(self.ablation).copy()
        out["adapter"] = None if self.adapter is None else self.adapter.to_dict()
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        _reject_unknown(cls, data, "train")
        if "ablation" in data:
            data["ablation"] = Ablation.from_dict(data["ablation"] or {})
        model = ModelConfig.from_dict(data.pop("model", {}))
        data["model"] = model
        if "adapter" in data and data["adapter"] is not None:
            adapter = dict(data["adapter"])
            adapter.setdefault("num_tasks", model.num_tasks)
            data["adapter"] = AdapterConfig.from_dict(adapter)
        elif "adapter" not in data:
            data["adapter"] = AdapterConfig(num_tasks=model.num_tasks)
        return cls(**data)


def _reject_unknown(cls, data, what):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} config must be a JSON object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} config fields: {sorted(unknown)}")


# ---- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params, state: OptimizerState, lr, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
    """One AdamW update in place; ``params`` is a list of ``(name, Tensor)``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update
    return state


def lr_schedule(step, total_steps, warmup_ratio, base_lr):
    """Linear ramp to ``base_lr`` over ``ceil(warmup_ratio * total)`` steps, then linear decay to 0."""
    if total_steps <= 0:
        return 0.0
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    if step >= total_steps:
        return 0.0
    return base_lr * (total_steps - step) / max(1, total_steps - warmup)


# ---- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: MultiTaskModel
    records: list
    state: OptimizerState


def build_model(config: TrainConfig):
    return MultiTaskModel(config.model, config.effective_adapter(), seed=config.seed)


def _batches(config: TrainConfig, dataset, rng):
    n = len(dataset)
    if config.sampler == "shuffle":
        order = rng.permutation(n)
    else:
        # equal probability per task, sampled with replacement, same epoch length
        tasks = dataset.tasks
        by_task = [np.flatnonzero(dataset.task_ids == t) for t in tasks]
        picks = rng.integers(0, len(tasks), size=n)
        order = np.array([by_task[t][rng.integers(0, len(by_task[t]))] for t in picks], dtype=np.int64)
    for start in range(0, n, config.batch_size):
        yield order[start: start + config.batch_size]


def steps_per_epoch(config: TrainConfig, n):
    return math.ceil(n / config.batch_size)


def evaluate(model: MultiTaskModel, dataset, chunk=2048):
    """Per-task mean loss and accuracy; returns ``{task: (loss, accuracy, count)}``."""
    logits = []
    with no_grad():
        for s in range(0, len(dataset), chunk):
            sl = slice(s, s + chunk)
            logits.append(model.forward(dataset.x[sl], dataset.task_ids[sl]).data)
    logits = np.concatenate(logits) if logits else np.zeros((0, model.config.max_classes))
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(z)), dataset.labels]
    correct = logits.argmax(axis=1) == dataset.labels
    out = {}
    for t in dataset.tasks:
        mask = dataset.task_ids == t
        out[int(t)] = (float(nll[mask].mean()), float(correct[mask].mean()), int(mask.sum()))
    return out


def mean_accuracy(per_task):
    return float(np.mean([acc for _, acc, _ in per_task.values()]))


def train(config: TrainConfig, dataset: MultiTaskDataset, eval_dataset=None, model=None):
    """Train adapter and head parameters jointly over all tasks.

    Emits one record per (epoch, task, split) after every epoch, plus an epoch-0
    record of the initial model. Fully determined by ``config`` and the data.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    T = config.model.num_tasks
    if dataset.task_ids.min() < 0 or dataset.task_ids.max() >= T:
        raise ConfigError(f"dataset task ids must lie in [0, {T})")
    model = build_model(config) if model is None else model
    params = model.trainable_parameters()
    state = OptimizerState()
    rng = np.random.default_rng([config.seed, 3])
    total = config.epochs * steps_per_epoch(config, len(dataset))
    records = []
    lr = 0.0

    def log(epoch, step, lr):
        for split, ds in (("train", dataset), ("eval", eval_dataset)):
            if ds is None:
                continue
            for t, (loss, acc, _) in evaluate(model, ds).items():
                records.append(
                    {"step": step, "epoch": epoch, "task": t, "split": split,
                     "loss": loss, "accuracy": acc, "lr": lr}
                )

    log(0, 0, lr)
    step = 0
    for epoch in range(1, config.epochs + 1):
        for idx in _batches(config, dataset, rng):
            for _, p in params:
                p.zero_grad()
            loss = cross_entropy(model.forward(dataset.x[idx], dataset.task_ids[idx]), dataset.labels[idx])
            loss.backward()
            lr = lr_schedule(step, total, config.warmup_ratio, config.learning_rate)
            adamw_step(params, state, lr, config.beta1, config.beta2, config.eps, config.weight_decay)
            step += 1
        log(epoch, step, lr)
    return TrainResult(model, records, state)


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r["step"], r["epoch"], r["task"], r["split"],
                        repr(float(r["loss"])), repr(float(r["accuracy"])), repr(float(r["lr"]))])


def final_train_accuracy(records):
    """Mean over tasks of train accuracy at the last logged epoch."""
    last = max(r["epoch"] for r in records)
    accs = [r["accuracy"] for r in records if r["epoch"] == last and r["split"] == "train"]
    return float(np.mean(accs))


# ---- gradient audit ---------------------------------------------------------


@dataclass
class AuditReport:
    errors: dict
    max_rel_err: float
    excluded: list

    def by_class(self):
        """Worst error per parameter class (the last dotted name component)."""
        out = {}
        for name, err in self.errors.items():
            cls = name.rsplit(".", 1)[-1]
            cls = "B" if cls[:1] == "B" and cls[1:].isdigit() else cls
            out[cls] = max(out.get(cls, 0.0), err)
        return out


def gradient_audit(model: MultiTaskModel, batch: MultiTaskDataset, eps=1e-5):
    """Compare backprop gradients with central differences for every trainable tensor.

    The error for a tensor is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``
    in the Euclidean norm (0 if both vanish). Frozen weights are listed in
    ``excluded`` after confirming they received no gradient.
    """
    params = model.trainable_parameters()

    def loss_fn(_=None):
        with no_grad():
            return cross_entropy(model.forward(batch.x, batch.task_ids), batch.labels)

    for _, p in params:
        p.zero_grad()
    frozen = model.frozen_parameters()
    for _, w in frozen:
        w.zero_grad()
    cross_entropy(model.forward(batch.x, batch.task_ids), batch.labels).backward()
    for name, w in frozen:
        if w.requires_grad or np.any(w.grad):
            raise AssertionError(f"frozen weight {name} received a gradient")
    errors = {}
    for name, p in params:
        analytic = p.grad.copy()
        numeric = finite_diff_grad(loss_fn, p, eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)
    return AuditReport(errors, max(errors.values(), default=0.0), [n for n, _ in frozen])


def randomize_parameters(model: MultiTaskModel, seed=0, scale=0.3):
    """Move every trainable parameter off its initialization (for gradient checks)."""
    rng = np.random.default_rng(seed)
    for _, p in model.trainable_parameters():
        p.data += scale * rng.standard_normal(p.shape)
    return model


__all__ = [
    "AdapterKind", "Ablation", "AuditReport", "MultiTaskBatch", "MultiTaskDataset", "OptimizerState",
    "TrainConfig", "TrainResult", "adamw_step", "build_model", "evaluate", "final_train_accuracy",
    "gradient_audit", "lr_schedule", "mean_accuracy", "randomize_parameters", "train",
    "write_metrics_csv",
]
