"""Toy pre-norm decoder stack with adapter injection points and task heads.

Frozen weights are stored out x in, so every projection is ``x @ W.T``. For the
FFN this means the stored ``down`` weight is ``[f x d]`` and ``up`` is ``[d x f]``,
i.e. ``ffn(x) = act(x @ W_down.T) @ W_up.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .adapters import AdapterConfig, AdapterKind, build_adapter, check_task_ids
from .errors import ConfigError, DimensionError, SelectionError
from .tensor import Tensor, gelu, layer_norm, matmul, relu, softmax, take

MATRICES = ("q", "k", "v", "o", "down", "up")
_INJECTABLE = {"q", "k", "v", "o", "down", "up", "ffn"}
_NEG = -1e30


@dataclass
class ModelConfig:
    d: int = 32
    f: int = 64
    blocks: int = 2
    seq_len: int = 1
    num_tasks: int = 1
    classes: int | list = 2
    injection: list = field(default_factory=lambda: ["q", "k", "v", "o"])
    activation: str = "gelu"
    head_mode: str = "per_task"
    causal: bool = False
    final_norm: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("d", "f", "blocks", "seq_len", "num_tasks"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"model {name} must be a positive integer, got {v!r}")
        classes = [self.classes] * self.num_tasks if np.isscalar(self.classes) else list(self.classes)
        if len(classes) != self.num_tasks or min(classes) < 2:
            raise ConfigError(f"classes must be >= 2 for each of {self.num_tasks} tasks, got {self.classes!r}")
        self.classes_per_task = [int(c) for c in classes]
        inj = set(self.injection)
        if not inj <= _INJECTABLE:
            raise ConfigError(f"unknown injection points {sorted(inj - _INJECTABLE)}")
        if "ffn" in inj:
            inj = (inj - {"ffn"}) | {"down", "up"}
        self.injection = [m for m in MATRICES if m in inj]
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be 'gelu' or 'relu', got {self.activation!r}")
        if self.head_mode not in ("per_task", "shared"):
            raise ConfigError(f"head_mode must be 'per_task' or 'shared', got {self.head_mode!r}")

    @property
    def max_classes(self):
        return max(self.classes_per_task)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def matrix_shape(self, name):
        d, f = self.d, self.f
        return {"down": (f, d), "up": (d, f)}.get(name, (d, d))


class AdaptedLinear:
    """A frozen ``[out x in]`` weight with at most one adapter."""

    def __init__(self, W, adapter=None):
        self.W = W
        self.adapter = adapter
        self.capture = False
        self.last_branch = None
        self.last_output = None

    def __call__(self, x, task_ids=None):
        if x.shape[-1] != self.W.shape[1]:
            raise DimensionError(f"input {x.shape} does not match weight {self.W.shape}")
        out = matmul(x, self.W.T)
        if self.adapter is None:
            return out
        branch = self.adapter.delta(x, task_ids)
        out = out + branch
        if self.capture:
            self.last_branch = branch.data
            self.last_output = out.data
        return out


class Block:
    def __init__(self, weights, adapters, config: ModelConfig):
        self.config = config
        self.linears = {m: AdaptedLinear(weights[m], adapters.get(m)) for m in MATRICES}

    @property
    def weights(self):
        return {m: lin.W for m, lin in self.linears.items()}

    def attention(self, x, task_ids=None):
        """Single-head scaled dot-product attention on ``[batch x seq x d]``."""
        lin = self.linears
        q = lin["q"](x, task_ids)
        k = lin["k"](x, task_ids)
        v = lin["v"](x, task_ids)
        scores = matmul(q, k.T) * (1.0 / math.sqrt(x.shape[-1]))
        if self.config.causal and x.shape[1] > 1:
            s = x.shape[1]
            scores = scores + Tensor(np.triu(np.full((s, s), _NEG), k=1))
        attn = softmax(scores, axis=-1)
        return lin["o"](matmul(attn, v), task_ids)

    def ffn(self, x, task_ids=None):
        act = gelu if self.config.activation == "gelu" else relu
        return self.linears["up"](act(self.linears["down"](x, task_ids)), task_ids)

    def __call__(self, x, task_ids=None):
        h = x + self.attention(layer_norm(x), task_ids)
        return h + self.ffn(layer_norm(h), task_ids)


def attention_forward(x, block: Block, task_ids=None):
    return block.attention(_as_seq(x), task_ids)


def ffn_forward(x, block: Block, task_ids=None):
    return block.ffn(_as_tensor(x), task_ids)


def block_forward(x, block: Block, task_ids=None):
    return block(_as_seq(x), task_ids)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_seq(x):
    x = _as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(x.shape[0], 1, x.shape[1])
    if x.ndim != 3:
        raise DimensionError(f"expected [batch x seq x d] input, got {x.shape}")
    return x


class MultiTaskModel:
    """Frozen decoder stack + optional adapters + trainable classification heads.

    Base weights, adapters and heads draw from independent seeded streams, so two
    models built with the same seed share identical base weights whatever the
    adapter kind.
    """

    def __init__(self, config: ModelConfig, adapter: AdapterConfig | None = None, seed=0):
        self.config = config
        self.adapter_config = adapter
        if adapter is not None and adapter.num_tasks != config.num_tasks:
            raise ConfigError(
                f"adapter num_tasks {adapter.num_tasks} != model num_tasks {config.num_tasks}"
            )
        base_rng = np.random.default_rng([seed, 0])
        adapter_rng = np.random.default_rng([seed, 1])
        head_rng = np.random.default_rng([seed, 2])

        self.task_embeddings = None
        if adapter is not None and adapter.kind is AdapterKind.MOE_LORA:
            self.task_embeddings = Tensor(
                adapter_rng.normal(0.0, 0.02, size=(config.num_tasks, adapter.task_embed_dim)),
                requires_grad=True,
                name="task_embeddings",
            )

        self.blocks = []
        for _ in range(config.blocks):
            weights = {
                m: Tensor(base_rng.normal(0.0, config.init_std, size=config.matrix_shape(m)), name=m)
                for m in MATRICES
            }
            adapters = {}
            if adapter is not None:
                for m in config.injection:
                    dout, din = config.matrix_shape(m)
                    adapters[m] = build_adapter(adapter, dout, din, adapter_rng, self.task_embeddings)
            self.blocks.append(Block(weights, adapters, config))

        C = config.max_classes
        n_heads = config.num_tasks if config.head_mode == "per_task" else 1
        self.head_W = Tensor(
            head_rng.normal(0.0, config.init_std, size=(n_heads, config.d, C)),
            requires_grad=True,
            name="head_W",
        )
        self.head_b = Tensor(np.zeros((n_heads, C)), requires_grad=True, name="head_b")
        mask = np.zeros((config.num_tasks, C))
        for t, c in enumerate(config.classes_per_task):
            mask[t, c:] = _NEG
        self.class_mask = mask

    # ---- forward ----------------------------------------------------------

    def encode(self, x, task_ids=None):
        h = _as_seq(x)
        if h.shape[-1] != self.config.d:
            raise DimensionError(f"input dim {h.shape[-1]} != model dim {self.config.d}")
        for block in self.blocks:
            h = block(h, task_ids)
        return h

    def pool(self, h):
        """Mean over sequence positions (after a last layer norm if ``final_norm``)."""
        if self.config.final_norm:
            h = layer_norm(h)
        return h.mean(axis=1)

    def classify(self, pooled, task_ids):
        """Route each row to its task's head: ``logits_b = x_b @ Head_{t_b} + bias``."""
        pooled = _as_tensor(pooled)
        task_ids = check_task_ids(task_ids, self.config.num_tasks, pooled.shape[0])
        if pooled.ndim != 2 or pooled.shape[1] != self.config.d:
            raise DimensionError(f"pooled features must be [batch x {self.config.d}], got {pooled.shape}")
        if self.config.head_mode == "shared":
            logits = matmul(pooled, self.head_W[0]) + self.head_b[0]
        else:
            W = take(self.head_W, task_ids)  # [batch x d x C]
            logits = matmul(pooled.reshape(pooled.shape[0], 1, self.config.d), W)
            logits = logits.reshape(pooled.shape[0], -1) + take(self.head_b, task_ids)
        if self.class_mask.any():
            logits = logits + Tensor(self.class_mask[task_ids])
        return logits

    def forward(self, x, task_ids):
        task_ids = np.asarray(task_ids, dtype=np.int64)
        return self.classify(self.pool(self.encode(x, task_ids)), task_ids)

    __call__ = forward

    # ---- parameters -------------------------------------------------------

    def adapter_layers(self):
        """``(block_index, matrix_name, layer)`` for every attached adapter."""
        return [
            (i, m, lin.adapter)
            for i, block in enumerate(self.blocks)
            for m, lin in block.linears.items()
            if lin.adapter is not None
        ]

    def cache_inference(self):
        """Precompute parameter-only routing quantities of task-aware adapters.

        Used only while gradients are disabled; call ``clear_inference_cache``
        (or this again) after parameters change.
        """
        for _, _, layer in self.adapter_layers():
            if hasattr(layer, "cache_inference"):
                layer.cache_inference()

    def clear_inference_cache(self):
        for _, _, layer in self.adapter_layers():
            if hasattr(layer, "clear_cache"):
                layer.clear_cache()

    def adapter_parameters(self):
        """Named adapter parameters in (block, matrix, parameter) order."""
        out = [
            (f"blocks.{i}.{m}.{name}", p)
            for i, m, layer in self.adapter_layers()
            for name, p in layer.parameters()
        ]
        if self.task_embeddings is not None:
            out.append(("task_embeddings", self.task_embeddings))
        return out

    def head_parameters(self):
        return [("head.W", self.head_W), ("head.b", self.head_b)]

    def trainable_parameters(self):
        return self.adapter_parameters() + self.head_parameters()

    def frozen_parameters(self):
        return [
            (f"blocks.{i}.{m}.W", w)
            for i, block in enumerate(self.blocks)
            for m, w in block.weights.items()
        ]

    def base_param_count(self):
        return sum(w.data.size for _, w in self.frozen_parameters())

    def head_param_count(self):
        """Head entries that can receive gradient (padded classes excluded)."""
        d = self.config.d
        if self.config.head_mode == "shared":
            return (d + 1) * self.config.max_classes
        return sum((d + 1) * c for c in self.config.classes_per_task)

    def zero_grad(self):
        for _, p in self.trainable_parameters():
            p.zero_grad()

    def select_adapter(self, matrix="o", block=-1):
        lin = self.blocks[block].linears.get(matrix)
        if lin is None or lin.adapter is None:
            raise SelectionError(f"block {block} matrix {matrix!r} carries no adapter")
        return lin


def classify(model: MultiTaskModel, x_pooled, task_ids):
    return model.classify(x_pooled, task_ids)
