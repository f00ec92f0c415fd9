"""Low-rank adapters attached to a frozen weight matrix.

All layers follow the row-vector convention: a frozen weight ``W`` has shape
``[d x k]`` (out x in) and the frozen forward is ``x @ W.T`` for ``x`` of shape
``[batch x k]`` or ``[batch x seq x k]``. Each layer exposes ``delta(x, task_ids)``,
the additive low-rank branch, so the adapted forward is ``x @ W.T + delta``.

Four families are provided:

* ``LoRALayer``       -- ``(alpha/r) B A``
* ``MTLLoRALayer``    -- ``(alpha/r) sum_i softmax(w_t / tau)_i B^i Lambda_t A``
* ``MultiLoRALayer``  -- ``sum_m mix_m (alpha/r) B_m A_m``
* ``MoELoRALayer``    -- ``(alpha/r) sum_e gate_t[e] B_e A_e`` with a task-embedding gate
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError, InvalidHyperparameterError, TaskIdError
from .tensor import Tensor, is_grad_enabled, matmul, no_grad, softmax, take


class AdapterKind(str, Enum):
    LORA = "lora"
    MTL_LORA = "mtl_lora"
    MULTI_LORA = "multi_lora"
    MOE_LORA = "moe_lora"


@dataclass
class AdapterConfig:
    """Hyperparameters for one adapter family.

    Fields that do not apply to ``kind`` are ignored (``n_up``/``tau`` are
    MTL-LoRA only, ``num_experts``/``task_embed_dim`` MoELoRA only,
    ``num_lora_modules`` MultiLoRA only).
    """

    kind: AdapterKind = AdapterKind.MTL_LORA
    rank: int = 8
    alpha: float = 16.0
    n_up: int = 3
    tau: float = 0.8
    num_tasks: int = 1
    num_experts: int = 8
    task_embed_dim: int = 64
    num_lora_modules: int = 3
    freeze_lambda_identity: bool = False
    uniform_weights: bool = False
    w_init_std: float = 0.0

    def __post_init__(self):
        try:
            self.kind = AdapterKind(self.kind)
        except ValueError:
            raise ConfigError(
                f"unknown adapter kind {self.kind!r}; expected one of "
                f"{[k.value for k in AdapterKind]}"
            ) from None
        for name in ("rank", "n_up", "num_tasks", "num_experts", "task_embed_dim", "num_lora_modules"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha!r}")
        if not self.tau > 0:
            raise InvalidHyperparameterError(f"tau must be positive, got {self.tau!r}")
        if self.kind is AdapterKind.MOE_LORA and self.rank % self.num_experts:
            raise ConfigError(
                f"MoELoRA rank {self.rank} is not divisible by num_experts {self.num_experts}"
            )

    @property
    def scale(self):
        return self.alpha / self.rank

    def check_dims(self, d, k):
        if self.rank >= min(d, k):
            raise ConfigError(f"rank {self.rank} must be < min(d, k) = {min(d, k)}")

    def to_dict(self):
        out = asdict(self)
        out["kind"] = self.kind.value
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown adapter config fields: {sorted(unknown)}")
        return cls(**data)


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def check_task_ids(task_ids, num_tasks, batch):
    task_ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    if task_ids.shape[0] != batch:
        raise DimensionError(f"{task_ids.shape[0]} task ids for a batch of {batch}")
    if task_ids.size and (task_ids.min() < 0 or task_ids.max() >= num_tasks):
        bad = task_ids[(task_ids < 0) | (task_ids >= num_tasks)][0]
        raise TaskIdError(f"task id {bad} out of range [0, {num_tasks})")
    return task_ids


def _per_sample(weights, x):
    """Reshape a [batch] weight column so it broadcasts against ``x``'s branch output."""
    return weights.reshape((x.shape[0],) + (1,) * (x.ndim - 1))


def _check_input(x, k):
    if x.shape[-1] != k:
        raise DimensionError(f"input feature dim {x.shape[-1]} does not match adapter in-dim {k}")


class LoRALayer:
    """``B`` (d x r, zero init) and ``A`` (r x k, Kaiming-uniform init)."""

    kind = AdapterKind.LORA
    task_aware = False

    def __init__(self, d, k, rank, alpha, rng, scale=None):
        self.d, self.k, self.rank = d, k, rank
        self.scale = alpha / rank if scale is None else scale
        self.A = Tensor(kaiming_uniform(rng, (rank, k), k), requires_grad=True, name="A")
        self.B = Tensor(np.zeros((d, rank)), requires_grad=True, name="B")

    def delta(self, x, task_ids=None):
        _check_input(x, self.k)
        return matmul(matmul(x, self.A.T), self.B.T) * self.scale

    def delta_weight(self):
        return self.scale * (self.B.data @ self.A.data)

    def parameters(self):
        return [("A", self.A), ("B", self.B)]


class MTLLoRALayer:
    """Shared down-projection, per-task ``Lambda_t``, ``n`` up-projections mixed per task.

    ``Lambda`` is stored stacked as ``[T x r x r]`` and ``w_table`` as ``[T x n]`` so a
    mixed-task batch is handled by gathering each sample's task slice; there is no
    per-sample, per-task or per-branch loop over activations.
    """

    kind = AdapterKind.MTL_LORA
    task_aware = True

    def __init__(self, d, k, rank, alpha, n_up, tau, num_tasks, rng,
                 freeze_lambda_identity=False, uniform_weights=False, w_init_std=0.0):
        if not tau > 0:
            raise InvalidHyperparameterError(f"tau must be positive, got {tau}")
        self.d, self.k, self.rank = d, k, rank
        self.n_up, self.tau, self.num_tasks = n_up, float(tau), num_tasks
        self.scale = alpha / rank
        self.freeze_lambda_identity = freeze_lambda_identity
        self.uniform_weights = uniform_weights
        self.A = Tensor(kaiming_uniform(rng, (rank, k), k), requires_grad=True, name="A")
        self.B_list = [
            Tensor(np.zeros((d, rank)), requires_grad=True, name=f"B{i}") for i in range(n_up)
        ]
        self.Lambda = Tensor(
            np.tile(np.eye(rank), (num_tasks, 1, 1)),
            requires_grad=not freeze_lambda_identity,
            name="Lambda",
        )
        w0 = np.zeros((num_tasks, n_up))
        if w_init_std:
            w0 = rng.normal(0.0, w_init_std, size=w0.shape)
        self.w_table = Tensor(w0, requires_grad=not uniform_weights, name="w")
        self._cached_up = None

    @property
    def Lambda_list(self):
        return [self.Lambda.data[t] for t in range(self.num_tasks)]

    def routing_weights(self):
        """``softmax(w_t / tau)`` for every task, shape ``[T x n]``."""
        if self.uniform_weights:
            return Tensor(np.full((self.num_tasks, self.n_up), 1.0 / self.n_up))
        return softmax(self.w_table, tau=self.tau)

    def task_up_projections(self):
        """Effective up-projection ``(sum_i p_ti B^i) Lambda_t`` of every task, ``[T x d x r]``."""
        p = self.routing_weights()
        mixed = None
        for i, B in enumerate(self.B_list):
            term = p[:, i].reshape(self.num_tasks, 1, 1) * B
            mixed = term if mixed is None else mixed + term
        if not self.freeze_lambda_identity:
            mixed = matmul(mixed, self.Lambda)
        return mixed

    def delta(self, x, task_ids):
        # task-level routing: the per-task up-projections are formed once on
        # weight-sized tensors, then each sample gathers its task's slice
        _check_input(x, self.k)
        task_ids = check_task_ids(task_ids, self.num_tasks, x.shape[0])
        z = matmul(x, self.A.T)
        if self._cached_up is not None and not is_grad_enabled():
            up_all = self._cached_up
        else:
            up_all = self.task_up_projections()
        up = take(up_all, task_ids).T  # [batch x r x d]
        if z.ndim == 2:
            out = matmul(z.reshape(z.shape[0], 1, self.rank), up).reshape(x.shape[0], self.d)
        else:
            out = matmul(z, up)
        return out * self.scale

    def cache_inference(self):
        """Freeze the per-task up-projections for grad-free calls (inference serving)."""
        with no_grad():
            self._cached_up = Tensor(self.task_up_projections().data.copy())

    def clear_cache(self):
        self._cached_up = None

    def delta_weight(self, task):
        """Dense ``Delta W_t`` for one task (reference / oracle use)."""
        if self.uniform_weights:
            p = np.full(self.n_up, 1.0 / self.n_up)
        else:
            z = self.w_table.data[task] / self.tau
            p = np.exp(z - z.max())
            p /= p.sum()
        lam = np.eye(self.rank) if self.freeze_lambda_identity else self.Lambda.data[task]
        B_mix = sum(p[i] * self.B_list[i].data for i in range(self.n_up))
        return self.scale * (B_mix @ lam @ self.A.data)

    def parameters(self):
        out = [("A", self.A)]
        out += [(f"B{i}", B) for i, B in enumerate(self.B_list)]
        if not self.freeze_lambda_identity:
            out.append(("Lambda", self.Lambda))
        if not self.uniform_weights:
            out.append(("w", self.w_table))
        return out


class MultiLoRALayer:
    """Task-agnostic sum of independent LoRA branches with learnable scalar mixes."""

    kind = AdapterKind.MULTI_LORA
    task_aware = False

    def __init__(self, d, k, rank, alpha, num_modules, rng):
        self.d, self.k, self.rank = d, k, rank
        self.modules = [LoRALayer(d, k, rank, alpha, rng) for _ in range(num_modules)]
        self.mix = Tensor(np.ones(num_modules), requires_grad=True, name="mix")

    def delta(self, x, task_ids=None):
        out = None
        for m, layer in enumerate(self.modules):
            branch = layer.delta(x) * self.mix[m]
            out = branch if out is None else out + branch
        return out

    def delta_weight(self):
        return sum(self.mix.data[m] * layer.delta_weight() for m, layer in enumerate(self.modules))

    def parameters(self):
        out = []
        for m, layer in enumerate(self.modules):
            out += [(f"m{m}.{n}", p) for n, p in layer.parameters()]
        out.append(("mix", self.mix))
        return out


class MoELoRALayer:
    """Rank split evenly over experts, mixed by a softmax gate on a per-task embedding.

    The task-embedding table may be shared between many layers (pass it in as
    ``task_embeddings``); it is then reported by the owner, not by this layer.
    Every expert carries the layer-level scale ``alpha / rank`` (total rank). The
    forward pass loops over experts on purpose.
    """

    kind = AdapterKind.MOE_LORA
    task_aware = True

    def __init__(self, d, k, rank, alpha, num_experts, num_tasks, task_embed_dim, rng,
                 task_embeddings=None):
        if rank % num_experts:
            raise ConfigError(f"rank {rank} is not divisible by num_experts {num_experts}")
        self.d, self.k, self.rank = d, k, rank
        self.num_experts, self.num_tasks = num_experts, num_tasks
        self.scale = alpha / rank
        self.experts = [
            LoRALayer(d, k, rank // num_experts, alpha, rng, scale=self.scale) for _ in range(num_experts)
        ]
        self.gate = Tensor(
            rng.normal(0.0, 0.02, size=(task_embed_dim, num_experts)), requires_grad=True, name="gate"
        )
        self.owns_embeddings = task_embeddings is None
        if task_embeddings is None:
            task_embeddings = Tensor(
                rng.normal(0.0, 0.02, size=(num_tasks, task_embed_dim)),
                requires_grad=True,
                name="task_embeddings",
            )
        if task_embeddings.shape != (num_tasks, task_embed_dim):
            raise DimensionError(
                f"task embeddings must be {(num_tasks, task_embed_dim)}, got {task_embeddings.shape}"
            )
        self.task_embeddings = task_embeddings
        self._cached_gate = None

    def gate_weights(self):
        """Softmax gate over experts for every task, shape ``[T x E]``."""
        if self._cached_gate is not None and not is_grad_enabled():
            return self._cached_gate
        return softmax(matmul(self.task_embeddings, self.gate))

    def cache_inference(self):
        """Freeze the per-task gate for grad-free calls; the expert loop is unchanged."""
        with no_grad():
            self._cached_gate = Tensor(softmax(matmul(self.task_embeddings, self.gate)).data.copy())

    def clear_cache(self):
        self._cached_gate = None

    def delta(self, x, task_ids):
        _check_input(x, self.k)
        task_ids = check_task_ids(task_ids, self.num_tasks, x.shape[0])
        g = take(self.gate_weights(), task_ids)
        out = None
        for e, expert in enumerate(self.experts):
            branch = expert.delta(x) * _per_sample(g[:, e], x)
            out = branch if out is None else out + branch
        return out

    def delta_dense(self, x, task_ids):
        """Same output as ``delta`` computed with one stacked contraction (no expert loop)."""
        task_ids = check_task_ids(task_ids, self.num_tasks, x.shape[0])
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        ge = self.gate_weights().data[task_ids]
        A = np.stack([e.A.data for e in self.experts])  # [E x r_e x k]
        B = np.stack([e.B.data for e in self.experts])  # [E x d x r_e]
        z = np.einsum("...k,erk->...er", xd, A)
        y = np.einsum("...er,edr->...ed", z, B)
        ge = ge.reshape((xd.shape[0],) + (1,) * (xd.ndim - 2) + ge.shape[1:])
        return self.scale * np.einsum("...ed,...e->...d", y, ge)

    def parameters(self):
        out = []
        for e, expert in enumerate(self.experts):
            out += [(f"e{e}.{n}", p) for n, p in expert.parameters()]
        out.append(("gate", self.gate))
        if self.owns_embeddings:
            out.append(("task_embeddings", self.task_embeddings))
        return out


def build_adapter(config: AdapterConfig, d, k, rng, task_embeddings=None):
    """Construct the adapter layer described by ``config`` for a ``[d x k]`` weight."""
    config.check_dims(d, k)
    if config.kind is AdapterKind.LORA:
        return LoRALayer(d, k, config.rank, config.alpha, rng)
    if config.kind is AdapterKind.MTL_LORA:
        return MTLLoRALayer(
            d, k, config.rank, config.alpha, config.n_up, config.tau, config.num_tasks, rng,
            freeze_lambda_identity=config.freeze_lambda_identity,
            uniform_weights=config.uniform_weights,
            w_init_std=config.w_init_std,
        )
    if config.kind is AdapterKind.MULTI_LORA:
        return MultiLoRALayer(d, k, config.rank, config.alpha, config.num_lora_modules, rng)
    return MoELoRALayer(
        d, k, config.rank, config.alpha, config.num_experts, config.num_tasks,
        config.task_embed_dim, rng, task_embeddings=task_embeddings,
    )


# ---- functional forms -------------------------------------------------------


def _frozen(x, W):
    W = W if isinstance(W, Tensor) else Tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"input {x.shape} does not match weight {W.shape}")
    return matmul(x, W.T)


def _as_input(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def adapted_forward(x, W, layer, task_ids=None):
    x = _as_input(x)
    base = _frozen(x, W)
    if layer is None:
        return base
    if layer.d != base.shape[-1]:
        raise DimensionError(f"adapter out-dim {layer.d} does not match weight {W.shape}")
    return base + layer.delta(x, task_ids)


def lora_forward(x, W, layer: LoRALayer):
    return adapted_forward(x, W, layer)


def multi_lora_forward(x, W, layer: MultiLoRALayer):
    return adapted_forward(x, W, layer)


def mtl_lora_forward(x, task_ids, W, layer: MTLLoRALayer):
    return adapted_forward(x, W, layer, task_ids)


def moe_lora_forward(x, task_ids, W, layer: MoELoRALayer):
    return adapted_forward(x, W, layer, task_ids)


def mtl_lora_forward_loop(x, task_ids, W, layer: MTLLoRALayer):
    """Per-sample reference for ``mtl_lora_forward`` written directly from the formula."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    Wd = W.data if isinstance(W, Tensor) else np.asarray(W)
    task_ids = check_task_ids(task_ids, layer.num_tasks, xd.shape[0])
    out = np.empty(xd.shape[:-1] + (Wd.shape[0],))
    for b, t in enumerate(task_ids):
        if layer.uniform_weights:
            p = np.full(layer.n_up, 1.0 / layer.n_up)
        else:
            e = np.exp((layer.w_table.data[t] - layer.w_table.data[t].max()) / layer.tau)
            p = e / e.sum()
        z = xd[b] @ layer.A.data.T
        if not layer.freeze_lambda_identity:
            z = z @ layer.Lambda.data[t].T
        branch = sum(p[i] * (z @ layer.B_list[i].data.T) for i in range(layer.n_up))
        out[b] = xd[b] @ Wd.T + layer.scale * branch
    return out


def lora_merge(W, layer):
    """Fold a task-agnostic adapter into the frozen weight: ``W + Delta W``."""
    Wd = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    return Wd + layer.delta_weight()


def lora_unmerge(W_merged, layer):
    Wd = W_merged.data if isinstance(W_merged, Tensor) else np.asarray(W_merged, dtype=np.float64)
    return Wd - layer.delta_weight()


# ---- parameter accounting ---------------------------------------------------


def per_matrix_count(config: AdapterConfig, d, k):
    """Trainable adapter parameters owned by one adapted ``[d x k]`` matrix."""
    r = config.rank
    if config.kind is AdapterKind.LORA:
        return r * (d + k)
    if config.kind is AdapterKind.MTL_LORA:
        n, T = config.n_up, config.num_tasks
        count = r * k + n * d * r
        if not config.freeze_lambda_identity:
            count += T * r * r
        if not config.uniform_weights:
            count += T * n
        return count
    if config.kind is AdapterKind.MULTI_LORA:
        m = config.num_lora_modules
        return m * r * (d + k) + m
    return r * (d + k) + config.task_embed_dim * config.num_experts


def global_count(config: AdapterConfig):
    """Adapter parameters shared by all adapted matrices (MoELoRA task embeddings)."""
    if config.kind is AdapterKind.MOE_LORA:
        return config.num_tasks * config.task_embed_dim
    return 0


def count_trainable(config: AdapterConfig, dims):
    """Analytic trainable-parameter count and percentage of the base model.

    ``dims`` keys: ``d``, ``k``, ``matrices_per_block``, ``blocks``,
    ``base_param_count`` and optionally ``heads_params``.
    """
    for key in ("d", "k", "matrices_per_block", "blocks", "base_param_count"):
        if key not in dims:
            raise ConfigError(f"count_trainable dims missing {key!r}")
        if not dims[key] > 0:
            raise ConfigError(f"count_trainable dims[{key!r}] must be positive")
    per = per_matrix_count(config, dims["d"], dims["k"])
    count = per * dims["matrices_per_block"] * dims["blocks"] + global_count(config)
    count += int(dims.get("heads_params", 0))
    return {
        "count": int(count),
        "per_matrix": int(per),
        "percent": 100.0 * count / float(dims["base_param_count"]),
    }
