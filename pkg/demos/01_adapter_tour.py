# A tour of the four adapter families on a single frozen matrix.
# Run: python demos/01_adapter_tour.py

import numpy as np

from mtladapt.adapters import (
    AdapterConfig, LoRALayer, MTLLoRALayer, adapted_forward, build_adapter, count_trainable, lora_merge,
)

rng = np.random.default_rng(0)
d, k, T = 12, 16, 3
W = rng.standard_normal((d, k))          # frozen weight, out x in
x = rng.standard_normal((5, k))
tasks = np.array([0, 1, 2, 0, 1])

# %% every family starts as an exact no-op: B (or the up-projections) are zero
for kind in ("lora", "mtl_lora", "multi_lora", "moe_lora"):
    cfg = AdapterConfig(kind=kind, rank=4, alpha=8.0, n_up=3, num_tasks=T, num_experts=2, task_embed_dim=8)
    layer = build_adapter(cfg, d, k, rng)
    same = np.array_equal(adapted_forward(x, W, layer, tasks).data, x @ W.T)
    print(f"{kind:>10}: {sum(p.data.size for _, p in layer.parameters()):5d} params, identity at init: {same}")

# %% MTL-LoRA routing: softmax(w_t / tau) over the n up-projections
mtl = MTLLoRALayer(d, k, 4, 8.0, 3, 1.0, T, rng)
mtl.w_table.data[...] = [[0.1, 0.0, -0.1], [0.0, 0.2, 0.1], [-0.2, 0.0, 0.05]]
for tau in (0.01, 0.5, 1.0, 100.0):
    mtl.tau = tau
    print(f"tau={tau:<6}", np.round(mtl.routing_weights().data, 3).tolist())
# small tau -> one-hot on the argmax, large tau -> uniform; the argmax never moves

# %% merging a task-agnostic adapter costs nothing at inference
lora = LoRALayer(d, k, 4, 8.0, rng)
lora.B.data[...] = 0.1 * rng.standard_normal(lora.B.shape)
merged = lora_merge(W, lora)
print("merge error:", np.abs(x @ merged.T - adapted_forward(x, W, lora).data).max())

# %% parameter budgets on a 7B-sized decoder (4096 wide, Q/K/V/O in 32 blocks)
dims = dict(d=4096, k=4096, matrices_per_block=4, blocks=32, base_param_count=6.74e9)
for cfg in (
    AdapterConfig(kind="lora", rank=8),
    AdapterConfig(kind="multi_lora", rank=8, num_lora_modules=3),
    AdapterConfig(kind="mtl_lora", rank=8, n_up=3, num_tasks=8),
    AdapterConfig(kind="moe_lora", rank=16, alpha=32, num_experts=8, num_tasks=8),
):
    res = count_trainable(cfg, dims)
    print(f"{cfg.kind.value:>10} r={cfg.rank:<2} {res['count']:>11,d} trainable ({res['percent']:.3f}%)")
