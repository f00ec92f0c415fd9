# Forward latency of merged LoRA, MTL-LoRA and MoELoRA on a d=256, 4-block model.
# Run: python demos/04_latency.py   (under a minute, single thread)

from mtladapt.latency import bench_forward, median_of, reference_model_config

cfg = reference_model_config()
records = bench_forward(["base", "lora", "mtl_lora", "moe_lora"], [1, 32], cfg, reps=50, warmup=5)
for r in records:
    print(f"{r.kind:>9} batch {r.batch:>2}: median {r.median_us / 1e3:7.2f} ms  (p10 {r.p10_us / 1e3:.2f}, p90 {r.p90_us / 1e3:.2f})")

# Merged LoRA is the frozen model. MTL-LoRA adds one gathered low-rank matmul per
# adapted matrix; MoELoRA pays one small matmul per expert.
mtl, moe = median_of(records, "mtl_lora", 32), median_of(records, "moe_lora", 32)
print(f"MoELoRA / MTL-LoRA at batch 32: {moe / mtl:.2f}x")
