"""Multi-task low-rank adaptation toolkit: MTL-LoRA with LoRA, MultiLoRA and MoELoRA baselines."""

__version__ = "0.1.0"
