"""Block-diffusion decoding engine for MoE diffusion language models with expert-activation-aware acceleration."""

__version__ = "0.1.0"
