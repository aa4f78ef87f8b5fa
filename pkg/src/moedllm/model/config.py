from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy MoE block-diffusion model.

    ``mask_id`` and ``eos_id`` default to the two highest vocabulary ids.
    ``clustering_strength`` adds a router bias toward a contiguous band of
    experts for positions whose input token is MASK. ``planted_gain`` > 0 adds
    a near-autoregressive target-sequence signal to the output logits (see
    ``moedllm.model.toy``).
    """

    vocab_size: int = 64
    hidden_dim: int = 32
    num_layers: int = 4
    num_experts: int = 16
    experts_per_token: int = 2
    block_size: int = 32
    max_blocks: int = 4
    seed: int = 0
    clustering_strength: float = 0.0
    band_width: int | None = None
    planted_gain: float = 0.0
    planted_decay: float = 0.5
    planted_eos_position: int | None = None
    mask_id: int | None = None
    eos_id: int | None = None

    def __post_init__(self) -> None:
        if self.mask_id is None:
            object.__setattr__(self, "mask_id", self.vocab_size - 1)
        if self.eos_id is None:
            object.__setattr__(self, "eos_id", self.vocab_size - 2)
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_experts", "experts_per_token",
                     "block_size", "max_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must leave room for MASK, EOS and at least one token")
        if self.experts_per_token > self.num_experts:
            raise ConfigError("experts_per_token must be <= num_experts")
        if not (0 <= self.mask_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise ConfigError("mask_id and eos_id must be vocabulary ids")
        if self.mask_id == self.eos_id:
            raise ConfigError("mask_id and eos_id must be distinct")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.clustering_strength < 0 or self.planted_gain < 0:
            raise ConfigError("clustering_strength and planted_gain must be >= 0")
        if not 0 < self.planted_decay <= 1:
            raise ConfigError("planted_decay must be in (0, 1]")
        if self.band_width is not None and not 1 <= self.band_width <= self.num_experts:
            raise ConfigError("band_width must be in [1, num_experts]")

    @property
    def ff_dim(self) -> int:
        return 4 * self.hidden_dim

    @property
    def max_positions(self) -> int:
        return self.block_size * self.max_blocks

    @property
    def effective_band_width(self) -> int:
        if self.band_width is not None:
            return self.band_width
        return min(self.num_experts, max(2 * self.experts_per_token, self.num_experts // 8))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def signature(self) -> tuple:
        """Fields that must agree for two runs to be cost-comparable."""
        return (self.vocab_size, self.hidden_dim, self.num_layers, self.num_experts,
                self.experts_per_token, self.block_size)
