from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from moedllm.model.cache import LayerKVCache
from moedllm.model.config import ModelConfig
from moedllm.model.routing import RoutingRecord, route_logits
from moedllm.numerics import softmax_rows

# Logit assigned to MASK so it is never predicted; finite to keep logits matrices finite.
MASK_LOGIT = -1.0e4

# A routing policy replaces per-token routing for one layer of one forward pass.
# It receives (layer, positions, router_logits[len(positions), E], input_is_mask)
# and returns (records, info); ``info`` is attached to the ForwardResult per layer.
RoutingPolicy = Callable[[int, Sequence[int], np.ndarray, Sequence[bool]],
                         tuple[list[RoutingRecord], dict]]


class RequestError(ValueError):
    pass


@dataclass(frozen=True)
class ForwardRequest:
    block_tokens: tuple[int, ...]
    active_positions: tuple[int, ...]
    block_index: int = 0
    iteration: int | None = None
    branch_id: int = 0
    expert_restriction: Mapping[int, frozenset[int]] | None = None
    roles: Mapping[int, str] | None = None
    routing_policy: RoutingPolicy | None = None
    hidden_layers: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        L = len(self.block_tokens)
        active = tuple(sorted(set(int(p) for p in self.active_positions)))
        if any(p < 0 or p >= L for p in active):
            raise RequestError(f"active positions outside [0, {L})")
        object.__setattr__(self, "active_positions", active)
        object.__setattr__(self, "block_tokens", tuple(int(t) for t in self.block_tokens))
        if self.expert_restriction is not None:
            for p, experts in self.expert_restriction.items():
                if not experts:
                    raise RequestError(f"empty expert restriction for position {p}")
                if self.roles is not None and self.roles.get(p) != "cold":
                    raise RequestError(f"expert restriction on non-cold position {p}")


@dataclass
class ForwardResult:
    positions: tuple[int, ...]
    logits: np.ndarray
    confidences: np.ndarray
    predictions: np.ndarray
    routing: list[RoutingRecord]
    keys: np.ndarray  # (n_active, num_layers, kv_dim)
    values: np.ndarray
    hidden_snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    layer_info: dict[int, dict] = field(default_factory=dict)
    branch_id: int = 0

    def __post_init__(self) -> None:
        self._index = {p: i for i, p in enumerate(self.positions)}

    def __contains__(self, position: int) -> bool:
        return position in self._index

    def index(self, position: int) -> int:
        return self._index[position]

    def confidence(self, position: int) -> float:
        return float(self.confidences[self._index[position]])

    def prediction(self, position: int) -> int:
        return int(self.predictions[self._index[position]])

    def kv(self, position: int) -> tuple[np.ndarray, np.ndarray]:
        i = self._index[position]
        return self.keys[i], self.values[i]

    def routing_for_layer(self, layer: int) -> list[RoutingRecord]:
        return [r for r in self.routing if r.layer == layer]


class Model:
    """Common surface the decoders rely on."""

    cfg: ModelConfig

    @property
    def kv_dim(self) -> int:
        return self.cfg.hidden_dim

    def new_cache(self) -> LayerKVCache:
        return LayerKVCache(self.cfg.num_layers, self.kv_dim)

    def forward(self, ctx: LayerKVCache, req: ForwardRequest) -> ForwardResult:
        raise NotImplementedError

    def router_logits(self, layer: int, hiddens: np.ndarray, positions: Sequence[int],
                      input_is_mask: Sequence[bool]) -> np.ndarray:
        raise NotImplementedError

    def commit(self, ctx: LayerKVCache, tokens: Sequence[int], block_index: int) -> None:
        """Recompute a finished block with every position active and append its KV."""
        L = len(tokens)
        res = self.forward(ctx, ForwardRequest(tuple(tokens), tuple(range(L)), block_index=block_index))
        ctx.commit_block(tokens, res.keys, res.values)

    def _route_layer(self, req: ForwardRequest, layer: int, logits: np.ndarray,
                     input_is_mask: Sequence[bool]) -> tuple[list[RoutingRecord], dict]:
        positions = req.active_positions
        if req.routing_policy is not None:
            return req.routing_policy(layer, positions, logits, input_is_mask)
        k = self.cfg.experts_per_token
        records = []
        for i, p in enumerate(positions):
            restriction = None
            if req.expert_restriction is not None:
                restriction = req.expert_restriction.get(p)
            ids, w = route_logits(logits[i], k, restriction)
            records.append(RoutingRecord(layer, p, tuple(ids), tuple(w), restriction is not None))
        return records, {}


def probabilities_to_outputs(logits: np.ndarray, mask_id: int):
    logits = np.array(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return logits, np.zeros(0), np.zeros(0, dtype=np.int64)
    logits[:, mask_id] = MASK_LOGIT
    probs = softmax_rows(logits)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(pred)), pred]
    return logits, conf, pred.astype(np.int64)
