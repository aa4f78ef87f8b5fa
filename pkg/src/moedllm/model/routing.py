from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from moedllm.numerics import softmax_rows, top_k


@dataclass(frozen=True)
class RoutingRecord:
    layer: int
    token_position: int
    expert_ids: tuple[int, ...]
    gate_weights: tuple[float, ...]
    restricted: bool = False

    def __post_init__(self) -> None:
        if len(self.expert_ids) != len(self.gate_weights):
            raise ValueError("expert_ids and gate_weights differ in length")
        if len(set(self.expert_ids)) != len(self.expert_ids):
            raise ValueError("duplicate expert id in routing record")


def route_logits(
    logits: np.ndarray,
    k: int,
    restriction: Iterable[int] | None = None,
) -> tuple[list[int], list[float]]:
    """Top-k routing over router logits, optionally confined to ``restriction``.

    Softmax runs over the allowed logits only, the top min(k, |allowed|)
    experts are kept and their weights renormalised to sum to one.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if restriction is None:
        allowed = np.arange(logits.size)
    else:
        allowed = np.array(sorted(set(int(e) for e in restriction)), dtype=np.int64)
        if allowed.size == 0:
            raise ValueError("empty expert restriction")
        if allowed.min() < 0 or allowed.max() >= logits.size:
            raise ValueError("restriction names an unknown expert")
    probs = softmax_rows(logits[allowed])
    keep = top_k(probs, min(k, allowed.size))
    kept = probs[keep]
    weights = kept / kept.sum()
    return [int(allowed[i]) for i in keep], [float(w) for w in weights]


def route(
    model,
    layer: int,
    hidden: np.ndarray,
    restriction: Iterable[int] | None = None,
    *,
    position: int = -1,
    input_is_mask: bool = False,
) -> RoutingRecord:
    logits = model.router_logits(layer, np.asarray(hidden, dtype=np.float64)[None, :],
                                 [position], [input_is_mask])[0]
    ids, weights = route_logits(logits, model.cfg.experts_per_token, restriction)
    return RoutingRecord(layer, position, tuple(ids), tuple(weights), restriction is not None)
