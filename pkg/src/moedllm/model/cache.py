from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CacheInconsistencyError(RuntimeError):
    pass


@dataclass
class IntraEntry:
    keys: np.ndarray  # (num_layers, kv_dim)
    values: np.ndarray
    grace_pending: bool


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass
class LayerKVCache:
    """Committed cross-block KV plus the intra-block delayed-cache entries.

    Committed arrays are replaced (never written in place) when a block is
    committed, so views handed out earlier stay valid.
    """

    num_layers: int
    kv_dim: int
    committed_keys: list[np.ndarray] = field(default_factory=list)
    committed_values: list[np.ndarray] = field(default_factory=list)
    committed_tokens: tuple[int, ...] = ()
    intra: dict[int, IntraEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.committed_keys:
            empty = _frozen(np.zeros((0, self.kv_dim)))
            self.committed_keys = [empty] * self.num_layers
            self.committed_values = [empty] * self.num_layers

    @property
    def committed_length(self) -> int:
        return len(self.committed_tokens)

    def commit_block(self, tokens, keys: np.ndarray, values: np.ndarray) -> None:
        """Append a completed block; ``keys``/``values`` are (L, num_layers, kv_dim)."""
        keys = np.asarray(keys)
        values = np.asarray(values)
        if keys.shape != (len(tokens), self.num_layers, self.kv_dim) or keys.shape != values.shape:
            raise CacheInconsistencyError(f"commit shape {keys.shape} does not match block")
        self.committed_keys = [_frozen(np.concatenate([self.committed_keys[l], keys[:, l]]))
                               for l in range(self.num_layers)]
        self.committed_values = [_frozen(np.concatenate([self.committed_values[l], values[:, l]]))
                                 for l in range(self.num_layers)]
        self.committed_tokens = self.committed_tokens + tuple(int(t) for t in tokens)
        self.intra = {}

    def put(self, position: int, keys: np.ndarray, values: np.ndarray, grace_pending: bool) -> None:
        self.intra[position] = IntraEntry(_frozen(keys), _frozen(values), grace_pending)

    def get(self, position: int) -> IntraEntry:
        entry = self.intra.get(position)
        if entry is None:
            raise CacheInconsistencyError(f"no cached KV for inactive position {position}")
        if entry.grace_pending:
            raise CacheInconsistencyError(
                f"position {position} is still in its grace step and cannot be served from cache")
        return entry

    def clear_block(self) -> None:
        self.intra = {}
