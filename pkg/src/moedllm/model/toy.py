"""Seeded toy MoE transformer with block-bidirectional attention.

Single-head attention, parameter-free RMS norms, absolute position
embeddings and a top-k routed expert FFN per layer. Weights come from the
Philox stream (seed, 0) in declaration order: token embedding, position
embedding, then per layer wq, wk, wv, wo, router, and each expert's (up,
down) pair, then the unembedding.

Two optional synthetic signals shape the otherwise random model:

* ``clustering_strength`` adds a bias to a contiguous (cyclic) band of
  router logits for every position whose input token is MASK, so masked
  tokens concentrate on a few experts.
* ``planted_gain`` plants a target sequence. A position whose nearest
  correctly decoded left neighbour (a virtual BOS for the very first
  position) is ``d`` steps away gets ``gain * decay**(d - 1)`` added to the
  logit of its target token. Confidence therefore rises as the decoded
  prefix grows, which yields a near left-to-right acceptance order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moedllm.model.base import ForwardRequest, ForwardResult, Model, probabilities_to_outputs
from moedllm.model.cache import LayerKVCache
from moedllm.model.config import ConfigError, ModelConfig
from moedllm.numerics import gelu, make_rng, rms_norm, softmax_rows

# scan limit for the planted nearest-correct-neighbour search
_PLANT_WINDOW = 64


@dataclass
class MoELayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    router: np.ndarray
    up: np.ndarray  # (E, hidden, ff)
    down: np.ndarray  # (E, ff, hidden)

    def matrices(self) -> list[np.ndarray]:
        out = [self.wq, self.wk, self.wv, self.wo, self.router]
        for e in range(self.up.shape[0]):
            out += [self.up[e], self.down[e]]
        return out


class ToyMoEModel(Model):
    def __init__(self, cfg: ModelConfig, token_emb: np.ndarray, pos_emb: np.ndarray,
                 layers: list[MoELayerWeights], unembed: np.ndarray):
        self.cfg = cfg
        self.token_emb = token_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.unembed = unembed
        for m in self.matrices():
            m.setflags(write=False)

        aux = make_rng(cfg.seed, 1)
        self.band_start = int(aux.integers(cfg.num_experts))
        band = (self.band_start + np.arange(cfg.effective_band_width)) % cfg.num_experts
        self.band = tuple(sorted(int(e) for e in band))
        self._band_bias = np.zeros(cfg.num_experts)
        self._band_bias[list(self.band)] = cfg.clustering_strength

        plant = make_rng(cfg.seed, 2)
        ordinary = np.array([t for t in range(cfg.vocab_size) if t not in (cfg.mask_id, cfg.eos_id)])
        self.targets = ordinary[plant.integers(len(ordinary), size=cfg.max_positions)]
        if cfg.planted_eos_position is not None and cfg.planted_eos_position < cfg.max_positions:
            self.targets[cfg.planted_eos_position] = cfg.eos_id
        self.targets.setflags(write=False)

    def matrices(self) -> list[np.ndarray]:
        out = [self.token_emb, self.pos_emb]
        for lw in self.layers:
            out += lw.matrices()
        out.append(self.unembed)
        return out

    def router_logits(self, layer: int, hiddens: np.ndarray, positions: Sequence[int],
                      input_is_mask: Sequence[bool]) -> np.ndarray:
        logits = np.asarray(hiddens) @ self.layers[layer].router
        if self.cfg.clustering_strength:
            logits = logits + np.outer(np.asarray(input_is_mask, dtype=np.float64), self._band_bias)
        return logits

    def _planted_bonus(self, prefix: Sequence[int], absolute: Sequence[int]) -> np.ndarray:
        cfg = self.cfg
        bonus = np.zeros((len(absolute), cfg.vocab_size))
        if not cfg.planted_gain:
            return bonus
        for i, a in enumerate(absolute):
            d = None
            for j in range(a - 1, max(-1, a - 1 - _PLANT_WINDOW), -1):
                if prefix[j] == self.targets[j]:
                    d = a - j
                    break
            else:
                if a < _PLANT_WINDOW:
                    d = a + 1  # virtual BOS at -1
            if d is not None:
                bonus[i, self.targets[a]] = cfg.planted_gain * cfg.planted_decay ** (d - 1)
        return bonus

    def forward(self, ctx: LayerKVCache, req: ForwardRequest) -> ForwardResult:
        cfg = self.cfg
        L = len(req.block_tokens)
        active = list(req.active_positions)
        n = len(active)
        offset = ctx.committed_length
        if offset + L > cfg.max_positions:
            raise ConfigError("sequence exceeds the position embedding table")
        tokens = np.array(req.block_tokens, dtype=np.int64)
        # inactive positions only matter as attention context for active queries
        inactive = [p for p in range(L) if p not in set(active)] if active else []
        cached = {p: ctx.get(p) for p in inactive}

        d = cfg.hidden_dim
        act_tokens = tokens[active]
        is_mask = list(act_tokens == cfg.mask_id)
        x = self.token_emb[act_tokens] + self.pos_emb[offset + np.array(active, dtype=np.int64)]
        keys = np.zeros((n, cfg.num_layers, d))
        values = np.zeros((n, cfg.num_layers, d))
        routing = []
        snapshots = {}
        layer_info = {}
        for l, lw in enumerate(self.layers):
            hn = rms_norm(x)
            q, k, v = hn @ lw.wq, hn @ lw.wk, hn @ lw.wv
            keys[:, l], values[:, l] = k, v
            kb = np.zeros((L, d))
            vb = np.zeros((L, d))
            kb[active], vb[active] = k, v
            for p, entry in cached.items():
                kb[p], vb[p] = entry.keys[l], entry.values[l]
            K = np.concatenate([ctx.committed_keys[l], kb])
            V = np.concatenate([ctx.committed_values[l], vb])
            if n:
                attn = softmax_rows(q @ K.T / np.sqrt(d)) @ V
                x = x + attn @ lw.wo

            hn2 = rms_norm(x)
            rl = self.router_logits(l, hn2, active, is_mask)
            records, info = self._route_layer(req, l, rl, is_mask)
            routing.extend(records)
            if info:
                layer_info[l] = info
            moe = np.zeros_like(x)
            row = {p: i for i, p in enumerate(active)}
            by_expert: dict[int, list[tuple[int, float]]] = {}
            for r in records:
                for e, w in zip(r.expert_ids, r.gate_weights):
                    by_expert.setdefault(e, []).append((row[r.token_position], w))
            for e in sorted(by_expert):
                rows = np.array([i for i, _ in by_expert[e]])
                w = np.array([w for _, w in by_expert[e]])[:, None]
                moe[rows] += w * (gelu(hn2[rows] @ lw.up[e]) @ lw.down[e])
            x = x + moe
            if l in req.hidden_layers:
                snapshots[l] = x.copy()

        logits = rms_norm(x) @ self.unembed
        if cfg.planted_gain and n:
            prefix = list(ctx.committed_tokens) + list(req.block_tokens)
            logits = logits + self._planted_bonus(prefix, [offset + p for p in active])
        logits, conf, pred = probabilities_to_outputs(logits.reshape(n, cfg.vocab_size), cfg.mask_id)
        return ForwardResult(tuple(active), logits, conf, pred, routing, keys, values,
                             snapshots, layer_info, req.branch_id)


def _draw(rng: np.random.Generator, rows: int, cols: int, scale: float) -> np.ndarray:
    return rng.standard_normal((rows, cols)) * scale


def build_toy_model(cfg: ModelConfig) -> ToyMoEModel:
    cfg.validate()
    rng = make_rng(cfg.seed, 0)
    d, ff, E = cfg.hidden_dim, cfg.ff_dim, cfg.num_experts
    token_emb = _draw(rng, cfg.vocab_size, d, 1.0)
    pos_emb = _draw(rng, cfg.max_positions, d, 1.0)
    layers = []
    for _ in range(cfg.num_layers):
        wq, wk, wv, wo = (_draw(rng, d, d, d**-0.5) for _ in range(4))
        router = _draw(rng, d, E, d**-0.5)
        up = np.empty((E, d, ff))
        down = np.empty((E, ff, d))
        for e in range(E):
            up[e] = _draw(rng, d, ff, d**-0.5)
            down[e] = _draw(rng, ff, d, ff**-0.5)
        layers.append(MoELayerWeights(wq, wk, wv, wo, router, up, down))
    unembed = _draw(rng, d, cfg.vocab_size, d**-0.5)
    return ToyMoEModel(cfg, token_emb, pos_emb, layers, unembed)
