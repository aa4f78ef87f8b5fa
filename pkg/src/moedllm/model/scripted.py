"""Deterministic scripted backend.

A script fixes, per (block, iteration) and per position, the predicted token,
its confidence and optionally the experts chosen at each layer. Hidden states
and key/value vectors are fixed per position, so caching is exactly
transparent. An entry may name ``requires`` positions: unless all of them are
decoded (non-MASK) in the forward's input, the entry reports
``confidence_unmet`` instead of ``confidence``. This lets a script express
context-dependent acceptance such as a left-to-right chain.

Script files are TOML::

    vocab_size = 16
    block_size = 4
    num_layers = 2
    num_experts = 8
    experts_per_token = 2
    hidden_dim = 4          # optional
    max_blocks = 1          # optional
    filler_token = 0        # optional
    masked_experts = [[0, 1], [0, 1]]    # optional per-layer default for MASK inputs
    decoded_experts = [[2, 3], [2, 3]]   # optional per-layer default for decoded inputs

    [[step]]
    block = 0
    iteration = 0
    [[step.entry]]
    position = 0
    token = 5
    confidence = 0.99
    experts = [[1, 2], [3, 4]]           # optional, per layer
    router_logits = [[...], [...]]       # optional, per layer, overrides experts
    requires = [1]                       # optional
    confidence_unmet = 0.1               # optional

The forward reports the scripted confidences verbatim; logits are the log of
a distribution that puts that confidence on the scripted token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from moedllm.model.base import MASK_LOGIT, ForwardRequest, ForwardResult, Model
from moedllm.model.cache import LayerKVCache
from moedllm.model.config import ConfigError, ModelConfig
from moedllm.tomlcompat import tomllib


class ScriptUnderrunError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScriptEntry:
    position: int
    token: int
    confidence: float
    experts: tuple[tuple[int, ...], ...] | None = None
    router_logits: tuple[tuple[float, ...], ...] | None = None
    requires: tuple[int, ...] = ()
    confidence_unmet: float = 0.0


@dataclass
class ScriptSpec:
    vocab_size: int
    block_size: int
    num_layers: int
    num_experts: int
    experts_per_token: int
    hidden_dim: int = 4
    max_blocks: int = 1
    filler_token: int = 0
    masked_experts: tuple[tuple[int, ...], ...] | None = None
    decoded_experts: tuple[tuple[int, ...], ...] | None = None
    steps: dict[tuple[int, int], dict[int, ScriptEntry]] = field(default_factory=dict)

    def add(self, block: int, iteration: int, entries: Sequence[ScriptEntry]) -> "ScriptSpec":
        step = self.steps.setdefault((block, iteration), {})
        for e in entries:
            step[e.position] = e
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, hidden_dim=self.hidden_dim,
                           num_layers=self.num_layers, num_experts=self.num_experts,
                           experts_per_token=self.experts_per_token, block_size=self.block_size,
                           max_blocks=self.max_blocks)

    @classmethod
    def from_toml(cls, path: str | Path) -> "ScriptSpec":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScriptSpec":
        raw = dict(raw)
        steps_raw = raw.pop("step", [])
        known = {"vocab_size", "block_size", "num_layers", "num_experts", "experts_per_token",
                 "hidden_dim", "max_blocks", "filler_token", "masked_experts", "decoded_experts"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown script key(s): {sorted(unknown)}")
        for key in ("masked_experts", "decoded_experts"):
            if key in raw:
                raw[key] = tuple(tuple(int(e) for e in layer) for layer in raw[key])
        spec = cls(**raw)
        for step in steps_raw:
            entries = []
            for e in step.get("entry", []):
                entries.append(ScriptEntry(
                    position=int(e["position"]), token=int(e["token"]),
                    confidence=float(e["confidence"]),
                    experts=(tuple(tuple(int(x) for x in layer) for layer in e["experts"])
                             if "experts" in e else None),
                    router_logits=(tuple(tuple(float(x) for x in layer) for layer in e["router_logits"])
                                   if "router_logits" in e else None),
                    requires=tuple(int(x) for x in e.get("requires", ())),
                    confidence_unmet=float(e.get("confidence_unmet", 0.0)),
                ))
            spec.add(int(step["block"]), int(step["iteration"]), entries)
        return spec


def left_to_right_script(block_size: int, num_blocks: int = 1, *, vocab_size: int = 16,
                         num_layers: int = 2, num_experts: int = 8, experts_per_token: int = 2,
                         high: float = 0.99, low: float = 0.2, token_of=None) -> ScriptSpec:
    """Script in which exactly position ``t`` crosses threshold at iteration ``t``."""
    spec = ScriptSpec(vocab_size, block_size, num_layers, num_experts, experts_per_token,
                      max_blocks=num_blocks)
    token_of = token_of or (lambda b, p: 1 + (b * block_size + p) % (vocab_size - 3))
    for b in range(num_blocks):
        for t in range(block_size):
            spec.add(b, t, [ScriptEntry(p, token_of(b, p), high if p == t else low)
                            for p in range(t, block_size)])
    return spec


class ScriptedModel(Model):
    def __init__(self, script: ScriptSpec):
        self.script = script
        self.cfg = script.model_config()
        k = self.cfg.experts_per_token
        default = tuple(tuple(range(k)) for _ in range(self.cfg.num_layers))
        self._masked_default = script.masked_experts or default
        self._decoded_default = script.decoded_experts or default
        for entries in script.steps.values():
            for e in entries.values():
                if e.token == self.cfg.mask_id:
                    raise ConfigError("a script may not predict MASK")

    def hidden_vector(self, position: int) -> np.ndarray:
        d = self.cfg.hidden_dim
        return np.cos(np.arange(1, d + 1) * (position + 1)) + 1.5

    def _logits_for_choice(self, experts: Sequence[int]) -> np.ndarray:
        logits = np.zeros(self.cfg.num_experts)
        n = len(experts)
        for rank, e in enumerate(experts):
            logits[e] = 2.0 * (n - rank)
        return logits

    def router_logits(self, layer: int, hiddens: np.ndarray, positions: Sequence[int],
                      input_is_mask: Sequence[bool]) -> np.ndarray:
        """Outside a scripted step only the per-layer defaults are known."""
        rows = [self._logits_for_choice((self._masked_default if m else self._decoded_default)[layer])
                for m in input_is_mask]
        return np.array(rows).reshape(len(rows), self.cfg.num_experts)

    def _step_entries(self, req: ForwardRequest) -> dict[int, ScriptEntry]:
        if req.iteration is None:
            return {}
        key = (req.block_index, req.iteration)
        if key not in self.script.steps:
            raise ScriptUnderrunError(f"script has no step for block {key[0]} iteration {key[1]}")
        return self.script.steps[key]

    def forward(self, ctx: LayerKVCache, req: ForwardRequest) -> ForwardResult:
        cfg = self.cfg
        L = len(req.block_tokens)
        active = list(req.active_positions)
        if active:
            for p in range(L):
                if p not in req.active_positions:
                    ctx.get(p)
        entries = self._step_entries(req)
        n = len(active)
        is_mask = [req.block_tokens[p] == cfg.mask_id for p in active]

        conf = np.zeros(n)
        pred = np.full(n, self.script.filler_token, dtype=np.int64)
        for i, p in enumerate(active):
            e = entries.get(p)
            if e is None:
                continue
            pred[i] = e.token
            met = all(req.block_tokens[r] != cfg.mask_id for r in e.requires)
            conf[i] = e.confidence if met else e.confidence_unmet
        logits = np.empty((n, cfg.vocab_size))
        others = cfg.vocab_size - 2
        for i in range(n):
            probs = np.full(cfg.vocab_size, (1.0 - conf[i]) / others)
            probs[pred[i]] = conf[i]
            logits[i] = np.log(np.maximum(probs, 1e-300))
            logits[i, cfg.mask_id] = MASK_LOGIT

        hidden = np.array([self.hidden_vector(p) for p in active]).reshape(n, cfg.hidden_dim)
        routing = []
        layer_info = {}
        for l in range(cfg.num_layers):
            rl = np.empty((n, cfg.num_experts))
            for i, p in enumerate(active):
                e = entries.get(p)
                if e is not None and e.router_logits is not None:
                    rl[i] = e.router_logits[l]
                elif e is not None and e.experts is not None:
                    rl[i] = self._logits_for_choice(e.experts[l])
                else:
                    default = self._masked_default if is_mask[i] else self._decoded_default
                    rl[i] = self._logits_for_choice(default[l])
            records, info = self._route_layer(req, l, rl, is_mask)
            routing.extend(records)
            if info:
                layer_info[l] = info

        keys = np.repeat(hidden[:, None, :], cfg.num_layers, axis=1)
        snapshots = {l: hidden.copy() for l in req.hidden_layers}
        return ForwardResult(tuple(active), logits, conf, pred, routing, keys, keys.copy(),
                             snapshots, layer_info, req.branch_id)


def build_scripted_model(script: ScriptSpec) -> ScriptedModel:
    return ScriptedModel(script)
