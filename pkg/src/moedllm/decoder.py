"""Vanilla block-diffusion decoding: the reference loop the strategies are checked against."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

from moedllm.model.base import ForwardRequest, ForwardResult, Model
from moedllm.model.cache import LayerKVCache
from moedllm.trace import Accepted, LayerTrace, Route, StepTrace


class StallError(RuntimeError):
    def __init__(self, message: str, outcome: "DecodeOutcome | None" = None):
        super().__init__(message)
        self.outcome = outcome


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    tau: float = 0.95
    block_size: int = 32
    max_blocks: int = 4
    max_iterations_per_block: int | None = None
    force_accept_on_stall: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.block_size < 1 or self.max_blocks < 1:
            raise ValueError("block_size and max_blocks must be >= 1")
        if self.max_iterations_per_block is None:
            object.__setattr__(self, "max_iterations_per_block", 4 * self.block_size)

    def replace(self, **changes) -> "DecodeConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class BlockState:
    tokens: list[int]
    masked: list[bool]
    accepted_at: list[int | None]
    confidence_last: list[float]
    prediction_last: list[int | None]
    mask_id: int

    @classmethod
    def fresh(cls, block_size: int, mask_id: int) -> "BlockState":
        return cls([mask_id] * block_size, [True] * block_size, [None] * block_size,
                   [0.0] * block_size, [None] * block_size, mask_id)

    def copy(self) -> "BlockState":
        return BlockState(list(self.tokens), list(self.masked), list(self.accepted_at),
                          list(self.confidence_last), list(self.prediction_last), self.mask_id)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def masked_positions(self) -> list[int]:
        return [p for p, m in enumerate(self.masked) if m]

    def decoded_positions(self) -> list[int]:
        return [p for p, m in enumerate(self.masked) if not m]

    def newly_accepted(self, iteration: int) -> list[int]:
        return [p for p, a in enumerate(self.accepted_at) if a is not None and a == iteration - 1]

    def accept(self, position: int, token: int, iteration: int) -> None:
        if not self.masked[position]:
            raise ValueError(f"position {position} is already decoded")
        if token == self.mask_id:
            raise ValueError("cannot accept MASK")
        self.tokens[position] = token
        self.masked[position] = False
        self.accepted_at[position] = iteration

    def check(self) -> None:
        for p in range(self.size):
            m = self.masked[p]
            if m != (self.tokens[p] == self.mask_id) or m != (self.accepted_at[p] is None):
                raise AssertionError(f"inconsistent block state at position {p}")


@dataclass
class DecodeOutcome:
    response: list[int]
    traces: list[StepTrace]
    terminated_by: str  # "eos" | "max_blocks" | "stall"
    blocks: list[BlockState] = field(default_factory=list)


def accept_step(result: ForwardResult, state: BlockState, tau: float,
                iteration: int = 0) -> tuple[BlockState, list[int]]:
    """Accept every masked position whose confidence strictly exceeds ``tau``."""
    new = state.copy()
    accepted = []
    for p in state.masked_positions():
        if p not in result:
            raise CoverageError(f"forward result does not cover masked position {p}")
        c = result.confidence(p)
        new.confidence_last[p] = c
        new.prediction_last[p] = result.prediction(p)
        if c > tau:
            new.accept(p, result.prediction(p), iteration)
            accepted.append(p)
    return new, accepted


def force_accept(result: ForwardResult, state: BlockState, iteration: int) -> tuple[BlockState, int]:
    """Accept the single most confident masked position (ties: leftmost)."""
    masked = state.masked_positions()
    best = max(masked, key=lambda p: (result.confidence(p), -p))
    new = state.copy()
    new.accept(best, result.prediction(best), iteration)
    return new, best


def token_roles(state: BlockState, iteration: int, classes: dict[int, str] | None = None,
                speculated: Sequence[int] = ()) -> dict[int, str]:
    spec = set(speculated)
    roles = {}
    for p in range(state.size):
        if p in spec:
            roles[p] = "spec"
        elif state.masked[p]:
            roles[p] = classes[p] if classes is not None else "masked"
        elif state.accepted_at[p] == iteration - 1:
            roles[p] = "new"
        else:
            roles[p] = "decoded"
    return roles


def build_trace(
    block_index: int,
    iteration: int,
    requests: Sequence[ForwardRequest],
    results: Sequence[ForwardResult],
    accepted: list[Accepted],
    num_layers: int,
    mask_id: int,
    *,
    committed_branch: int = 0,
    branches: list | None = None,
    classes: dict[int, str] | None = None,
    refresh: bool = False,
    cache_reads: Sequence[int] = (),
    hidden_layers: Sequence[int] = (),
) -> StepTrace:
    layers = []
    for l in range(num_layers):
        routes = []
        e_a = {}
        fallback = []
        for b, (req, res) in enumerate(zip(requests, results)):
            for r in sorted(res.routing_for_layer(l), key=lambda r: r.token_position):
                routes.append(Route(b, r.token_position, req.roles[r.token_position],
                                    r.expert_ids, r.gate_weights, r.restricted))
            info = res.layer_info.get(l)
            if info is not None:
                e_a[b] = tuple(sorted(info["e_a"]))
                if info.get("fallback"):
                    fallback.append(b)
        layers.append(LayerTrace(l, routes, e_a, tuple(fallback)))
    outputs = []
    for req, res in zip(requests, results):
        outputs.append([(p, res.prediction(p), res.confidence(p)) for p in res.positions
                        if req.block_tokens[p] == mask_id])
    hidden = None
    if hidden_layers:
        res = results[committed_branch]
        hidden = {l: {p: tuple(float(x) for x in res.hidden_snapshots[l][i])
                      for i, p in enumerate(res.positions)} for l in hidden_layers}
    class_lists = None
    if classes is not None:
        class_lists = {"hot": tuple(p for p, c in sorted(classes.items()) if c == "hot"),
                       "cold": tuple(p for p, c in sorted(classes.items()) if c == "cold")}
    return StepTrace(
        block_index=block_index, iteration=iteration,
        active_positions=tuple(requests[0].active_positions), accepted=accepted,
        outputs=outputs, layers=layers, branches=branches or [()],
        committed_branch=committed_branch, classes=class_lists, refresh=refresh,
        cache_reads=tuple(cache_reads), hidden=hidden,
    )


def _check_config(model: Model, cfg: DecodeConfig) -> None:
    if cfg.block_size != model.cfg.block_size:
        raise ValueError(f"decode block_size {cfg.block_size} != model block_size {model.cfg.block_size}")
    if cfg.max_blocks > model.cfg.max_blocks:
        raise ValueError("decode max_blocks exceeds the model's position table")


def decode_block_vanilla(
    model: Model,
    ctx: LayerKVCache,
    cfg: DecodeConfig,
    block_index: int,
    hidden_layers: Sequence[int] = (),
) -> tuple[BlockState, list[StepTrace]]:
    L = cfg.block_size
    mask_id = model.cfg.mask_id
    state = BlockState.fresh(L, mask_id)
    traces = []
    iteration = 0
    while state.masked_positions():
        if iteration >= cfg.max_iterations_per_block:
            raise StallError(f"block {block_index} did not complete in {iteration} iterations")
        req = ForwardRequest(tuple(state.tokens), tuple(range(L)), block_index, iteration,
                             roles=token_roles(state, iteration), hidden_layers=tuple(hidden_layers))
        res = model.forward(ctx, req)
        new, accepted = accept_step(res, state, cfg.tau, iteration)
        records = [Accepted(p, new.tokens[p], res.confidence(p)) for p in accepted]
        if not accepted and cfg.force_accept_on_stall:
            new, p = force_accept(res, new, iteration)
            records = [Accepted(p, new.tokens[p], res.confidence(p), forced=True)]
        traces.append(build_trace(block_index, iteration, [req], [res], records,
                                  model.cfg.num_layers, mask_id, hidden_layers=hidden_layers))
        state = new
        iteration += 1
    model.commit(ctx, state.tokens, block_index)
    return state, traces


BlockDecoder = Callable[[Model, LayerKVCache, DecodeConfig, int], tuple[BlockState, list[StepTrace]]]


def decode_response(
    model: Model,
    cfg: DecodeConfig,
    block_decoder: BlockDecoder | None = None,
) -> DecodeOutcome:
    """Decode blocks left to right until a block containing EOS completes or max_blocks."""
    _check_config(model, cfg)
    block_decoder = block_decoder or decode_block_vanilla
    ctx = model.new_cache()
    response: list[int] = []
    traces: list[StepTrace] = []
    blocks = []
    eos = model.cfg.eos_id
    for b in range(cfg.max_blocks):
        try:
            state, block_traces = block_decoder(model, ctx, cfg, b)
        except StallError as err:
            err.outcome = DecodeOutcome(response, traces, "stall", blocks)
            raise
        traces.extend(block_traces)
        blocks.append(state)
        response.extend(state.tokens)
        if eos in state.tokens:
            return DecodeOutcome(response[:response.index(eos)], traces, "eos", blocks)
    return DecodeOutcome(response, traces, "max_blocks", blocks)
