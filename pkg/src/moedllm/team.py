"""Delayed caching, speculative exploration and limited activation on top of block decoding.

Each strategy is toggled independently through :class:`TeamConfig`; with all
three off :func:`decode_block_team` follows exactly the vanilla code path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from moedllm.decoder import (
    BlockState,
    DecodeConfig,
    StallError,
    accept_step,
    build_trace,
    force_accept,
    token_roles,
)
from moedllm.model.base import ForwardRequest, ForwardResult, Model
from moedllm.model.cache import LayerKVCache
from moedllm.model.routing import RoutingRecord, route_logits
from moedllm.numerics import top_k
from moedllm.trace import Accepted, StepTrace


class VerificationInputError(ValueError):
    pass


@dataclass(frozen=True)
class TeamConfig:
    dcd_enabled: bool = False
    refresh_interval: int | None = None
    seh_enabled: bool = False
    num_branches: int = 4
    tau_hot: float = 0.7
    l_hot: int = 3
    lac_enabled: bool = False
    e_a_mode: str = "union"  # "union" | "aggregate"

    def __post_init__(self) -> None:
        if self.num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        if self.l_hot < 1:
            raise ValueError("l_hot must be >= 1")
        if not 0 < self.tau_hot < 1:
            raise ValueError("tau_hot must lie in (0, 1)")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1 or None")
        if self.e_a_mode not in ("union", "aggregate"):
            raise ValueError(f"unknown e_a_mode {self.e_a_mode!r}")

    @classmethod
    def full(cls, **overrides) -> "TeamConfig":
        return cls(dcd_enabled=True, seh_enabled=True, lac_enabled=True, **overrides)

    def replace(self, **changes) -> "TeamConfig":
        return dataclasses.replace(self, **changes)

    def check_against(self, decode: DecodeConfig) -> None:
        if not self.tau_hot < decode.tau:
            raise ValueError("tau_hot must be below the acceptance threshold tau")

    @property
    def classifies(self) -> bool:
        """Whether hot/cold classes influence any decision."""
        return self.lac_enabled or (self.seh_enabled and self.num_branches > 1)


@dataclass(frozen=True)
class TokenClasses:
    hot: tuple[int, ...]
    cold: tuple[int, ...]
    newly_accepted: tuple[int, ...] = ()
    cached: tuple[int, ...] = ()

    def masked_map(self) -> dict[int, str]:
        out = {p: "hot" for p in self.hot}
        out.update({p: "cold" for p in self.cold})
        return out


@dataclass(frozen=True)
class BranchSet:
    branches: tuple[tuple[tuple[int, int], ...], ...] = ((),)
    candidates: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.branches)

    def speculation(self, i: int) -> tuple[int, int]:
        """The (position, token) pair that branch ``i`` adds over branch ``i - 1``."""
        return self.branches[i][-1]


@dataclass(frozen=True)
class VerificationOutcome:
    longest_valid_prefix: int
    confirmed_speculations: tuple[tuple[int, int], ...] = ()

    @property
    def committed_branch(self) -> int:
        return self.longest_valid_prefix


def classify_masked(state: BlockState, cfg: TeamConfig, iteration: int | None = None) -> TokenClasses:
    """Hot if the last confidence beats ``tau_hot`` or the nearest decoded token is closer than ``l_hot``.

    A block with nothing decoded yet seeds positions ``0 .. l_hot - 1`` as hot,
    anchored on the previous block's final token.
    """
    decoded = state.decoded_positions()
    hot, cold = [], []
    for k in state.masked_positions():
        if state.confidence_last[k] > cfg.tau_hot:
            hot.append(k)
        elif decoded:
            (hot if min(abs(k - j) for j in decoded) < cfg.l_hot else cold).append(k)
        else:
            (hot if k < cfg.l_hot else cold).append(k)
    newly, cached = (), ()
    if iteration is not None:
        newly = tuple(state.newly_accepted(iteration))
        cached = tuple(p for p in decoded if p not in newly)
    return TokenClasses(tuple(hot), tuple(cold), newly, cached)


def dcd_active_positions(state: BlockState, iteration: int, cfg: TeamConfig) -> tuple[list[int], bool]:
    """Positions to compute under delayed caching, and whether this is a scheduled full refresh."""
    L = state.size
    if not cfg.dcd_enabled:
        return list(range(L)), False
    if cfg.refresh_interval is not None and iteration > 0 and iteration % cfg.refresh_interval == 0:
        return list(range(L)), True
    active = set(state.masked_positions()) | set(state.newly_accepted(iteration))
    return sorted(active), False


def seh_build_branches(prev_result: ForwardResult, classes: TokenClasses, cfg: TeamConfig,
                       tau: float) -> BranchSet:
    """Cumulative-prefix branches over hot candidates ranked by previous confidence."""
    if not cfg.seh_enabled or cfg.num_branches == 1:
        return BranchSet()
    cands = [p for p in classes.hot if p in prev_result and prev_result.confidence(p) <= tau]
    cands.sort(key=lambda p: (-prev_result.confidence(p), p))
    cands = cands[:cfg.num_branches - 1]
    branches = [()]
    for p in cands:
        branches.append(branches[-1] + ((p, prev_result.prediction(p)),))
    return BranchSet(tuple(branches), tuple(cands))


def seh_verify(results: Sequence[ForwardResult], branches: BranchSet, tau: float) -> VerificationOutcome:
    """Speculation i is confirmed by branch i-1, where its position is still masked."""
    if len(results) != len(branches):
        raise VerificationInputError(f"{len(results)} results for {len(branches)} branches")
    m = 0
    for i in range(1, len(branches)):
        p, tok = branches.speculation(i)
        r = results[i - 1]
        if p in r and r.prediction(p) == tok and r.confidence(p) > tau:
            m = i
        else:
            break
    return VerificationOutcome(m, branches.branches[m])


def lac_two_round_route(
    model: Model,
    layer: int,
    router_logits: Mapping[int, np.ndarray],
    roles: Mapping[int, str],
    cfg: TeamConfig,
) -> tuple[list[RoutingRecord], tuple[int, ...], bool]:
    """Route newly accepted, hot and speculated tokens freely, then confine cold tokens.

    Returns the concatenated records (round one, round two, then any other
    active decoded tokens, which route freely but do not feed the necessary
    set), the necessary expert set, and whether the cold round fell back to
    unrestricted routing because that set was empty.
    """
    k = model.cfg.experts_per_token
    first = [p for p in sorted(router_logits) if roles[p] in ("new", "hot", "spec")]
    cold = [p for p in sorted(router_logits) if roles[p] == "cold"]
    rest = [p for p in sorted(router_logits) if p not in set(first) | set(cold)]

    records = []
    for p in first:
        ids, w = route_logits(router_logits[p], k)
        records.append(RoutingRecord(layer, p, tuple(ids), tuple(w)))
    if cfg.e_a_mode == "union":
        e_a = sorted({e for r in records for e in r.expert_ids})
    else:
        mass = np.zeros(model.cfg.num_experts)
        for r in records:
            for e, w in zip(r.expert_ids, r.gate_weights):
                mass[e] += w
        e_a = sorted(top_k(mass, k)) if records else []

    fallback = bool(cold) and not e_a
    for p in cold:
        if fallback:
            ids, w = route_logits(router_logits[p], k)
            records.append(RoutingRecord(layer, p, tuple(ids), tuple(w)))
        else:
            ids, w = route_logits(router_logits[p], k, e_a)
            records.append(RoutingRecord(layer, p, tuple(ids), tuple(w), restricted=True))
    for p in rest:
        ids, w = route_logits(router_logits[p], k)
        records.append(RoutingRecord(layer, p, tuple(ids), tuple(w)))
    return records, tuple(e_a), fallback


def make_lac_policy(model: Model, roles: Mapping[int, str], cfg: TeamConfig):
    def policy(layer, positions, logits, input_is_mask):
        rl = {p: logits[i] for i, p in enumerate(positions)}
        records, e_a, fallback = lac_two_round_route(model, layer, rl, roles, cfg)
        return records, {"e_a": e_a, "fallback": fallback}
    return policy


@dataclass
class _RefreshTracker:
    reads_since_full_pass: int = 0

    def observe(self, n_reads: int, full_pass: bool, scheduled_refresh: bool) -> bool:
        # a refresh is only meaningful once the cache has actually been relied on
        flagged = scheduled_refresh and self.reads_since_full_pass > 0
        self.reads_since_full_pass = 0 if full_pass else self.reads_since_full_pass + n_reads
        return flagged


def decode_block_team(
    model: Model,
    ctx: LayerKVCache,
    cfg: DecodeConfig,
    team: TeamConfig,
    block_index: int,
    hidden_layers: Sequence[int] = (),
) -> tuple[BlockState, list[StepTrace]]:
    team.check_against(cfg)
    L = cfg.block_size
    mask_id = model.cfg.mask_id
    state = BlockState.fresh(L, mask_id)
    traces: list[StepTrace] = []
    prev_result: ForwardResult | None = None
    tracker = _RefreshTracker()
    iteration = 0
    while state.masked_positions():
        if iteration >= cfg.max_iterations_per_block:
            raise StallError(f"block {block_index} did not complete in {iteration} iterations")

        classes = classify_masked(state, team, iteration) if team.classifies else None
        class_map = classes.masked_map() if classes is not None else None
        active, scheduled = dcd_active_positions(state, iteration, team)
        cache_reads = [p for p in state.decoded_positions() if p not in set(active)]
        refresh = tracker.observe(len(cache_reads), len(active) == L, scheduled)

        if team.seh_enabled and prev_result is not None and classes is not None:
            branches = seh_build_branches(prev_result, classes, team, cfg.tau)
        else:
            branches = BranchSet()

        requests, results = [], []
        for b, specs in enumerate(branches.branches):
            tokens = list(state.tokens)
            for p, tok in specs:
                tokens[p] = tok
            roles = token_roles(state, iteration, class_map, [p for p, _ in specs])
            policy = make_lac_policy(model, roles, team) if team.lac_enabled else None
            req = ForwardRequest(tuple(tokens), tuple(active), block_index, iteration, branch_id=b,
                                 roles=roles, routing_policy=policy, hidden_layers=tuple(hidden_layers))
            requests.append(req)
            results.append(model.forward(ctx, req))

        if len(branches) > 1:
            outcome = seh_verify(results, branches, cfg.tau)
        else:
            outcome = VerificationOutcome(0)
        m = outcome.committed_branch
        chosen = results[m]

        records: list[Accepted] = []
        staged = state.copy()
        for i, (p, tok) in enumerate(outcome.confirmed_speculations, start=1):
            staged.accept(p, tok, iteration)
            staged.confidence_last[p] = results[i - 1].confidence(p)
            staged.prediction_last[p] = tok
            records.append(Accepted(p, tok, results[i - 1].confidence(p), speculated=True,
                                    verify_branch=i - 1))
        new, natural = accept_step(chosen, staged, cfg.tau, iteration)
        records += [Accepted(p, new.tokens[p], chosen.confidence(p)) for p in natural]
        if not records and cfg.force_accept_on_stall:
            new, p = force_accept(chosen, new, iteration)
            records = [Accepted(p, new.tokens[p], chosen.confidence(p), forced=True)]
        records.sort(key=lambda a: a.position)

        if team.dcd_enabled:
            for p in active:
                a = state.accepted_at[p]
                if a is not None:
                    ctx.put(p, *chosen.kv(p), grace_pending=False)
                elif new.accepted_at[p] == iteration:
                    ctx.put(p, *chosen.kv(p), grace_pending=True)

        traces.append(build_trace(
            block_index, iteration, requests, results, records, model.cfg.num_layers, mask_id,
            committed_branch=m, branches=[tuple(b) for b in branches.branches], classes=class_map,
            refresh=refresh, cache_reads=cache_reads, hidden_layers=hidden_layers,
        ))
        state = new
        prev_result = chosen
        iteration += 1
    model.commit(ctx, state.tokens, block_index)
    return state, traces


def team_block_decoder(team: TeamConfig, hidden_layers: Sequence[int] = ()):
    def decoder(model, ctx, cfg, block_index):
        return decode_block_team(model, ctx, cfg, team, block_index, hidden_layers)
    return decoder
