"""Expert-activation accounting and trace analyses.

APF is the mean over forward passes of the layer-averaged count of distinct
activated experts; TPF is accepted tokens per forward pass; APT = APF / TPF.
A speculative iteration counts as one forward pass whose experts are the
union across its branches.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from moedllm.model.config import ModelConfig
from moedllm.numerics import cosine_similarity
from moedllm.trace import DECODED_ROLES, StepTrace


class InstrumentationError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class RunSummary:
    apf: float
    tpf: float
    apt: float
    total_forwards: int
    total_tokens: int
    num_layers: int
    expert_activations: int  # sum over forwards and layers of distinct experts
    active_positions: int  # sum over forwards of active positions times branches
    model_signature: tuple | None = None
    cost_units: float | None = None


def summarize(traces: Sequence[StepTrace], model_cfg: ModelConfig | None = None) -> RunSummary:
    if not traces:
        raise ValueError("cannot summarize an empty trace list")
    num_layers = len(traces[0].layers)
    per_forward = []
    activations = 0
    active = 0
    tokens = 0
    for t in traces:
        counts = [len(lt.experts) for lt in t.layers]
        per_forward.append(sum(counts) / len(counts))
        activations += sum(counts)
        active += len(t.active_positions) * t.num_branches
        tokens += len(t.accepted)
    apf = math.fsum(per_forward) / len(per_forward)
    tpf = tokens / len(traces)
    if tokens == 0:
        warnings.warn("no tokens accepted; APT is undefined", RuntimeWarning, stacklevel=2)
        apt = float("nan")
    else:
        apt = apf / tpf
    return RunSummary(apf, tpf, apt, len(traces), tokens, num_layers, activations, active,
                      model_cfg.signature() if model_cfg is not None else None)


def apt_from(apf: float, tpf: float) -> float:
    return apf / tpf


@dataclass(frozen=True)
class CostModel:
    expert_param_cost: float
    attention_token_cost: float
    shared_cost: float

    def __post_init__(self) -> None:
        if min(self.expert_param_cost, self.attention_token_cost, self.shared_cost) < 0:
            raise ValueError("cost coefficients must be >= 0")

    @classmethod
    def default_for(cls, cfg: ModelConfig) -> "CostModel":
        d = cfg.hidden_dim
        expert = 2 * d * cfg.ff_dim
        # projections (4 d^2 multiply-adds) plus scores and mixing over one block of keys
        attention = 2 * (4 * d * d + 2 * d * cfg.block_size)
        shared = cfg.num_layers * (4 * d * d + d * cfg.num_experts) + 2 * cfg.vocab_size * d
        return cls(float(expert), float(attention), float(shared))

    def scaled(self, factor: float) -> "CostModel":
        return CostModel(self.expert_param_cost * factor, self.attention_token_cost * factor,
                         self.shared_cost * factor)


@dataclass(frozen=True)
class CostEstimate:
    cost_units: float
    speedup: float | None = None
    baseline_cost_units: float | None = None


def _cost(summary: RunSummary, cost: CostModel) -> float:
    return (summary.total_forwards * cost.shared_cost
            + summary.expert_activations * cost.expert_param_cost
            + summary.num_layers * summary.active_positions * cost.attention_token_cost)


def estimate_cost(summary: RunSummary, model_cfg: ModelConfig, cost: CostModel | None = None,
                  baseline: RunSummary | None = None) -> CostEstimate:
    cost = cost or CostModel.default_for(model_cfg)
    for s in (summary, baseline):
        if s is None:
            continue
        if s.model_signature is not None and s.model_signature != model_cfg.signature():
            raise ComparisonError("summary was produced by a different model configuration")
        if s.num_layers != model_cfg.num_layers:
            raise ComparisonError("summary layer count does not match the model configuration")
    units = _cost(summary, cost)
    if baseline is None:
        return CostEstimate(units)
    base = _cost(baseline, cost)
    return CostEstimate(units, base / units if units else float("inf"), base)


@dataclass(frozen=True)
class TimelinePoint:
    block_index: int
    iteration: int
    total_experts: int
    decoded_contrib: int
    masked_contrib: int


def expert_timeline(traces: Sequence[StepTrace], layers: Iterable[int]) -> dict[int, list[TimelinePoint]]:
    """Per-layer series of distinct experts and their decoded/masked attribution.

    Experts touched by both sides count in both contributions, so
    ``decoded_contrib + masked_contrib >= total_experts``.
    """
    out = {}
    for layer in layers:
        series = []
        for t in traces:
            try:
                lt = t.layer(layer)
            except KeyError:
                raise ValueError(f"layer {layer} absent from trace") from None
            series.append(TimelinePoint(t.block_index, t.iteration, len(lt.experts),
                                        len(lt.decoded_experts()), len(lt.masked_experts())))
        out[layer] = series
    return out


def routing_histogram(trace: StepTrace, layer: int, num_experts: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert token counts in the committed branch: (decoded series, masked series)."""
    decoded = np.zeros(num_experts, dtype=np.int64)
    masked = np.zeros(num_experts, dtype=np.int64)
    for r in trace.layer(layer).routes:
        if r.branch != trace.committed_branch:
            continue
        target = decoded if r.role in DECODED_ROLES else masked
        for e in r.experts:
            target[e] += 1
    return decoded, masked


def concentration(counts: np.ndarray, top: int = 4) -> float:
    """Share of all routes that land on the ``top`` busiest experts."""
    total = counts.sum()
    if total == 0:
        return 0.0
    return float(np.sort(counts)[::-1][:top].sum() / total)


@dataclass
class SimilarityMap:
    block_index: int
    similarity: np.ndarray  # (L, T-1); nan where a position was not recomputed at t or t+1
    accepted_at: list[int | None]
    iterations: int


def hidden_similarity(traces: Sequence[StepTrace], layer: int) -> dict[int, SimilarityMap]:
    """Cosine similarity of each position's hidden state between consecutive iterations."""
    blocks: dict[int, list[StepTrace]] = {}
    for t in traces:
        blocks.setdefault(t.block_index, []).append(t)
    out = {}
    for b, steps in sorted(blocks.items()):
        steps = sorted(steps, key=lambda t: t.iteration)
        for t in steps:
            if t.hidden is None or layer not in t.hidden:
                raise InstrumentationError(f"no hidden snapshots for layer {layer} in block {b}")
        L = max(max(t.active_positions, default=-1) for t in steps) + 1
        L = max(L, max((a.position for t in steps for a in t.accepted), default=-1) + 1)
        T = len(steps)
        sim = np.full((L, max(T - 1, 0)), np.nan)
        for i in range(T - 1):
            h0, h1 = steps[i].hidden[layer], steps[i + 1].hidden[layer]
            for p in range(L):
                if p in h0 and p in h1:
                    sim[p, i] = cosine_similarity(h0[p], h1[p])
        accepted_at: list[int | None] = [None] * L
        for t in steps:
            for a in t.accepted:
                accepted_at[a.position] = t.iteration
        out[b] = SimilarityMap(b, sim, accepted_at, T)
    return out


def min_similarity_at_acceptance(maps: Mapping[int, SimilarityMap]) -> tuple[int, int]:
    """Count positions whose lowest step similarity falls on their acceptance step.

    Only positions accepted before a block's last iteration are eligible.
    Returns (hits, eligible).
    """
    hits = eligible = 0
    for m in maps.values():
        for p, a in enumerate(m.accepted_at):
            if a is None or a >= m.iterations - 1:
                continue
            row = m.similarity[p]
            if np.all(np.isnan(row)):
                continue
            eligible += 1
            if int(np.nanargmin(row)) == a:
                hits += 1
    return hits, eligible


SUMMARY_COLUMNS = ("variant", "seed", "apf", "tpf", "apt", "total_forwards", "total_tokens",
                   "cost_units", "speedup")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.9g}"
    if v is None:
        return ""
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row.get(c)) for c in columns])


@dataclass
class Aggregate:
    apf: float
    tpf: float
    apt: float
    speedup: float | None
    n: int = 0
    extra: dict = field(default_factory=dict)


def aggregate(summaries: Sequence[RunSummary], speedups: Sequence[float] | None = None) -> Aggregate:
    apf = float(np.mean([s.apf for s in summaries]))
    tpf = float(np.mean([s.tpf for s in summaries]))
    apt = float(np.mean([s.apt for s in summaries]))
    sp = float(np.mean(speedups)) if speedups else None
    return Aggregate(apf, tpf, apt, sp, len(summaries))
