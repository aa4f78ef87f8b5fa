"""Experiment drivers behind the CLI: run, ablate, sweep and trace diffing.

Every output file is a deterministic function of (config, seeds). Per-seed work
can be farmed out to worker processes; results are gathered back in seed order
so parallel runs write the same bytes as sequential ones.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from moedllm.config import ExperimentConfig, parse_variant
from moedllm.decoder import DecodeOutcome, StallError, decode_block_vanilla, decode_response
from moedllm.metrics import (
    SUMMARY_COLUMNS,
    CostModel,
    RunSummary,
    estimate_cost,
    summarize,
    write_csv,
)
from moedllm.model.base import Model
from moedllm.team import TeamConfig, team_block_decoder
from moedllm.trace import iter_records, outcome_record, write_jsonl

log = logging.getLogger(__name__)


class RunStalled(RuntimeError):
    """A decode stalled with forced acceptance disabled."""


def build_model(config: ExperimentConfig, seed: int) -> Model:
    if config.model_kind == "scripted":
        from moedllm.model.scripted import ScriptSpec, build_scripted_model
        return build_scripted_model(ScriptSpec.from_toml(config.script_path))
    if config.model_kind == "file":
        from moedllm.model.io import load_model
        return load_model(config.weights_path)
    from moedllm.model.toy import build_toy_model
    return build_toy_model(config.model.replace(seed=seed))


@dataclass
class VariantRun:
    variant: str
    seed: int
    summary: RunSummary
    outcome: DecodeOutcome


def decode_variant(model: Model, config: ExperimentConfig, team: TeamConfig | None) -> DecodeOutcome:
    layers = config.instrumentation.hidden_snapshot_layers
    if team is None:
        def block_decoder(m, ctx, cfg, b):
            return decode_block_vanilla(m, ctx, cfg, b, hidden_layers=layers)
    else:
        block_decoder = team_block_decoder(team, layers)
    return decode_response(model, config.decode, block_decoder)


def _run_one(model: Model, config: ExperimentConfig, label: str, team: TeamConfig | None,
             seed: int, trace_dir: Path | None) -> VariantRun:
    try:
        outcome = decode_variant(model, config, team)
    except StallError as err:
        if trace_dir is not None and err.outcome is not None:
            write_jsonl(trace_dir / f"trace_{label}_{seed}.jsonl", err.outcome.traces,
                        outcome_record(err.outcome.response, "stall"))
        raise RunStalled(f"variant {label}, seed {seed}: {err}") from None
    if trace_dir is not None:
        write_jsonl(trace_dir / f"trace_{label}_{seed}.jsonl", outcome.traces,
                    outcome_record(outcome.response, outcome.terminated_by))
    log.info("seed %d %s: %d steps, %s", seed, label, len(outcome.traces), outcome.terminated_by)
    return VariantRun(label, seed, summarize(outcome.traces, model.cfg), outcome)


def _seed_job(config: ExperimentConfig, seed: int, jobs: list[tuple[str, TeamConfig | None, bool]]):
    model = build_model(config, seed)
    out = []
    for label, team, keep in jobs:
        out.append(_run_one(model, config, label, team, seed, config.outputs if keep else None))
    return model.cfg, out


def _map_seeds(config: ExperimentConfig, jobs, parallel: int):
    if parallel > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_seed_job, config, s, jobs) for s in config.seeds]
            return [f.result() for f in futures]
    return [_seed_job(config, s, jobs) for s in config.seeds]


def _cost_model(config: ExperimentConfig, model_cfg) -> CostModel:
    return config.cost or CostModel.default_for(model_cfg)


def _speedup(run: VariantRun, baseline: VariantRun | None, model_cfg, cost: CostModel):
    est = estimate_cost(run.summary, model_cfg, cost, baseline.summary if baseline else None)
    return est.cost_units, est.speedup


def _mean(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def run(config: ExperimentConfig, parallel: int = 1) -> list[dict]:
    """Decode every variant for every seed; write traces and summary.csv.

    Speedups are against vanilla decoding of the same seed, which is decoded
    as a baseline (without writing its trace) when not listed.
    """
    jobs = [(v, parse_variant(v, config.team), True) for v in config.variants]
    if "vanilla" not in config.variants:
        jobs.append(("vanilla", None, False))
    rows = []
    for model_cfg, runs in _map_seeds(config, jobs, parallel):
        cost = _cost_model(config, model_cfg)
        base = next(r for r in runs if r.variant == "vanilla")
        for r in runs:
            if r.variant not in config.variants:
                continue
            units, speedup = _speedup(r, base, model_cfg, cost)
            s = r.summary
            rows.append({"variant": r.variant, "seed": r.seed, "apf": s.apf, "tpf": s.tpf, "apt": s.apt,
                         "total_forwards": s.total_forwards, "total_tokens": s.total_tokens,
                         "cost_units": units, "speedup": speedup})
    write_csv(config.outputs / "summary.csv", SUMMARY_COLUMNS, rows)
    return rows


ABLATION_COLUMNS = ("variant", "seed", "apf", "tpf", "apt", "speedup", "response_match")
REFRESH_COLUMNS = ("refresh", "apf", "tpf", "apt", "speedup", "response_match")


def refresh_label(interval: int | None) -> str:
    return "refresh-free" if interval is None else f"refresh-{interval}"


def ablate(config: ExperimentConfig, parallel: int = 1) -> tuple[list[dict], list[dict]]:
    """Cumulative strategy ablation (ablation.csv) plus an optional refresh table (refresh.csv).

    Traces and summary.csv are written for the requested variants, so a
    single-variant ablation leaves the same files as ``run``. Speedups are
    against the vanilla decoder, which is always decoded as the baseline.
    The refresh table uses delayed caching alone so the interval is the only
    thing that varies between rows.
    """
    variants = list(config.ablate_variants)
    jobs = [(v, parse_variant(v, config.team), True) for v in variants]
    if "vanilla" not in variants:
        jobs.append(("vanilla", None, False))
    dcd_only = config.team.replace(dcd_enabled=True, seh_enabled=False, lac_enabled=False)
    for r in config.refresh_sweep:
        jobs.append((refresh_label(r), dcd_only.replace(refresh_interval=r), False))

    per_seed = _map_seeds(config, jobs, parallel)
    summary_rows, ablation_rows = [], []
    by_label: dict[str, list[tuple[float, float, float, float | None, float]]] = {}
    for model_cfg, runs in per_seed:
        cost = _cost_model(config, model_cfg)
        base = next(r for r in runs if r.variant == "vanilla")
        for r in runs:
            units, speedup = _speedup(r, base, model_cfg, cost)
            s = r.summary
            match = 1.0 if r.outcome.response == base.outcome.response else 0.0
            by_label.setdefault(r.variant, []).append((s.apf, s.tpf, s.apt, speedup, match))
            if r.variant not in variants:
                continue
            summary_rows.append({"variant": r.variant, "seed": r.seed, "apf": s.apf, "tpf": s.tpf,
                                 "apt": s.apt, "total_forwards": s.total_forwards,
                                 "total_tokens": s.total_tokens, "cost_units": units, "speedup": speedup})
            ablation_rows.append({"variant": r.variant, "seed": r.seed, "apf": s.apf, "tpf": s.tpf,
                                  "apt": s.apt, "speedup": speedup, "response_match": match})

    def mean_row(label):
        cols = list(zip(*by_label[label]))
        return {"apf": _mean(cols[0]), "tpf": _mean(cols[1]), "apt": _mean(cols[2]),
                "speedup": _mean(cols[3]), "response_match": _mean(cols[4])}

    for v in variants:
        ablation_rows.append({"variant": v, "seed": "mean", **mean_row(v)})
    write_csv(config.outputs / "summary.csv", SUMMARY_COLUMNS, summary_rows)
    write_csv(config.outputs / "ablation.csv", ABLATION_COLUMNS, ablation_rows)

    refresh_rows = []
    if config.refresh_sweep:
        refresh_rows = [{"refresh": refresh_label(r), **mean_row(refresh_label(r))}
                        for r in config.refresh_sweep]
        write_csv(config.outputs / "refresh.csv", REFRESH_COLUMNS, refresh_rows)
    return ablation_rows, refresh_rows


def pair_label(tau_hot: float, l_hot: int) -> str:
    return f"tau_hot={tau_hot:g} l_hot={l_hot}"


SWEEP_METRICS = ("apf", "tpf", "apt", "speedup")


def sweep(config: ExperimentConfig, parallel: int = 1) -> dict[str, dict[str, float | None]]:
    """Hot-token sensitivity: one column per (tau_hot, l_hot) pair, with DCD and LAC on, SEH off."""
    if not config.sweep_pairs:
        raise ValueError("sweep needs at least one (tau_hot, l_hot) pair")
    base_team = config.team.replace(dcd_enabled=True, lac_enabled=True, seh_enabled=False)
    jobs = [("vanilla", None, False)]
    for tau_hot, l_hot in config.sweep_pairs:
        jobs.append((pair_label(tau_hot, l_hot), base_team.replace(tau_hot=tau_hot, l_hot=l_hot), False))
    per_seed = _map_seeds(config, jobs, parallel)
    collected: dict[str, list[tuple]] = {}
    for model_cfg, runs in per_seed:
        cost = _cost_model(config, model_cfg)
        base = runs[0]
        for r in runs[1:]:
            _, speedup = _speedup(r, base, model_cfg, cost)
            collected.setdefault(r.variant, []).append((r.summary.apf, r.summary.tpf, r.summary.apt, speedup))
    table = {}
    for label, vals in collected.items():
        cols = list(zip(*vals))
        table[label] = {m: _mean(c) for m, c in zip(SWEEP_METRICS, cols)}
    labels = [pair_label(*p) for p in config.sweep_pairs]
    rows = [{"metric": m, **{label: table[label][m] for label in labels}} for m in SWEEP_METRICS]
    write_csv(config.outputs / "sweep.csv", ["metric", *labels], rows)
    return table


def apf_monotone_decreasing(table: dict[str, dict[str, float | None]], labels: Sequence[str]) -> bool:
    apfs = [table[l]["apf"] for l in labels]
    return all(a > b for a, b in zip(apfs, apfs[1:]))


# -- trace diffing ---------------------------------------------------------------------------

STEP_FIELDS = ("active", "accepted", "outputs", "layers", "branches", "committed_branch", "classes",
               "refresh", "cache_reads", "hidden")


@dataclass
class TraceDiff:
    identical: bool
    lines: list[str]

    def report(self) -> str:
        return "\n".join(self.lines) + "\n"


def _load(path: str | Path) -> tuple[list[dict], dict | None]:
    steps, outcome = [], None
    for rec in iter_records(path):
        if rec.get("kind") == "outcome":
            outcome = rec
        else:
            steps.append(rec)
    return steps, outcome


def _acceptance_order(steps: list[dict]) -> list[tuple[int, tuple[int, ...]]]:
    return [(s["block"], tuple(a["pos"] for a in s["accepted"])) for s in steps]


def diff_traces(a_path: str | Path, b_path: str | Path, mode: str = "full") -> TraceDiff:
    """Compare two JSONL trace files.

    ``tokens`` compares only the decoded responses and how decoding ended.
    ``full`` also compares acceptance order, per-step expert sets and every
    other recorded step field. Raises SchemaMismatchError on a version skew.
    """
    if mode not in ("tokens", "full"):
        raise ValueError(f"unknown diff mode {mode!r}")
    a_steps, a_out = _load(a_path)
    b_steps, b_out = _load(b_path)
    lines = []
    a_resp = a_out["response"] if a_out else None
    b_resp = b_out["response"] if b_out else None
    if a_resp != b_resp:
        first = next((i for i, (x, y) in enumerate(zip(a_resp or [], b_resp or [])) if x != y),
                     min(len(a_resp or []), len(b_resp or [])))
        lines.append(f"tokens: responses differ from index {first} "
                     f"(lengths {len(a_resp or [])} vs {len(b_resp or [])})")
    a_end = a_out["terminated_by"] if a_out else None
    b_end = b_out["terminated_by"] if b_out else None
    if a_end != b_end:
        lines.append(f"tokens: terminated_by {a_end} vs {b_end}")
    if mode == "full":
        if len(a_steps) != len(b_steps):
            lines.append(f"steps: {len(a_steps)} vs {len(b_steps)}")
        if _acceptance_order(a_steps) != _acceptance_order(b_steps):
            lines.append("acceptance order differs")
        for i, (x, y) in enumerate(zip(a_steps, b_steps)):
            where = f"step {i} (block {x['block']}, iteration {x['iteration']})"
            if (x["block"], x["iteration"]) != (y["block"], y["iteration"]):
                lines.append(f"{where}: step index differs")
                continue
            ex = [lt["experts"] for lt in x["layers"]]
            ey = [lt["experts"] for lt in y["layers"]]
            if ex != ey:
                layers = [l for l, (p, q) in enumerate(zip(ex, ey)) if p != q]
                lines.append(f"{where}: expert sets differ at layers {layers}")
            for key in STEP_FIELDS:
                if key == "layers":
                    continue
                if x.get(key) != y.get(key):
                    if key == "active":
                        lines.append(f"{where}: active positions {x['active']} vs {y['active']}")
                    else:
                        lines.append(f"{where}: {key} differs")
            if ex == ey and x["layers"] != y["layers"]:
                lines.append(f"{where}: routing records differ")
    identical = not lines
    if identical:
        lines.append(f"identical ({mode})")
    return TraceDiff(identical, lines)
