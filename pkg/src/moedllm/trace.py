"""StepTrace: the per-iteration instrumentation record and its JSON-lines form.

One line per decoding iteration (``"kind": "step"``) followed by one
``"kind": "outcome"`` line per decode. Optional fields are omitted when they
carry no information (single branch, no cache reads, no classification), so
a strategy that is configured but inert serialises exactly like vanilla.
Floats are written with 9 significant digits.

Step line fields::

    schema_version, kind, block, iteration,
    active            positions computed this pass (same for every branch)
    accepted          [{pos, token, conf, forced?, speculated?, verify_branch?}]
    outputs           per branch: [[pos, prediction, confidence], ...] for MASK inputs
    layers            [{layer, experts, split: {role: [...]},
                        routes: [[branch, pos, role, [experts], [weights], restricted]],
                        e_a?: [[branch, [experts]]], lac_fallback?: [branch, ...]}]
    branches?         per branch: [[pos, token], ...] speculations (branch 0 is [])
    committed_branch?
    classes?          {hot: [...], cold: [...]}
    refresh?          true when a scheduled full pass replaced cache reads
    cache_reads?      positions served from the intra-block cache
    hidden?           {layer: [[pos, [values...]], ...]} from the committed branch

Roles: ``decoded`` (accepted two or more iterations ago), ``new`` (accepted in
the previous iteration), ``hot``, ``cold``, ``masked`` (unclassified MASK
input) and ``spec`` (speculated input in a branch).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

SCHEMA_VERSION = 1

DECODED_ROLES = frozenset({"decoded", "new"})
MASKED_ROLES = frozenset({"hot", "cold", "masked", "spec"})


class SchemaMismatchError(ValueError):
    pass


def fmt(x: float) -> float:
    return float(f"{float(x):.9g}")


@dataclass
class Accepted:
    position: int
    token: int
    confidence: float
    forced: bool = False
    speculated: bool = False
    verify_branch: int | None = None

    def to_dict(self) -> dict:
        d = {"pos": self.position, "token": self.token, "conf": fmt(self.confidence)}
        if self.forced:
            d["forced"] = True
        if self.speculated:
            d["speculated"] = True
            d["verify_branch"] = self.verify_branch
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Accepted":
        return cls(d["pos"], d["token"], d["conf"], d.get("forced", False),
                   d.get("speculated", False), d.get("verify_branch"))


@dataclass
class Route:
    branch: int
    position: int
    role: str
    experts: tuple[int, ...]
    weights: tuple[float, ...]
    restricted: bool

    def to_list(self) -> list:
        return [self.branch, self.position, self.role, list(self.experts),
                [fmt(w) for w in self.weights], self.restricted]

    @classmethod
    def from_list(cls, v: list) -> "Route":
        return cls(v[0], v[1], v[2], tuple(v[3]), tuple(v[4]), v[5])


@dataclass
class LayerTrace:
    layer: int
    routes: list[Route]
    e_a: dict[int, tuple[int, ...]] = field(default_factory=dict)
    lac_fallback: tuple[int, ...] = ()

    @property
    def experts(self) -> set[int]:
        return {e for r in self.routes for e in r.experts}

    def split(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {}
        for r in self.routes:
            out.setdefault(r.role, set()).update(r.experts)
        return out

    def decoded_experts(self) -> set[int]:
        return {e for r in self.routes if r.role in DECODED_ROLES for e in r.experts}

    def masked_experts(self) -> set[int]:
        return {e for r in self.routes if r.role in MASKED_ROLES for e in r.experts}

    def to_dict(self) -> dict:
        d = {
            "layer": self.layer,
            "experts": sorted(self.experts),
            "split": {role: sorted(s) for role, s in sorted(self.split().items())},
            "routes": [r.to_list() for r in self.routes],
        }
        if self.e_a:
            d["e_a"] = [[b, sorted(s)] for b, s in sorted(self.e_a.items())]
        if self.lac_fallback:
            d["lac_fallback"] = sorted(self.lac_fallback)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerTrace":
        return cls(d["layer"], [Route.from_list(r) for r in d["routes"]],
                   {b: tuple(s) for b, s in d.get("e_a", [])}, tuple(d.get("lac_fallback", ())))


@dataclass
class StepTrace:
    block_index: int
    iteration: int
    active_positions: tuple[int, ...]
    accepted: list[Accepted]
    outputs: list[list[tuple[int, int, float]]]
    layers: list[LayerTrace]
    branches: list[tuple[tuple[int, int], ...]] = field(default_factory=lambda: [()])
    committed_branch: int = 0
    classes: dict[str, tuple[int, ...]] | None = None
    refresh: bool = False
    cache_reads: tuple[int, ...] = ()
    hidden: dict[int, dict[int, tuple[float, ...]]] | None = None

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def accepted_positions(self) -> list[int]:
        return [a.position for a in self.accepted]

    def layer(self, layer: int) -> LayerTrace:
        for lt in self.layers:
            if lt.layer == layer:
                return lt
        raise KeyError(layer)

    def distinct_experts(self, layer: int) -> int:
        return len(self.layer(layer).experts)

    def output(self, branch: int, position: int) -> tuple[int, float] | None:
        for p, pred, conf in self.outputs[branch]:
            if p == position:
                return pred, conf
        return None

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": "step",
            "block": self.block_index,
            "iteration": self.iteration,
            "active": list(self.active_positions),
            "accepted": [a.to_dict() for a in self.accepted],
            "outputs": [[[p, pred, fmt(c)] for p, pred, c in out] for out in self.outputs],
            "layers": [lt.to_dict() for lt in self.layers],
        }
        if len(self.branches) > 1:
            d["branches"] = [[list(s) for s in b] for b in self.branches]
            d["committed_branch"] = self.committed_branch
        if self.classes is not None:
            d["classes"] = {k: list(v) for k, v in sorted(self.classes.items())}
        if self.refresh:
            d["refresh"] = True
        if self.cache_reads:
            d["cache_reads"] = list(self.cache_reads)
        if self.hidden is not None:
            d["hidden"] = {str(l): [[p, [fmt(x) for x in vec]] for p, vec in sorted(rows.items())]
                           for l, rows in sorted(self.hidden.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "StepTrace":
        check_schema(d)
        branches = [tuple(tuple(s) for s in b) for b in d.get("branches", [[]])]
        hidden = None
        if "hidden" in d:
            hidden = {int(l): {p: tuple(vec) for p, vec in rows} for l, rows in d["hidden"].items()}
        classes = None
        if "classes" in d:
            classes = {k: tuple(v) for k, v in d["classes"].items()}
        return cls(
            block_index=d["block"], iteration=d["iteration"], active_positions=tuple(d["active"]),
            accepted=[Accepted.from_dict(a) for a in d["accepted"]],
            outputs=[[tuple(o) for o in out] for out in d["outputs"]],
            layers=[LayerTrace.from_dict(lt) for lt in d["layers"]],
            branches=branches, committed_branch=d.get("committed_branch", 0), classes=classes,
            refresh=d.get("refresh", False), cache_reads=tuple(d.get("cache_reads", ())), hidden=hidden,
        )


def check_schema(d: dict) -> None:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"trace schema_version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")


def outcome_record(response: Iterable[int], terminated_by: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "outcome", "response": list(response),
            "terminated_by": terminated_by}


def write_jsonl(path: str | Path, traces: Iterable[StepTrace], outcome: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
        if outcome is not None:
            fh.write(json.dumps(outcome, separators=(",", ":")) + "\n")


def iter_records(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                check_schema(rec)
                yield rec


def read_jsonl(path: str | Path) -> tuple[list[StepTrace], dict | None]:
    steps, outcome = [], None
    for rec in iter_records(path):
        if rec["kind"] == "step":
            steps.append(StepTrace.from_dict(rec))
        elif rec["kind"] == "outcome":
            outcome = rec
    return steps, outcome


def serialize(traces: Iterable[StepTrace]) -> str:
    return "".join(t.to_json() + "\n" for t in traces)
