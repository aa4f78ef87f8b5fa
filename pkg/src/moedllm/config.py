"""Experiment configuration files (TOML).

Errors are reported as ``<path>:<line>: <message>`` so a bad key can be found
in a committed config without guessing.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from moedllm.decoder import DecodeConfig
from moedllm.metrics import CostModel
from moedllm.model.config import ModelConfig
from moedllm.team import TeamConfig
from moedllm.tomlcompat import tomllib

OUTPUT_ENV = "MOEDLLM_OUT"

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"} | {"kind", "script", "weights"}
SECTIONS: dict[str, set[str]] = {
    "model": MODEL_KEYS,
    "decode": {"tau", "block_size", "max_blocks", "max_iterations_per_block", "force_accept_on_stall"},
    "team": {"dcd", "refresh_interval", "seh", "num_branches", "tau_hot", "l_hot", "lac", "e_a_mode"},
    "run": {"variants", "seeds", "outputs"},
    "instrumentation": {"hidden_snapshot_layers", "split_accounting"},
    "cost": {"expert_param_cost", "attention_token_cost", "shared_cost"},
    "ablate": {"variants", "refresh_sweep"},
    "sweep": {"pairs"},
}

ABLATION_VARIANTS = ("vanilla", "seh", "seh+dcd", "seh+dcd+lac")


class ExperimentConfigError(ValueError):
    pass


@dataclass
class Instrumentation:
    hidden_snapshot_layers: tuple[int, ...] = ()
    split_accounting: bool = True


@dataclass
class ExperimentConfig:
    model: ModelConfig
    decode: DecodeConfig
    team: TeamConfig
    seeds: list[int]
    outputs: Path
    variants: list[str] = field(default_factory=lambda: ["vanilla", "team"])
    model_kind: str = "toy"
    script_path: Path | None = None
    weights_path: Path | None = None
    instrumentation: Instrumentation = field(default_factory=Instrumentation)
    cost: CostModel | None = None
    ablate_variants: list[str] = field(default_factory=lambda: list(ABLATION_VARIANTS))
    refresh_sweep: list[int | None] = field(default_factory=list)
    sweep_pairs: list[tuple[float, int]] = field(default_factory=list)
    source: Path | None = None


class _Locator:
    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines = text.splitlines()

    def line_of(self, section: str | None, key: str | None = None) -> int:
        start = 0
        if section is not None:
            pat = re.compile(rf"^\s*\[\s*{re.escape(section)}\s*\]")
            for i, line in enumerate(self.lines):
                if pat.match(line):
                    start = i
                    break
            else:
                return 1
            if key is None:
                return start + 1
        pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
        for i in range(start, len(self.lines)):
            if i > start and section is not None and re.match(r"^\s*\[", self.lines[i]):
                break
            if pat.match(self.lines[i]):
                return i + 1
        return start + 1

    def error(self, section: str | None, key: str | None, message: str) -> ExperimentConfigError:
        return ExperimentConfigError(f"{self.path}:{self.line_of(section, key)}: {message}")


def _typed(loc: _Locator, section: str, key: str, value: Any, kind) -> Any:
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not ok:
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise loc.error(section, key, f"[{section}] {key} must be {name}, got {value!r}")
    return value


def _refresh(loc: _Locator, section: str, key: str, value: Any) -> int | None:
    if value == "none":
        return None
    if isinstance(value, int) and not isinstance(value, bool) and value >= 1:
        return value
    raise loc.error(section, key, f"[{section}] {key} must be a positive integer or \"none\", got {value!r}")


_MODEL_TYPES = {
    "vocab_size": int, "hidden_dim": int, "num_layers": int, "num_experts": int,
    "experts_per_token": int, "block_size": int, "max_blocks": int, "clustering_strength": float,
    "band_width": int, "planted_gain": float, "planted_decay": float, "planted_eos_position": int,
    "mask_id": int, "eos_id": int, "kind": str, "script": str, "weights": str,
}


def load_experiment_config(path: str | Path, *, out: str | Path | None = None,
                           seeds: list[int] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ExperimentConfigError(f"{path}: cannot read config: {err}") from None
    loc = _Locator(path, text)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        m = re.search(r"line (\d+)", str(err))
        raise ExperimentConfigError(f"{path}:{m.group(1) if m else 1}: {err}") from None

    for section, body in raw.items():
        if section not in SECTIONS:
            raise loc.error(None, section, f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise loc.error(None, section, f"[{section}] must be a table")
        for key in body:
            if key not in SECTIONS[section]:
                raise loc.error(section, key, f"unknown config key '{key}' in [{section}]")

    base = path.parent
    m_raw = raw.get("model", {})
    kind = _typed(loc, "model", "kind", m_raw.get("kind", "toy"), str)
    if kind not in ("toy", "scripted", "file"):
        raise loc.error("model", "kind", f"[model] kind must be toy, scripted or file, got {kind!r}")
    model_kwargs = {}
    for key, value in m_raw.items():
        if key in ("kind", "script", "weights"):
            continue
        model_kwargs[key] = _typed(loc, "model", key, value, _MODEL_TYPES[key])
    script_path = weights_path = None
    if kind == "scripted":
        if "script" not in m_raw:
            raise loc.error("model", None, "[model] kind = \"scripted\" requires script = <path>")
        script_path = base / _typed(loc, "model", "script", m_raw["script"], str)
        from moedllm.model.scripted import ScriptSpec
        try:
            model_cfg = ScriptSpec.from_toml(script_path).model_config()
        except (OSError, ValueError, KeyError, TypeError, tomllib.TOMLDecodeError) as err:
            raise loc.error("model", "script", f"cannot load script {script_path}: {err}") from None
    elif kind == "file":
        if "weights" not in m_raw:
            raise loc.error("model", None, "[model] kind = \"file\" requires weights = <path>")
        weights_path = base / _typed(loc, "model", "weights", m_raw["weights"], str)
        model_cfg = ModelConfig()
    else:
        try:
            model_cfg = ModelConfig(**model_kwargs)
        except ValueError as err:
            raise loc.error("model", None, f"[model] {err}") from None

    d_raw = raw.get("decode", {})
    d_types = {"tau": float, "block_size": int, "max_blocks": int, "max_iterations_per_block": int,
               "force_accept_on_stall": bool}
    d_kwargs = {k: _typed(loc, "decode", k, v, d_types[k]) for k, v in d_raw.items()}
    if d_kwargs.get("block_size", model_cfg.block_size) != model_cfg.block_size:
        raise loc.error("decode", "block_size", "[decode] block_size must equal [model] block_size")
    d_kwargs["block_size"] = model_cfg.block_size
    d_kwargs.setdefault("max_blocks", model_cfg.max_blocks)
    try:
        decode = DecodeConfig(**d_kwargs)
    except ValueError as err:
        raise loc.error("decode", None, f"[decode] {err}") from None

    t_raw = raw.get("team", {})
    t_types = {"dcd": bool, "seh": bool, "lac": bool, "num_branches": int, "tau_hot": float,
               "l_hot": int, "e_a_mode": str}
    t_kwargs: dict[str, Any] = {}
    for k, v in t_raw.items():
        if k == "refresh_interval":
            t_kwargs["refresh_interval"] = _refresh(loc, "team", k, v)
            continue
        v = _typed(loc, "team", k, v, t_types[k])
        t_kwargs[{"dcd": "dcd_enabled", "seh": "seh_enabled", "lac": "lac_enabled"}.get(k, k)] = v
    try:
        team = TeamConfig(**t_kwargs)
        team.check_against(decode)
    except ValueError as err:
        raise loc.error("team", None, f"[team] {err}") from None

    r_raw = raw.get("run", {})
    variants = _typed(loc, "run", "variants", r_raw.get("variants", ["vanilla", "team"]), list)
    for v in variants:
        try:
            parse_variant(v)
        except ValueError as err:
            raise loc.error("run", "variants", f"[run] {err}") from None
    if seeds is None:
        seeds = _typed(loc, "run", "seeds", r_raw.get("seeds", [0]), list)
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and 0 <= s < 2**64 for s in seeds):
        raise loc.error("run", "seeds", "[run] seeds must be a non-empty list of 64-bit unsigned integers")
    if out is not None:
        outputs = Path(out)
    elif "outputs" in r_raw:
        outputs = base / _typed(loc, "run", "outputs", r_raw["outputs"], str)
    else:
        outputs = Path(os.environ.get(OUTPUT_ENV, "runs"))
    try:
        outputs.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise loc.error("run", "outputs", f"output directory {outputs} is not writable: {err}") from None
    if not os.access(outputs, os.W_OK):
        raise loc.error("run", "outputs", f"output directory {outputs} is not writable")

    i_raw = raw.get("instrumentation", {})
    layers = tuple(_typed(loc, "instrumentation", "hidden_snapshot_layers",
                          i_raw.get("hidden_snapshot_layers", []), list))
    if not all(isinstance(l, int) and 0 <= l < model_cfg.num_layers for l in layers):
        raise loc.error("instrumentation", "hidden_snapshot_layers",
                        "[instrumentation] hidden_snapshot_layers must name existing layers")
    instr = Instrumentation(layers, _typed(loc, "instrumentation", "split_accounting",
                                           i_raw.get("split_accounting", True), bool))

    cost = None
    if "cost" in raw:
        defaults = CostModel.default_for(model_cfg)
        c_kwargs = {f.name: getattr(defaults, f.name) for f in fields(CostModel)}
        for k, v in raw["cost"].items():
            c_kwargs[k] = _typed(loc, "cost", k, v, float)
        try:
            cost = CostModel(**c_kwargs)
        except ValueError as err:
            raise loc.error("cost", None, f"[cost] {err}") from None

    a_raw = raw.get("ablate", {})
    ablate_variants = _typed(loc, "ablate", "variants", a_raw.get("variants", list(ABLATION_VARIANTS)), list)
    for v in ablate_variants:
        try:
            parse_variant(v)
        except ValueError as err:
            raise loc.error("ablate", "variants", f"[ablate] {err}") from None
    refresh_sweep = [_refresh(loc, "ablate", "refresh_sweep", v)
                     for v in _typed(loc, "ablate", "refresh_sweep", a_raw.get("refresh_sweep", []), list)]

    s_raw = raw.get("sweep", {})
    pairs = []
    for pair in _typed(loc, "sweep", "pairs", s_raw.get("pairs", []), list):
        if (not isinstance(pair, list) or len(pair) != 2 or isinstance(pair[1], bool)
                or not isinstance(pair[0], (int, float)) or not isinstance(pair[1], int)):
            raise loc.error("sweep", "pairs", f"[sweep] each pair must be [tau_hot, l_hot], got {pair!r}")
        tau_hot, l_hot = float(pair[0]), int(pair[1])
        try:
            TeamConfig(tau_hot=tau_hot, l_hot=l_hot).check_against(decode)
        except ValueError as err:
            raise loc.error("sweep", "pairs", f"[sweep] {err}") from None
        pairs.append((tau_hot, l_hot))

    return ExperimentConfig(
        model=model_cfg, decode=decode, team=team, seeds=list(seeds), outputs=outputs,
        variants=list(variants), model_kind=kind, script_path=script_path, weights_path=weights_path,
        instrumentation=instr, cost=cost, ablate_variants=list(ablate_variants),
        refresh_sweep=refresh_sweep, sweep_pairs=pairs, source=path,
    )


def parse_variant(name: str, team: TeamConfig | None = None) -> TeamConfig | None:
    """Map a variant name to a TeamConfig (None means the vanilla decoder).

    ``vanilla``; ``team`` (the [team] section as written); ``off`` (strategy
    path with everything disabled); or a ``+``-joined subset of seh, dcd, lac.
    """
    team = team or TeamConfig()
    if not isinstance(name, str):
        raise ValueError(f"variant names must be strings, got {name!r}")
    if name == "vanilla":
        return None
    if name == "team":
        return team
    if name == "off":
        return team.replace(dcd_enabled=False, seh_enabled=False, lac_enabled=False)
    parts = name.split("+")
    if not parts or any(p not in ("seh", "dcd", "lac") for p in parts) or len(set(parts)) != len(parts):
        raise ValueError(f"unknown variant {name!r}")
    return team.replace(dcd_enabled="dcd" in parts, seh_enabled="seh" in parts, lac_enabled="lac" in parts)
