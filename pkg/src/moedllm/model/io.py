"""Binary weight container for toy models.

Layout (all little-endian)::

    8 bytes   magic  b"MOEDLLM\\x00"
    u32       format version (1)
    u32       header length H
    H bytes   UTF-8 JSON object holding every ModelConfig field
    ...       raw float64 data of each matrix, row-major, in declaration order:
              token_emb (V x d), pos_emb (P x d), then per layer
              wq, wk, wv, wo (d x d), router (d x E), and for each expert
              up (d x 4d), down (4d x d); finally unembed (d x V)

Shapes follow from the config, so the payload carries no per-matrix headers.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from moedllm.model.config import ModelConfig
from moedllm.model.toy import MoELayerWeights, ToyMoEModel

MAGIC = b"MOEDLLM\x00"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _shapes(cfg: ModelConfig) -> list[tuple[int, int]]:
    d, ff, E = cfg.hidden_dim, cfg.ff_dim, cfg.num_experts
    shapes = [(cfg.vocab_size, d), (cfg.max_positions, d)]
    for _ in range(cfg.num_layers):
        shapes += [(d, d)] * 4 + [(d, E)] + [(d, ff), (ff, d)] * E
    shapes.append((d, cfg.vocab_size))
    return shapes


def save_model(model: ToyMoEModel, path: str | Path) -> None:
    header = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for m in model.matrices():
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_model(path: str | Path) -> ToyMoEModel:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ContainerError("bad magic bytes")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        cfg = ModelConfig(**json.loads(blob[16:16 + hlen].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as err:
        raise ContainerError(f"bad header: {err}") from None
    offset = 16 + hlen
    mats = []
    for rows, cols in _shapes(cfg):
        n = rows * cols
        if offset + 8 * n > len(blob):
            raise ContainerError("truncated weight payload")
        mats.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
                    .astype(np.float64).reshape(rows, cols))
        offset += 8 * n
    if offset != len(blob):
        raise ContainerError("trailing bytes after weight payload")
    if not all(np.isfinite(m).all() for m in mats):
        raise ContainerError("non-finite weights")
    it = iter(mats)
    token_emb, pos_emb = next(it), next(it)
    layers = []
    for _ in range(cfg.num_layers):
        wq, wk, wv, wo, router = (next(it) for _ in range(5))
        pairs = [(next(it), next(it)) for _ in range(cfg.num_experts)]
        layers.append(MoELayerWeights(wq, wk, wv, wo, router,
                                      np.stack([u for u, _ in pairs]), np.stack([d for _, d in pairs])))
    return ToyMoEModel(cfg, token_emb, pos_emb, layers, next(it))
