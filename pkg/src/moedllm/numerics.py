"""Dense float64 kernels shared by the toy model and the analyses.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; vectors are
1-D arrays. Every exported function is pure and rejects or never produces
non-finite values.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

RNG_ALGORITHM = "philox4x64"


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite float64 matrix, optionally reshaping row-major."""
    m = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"data length {m.size} != {rows}x{cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    _check_finite(m)
    return m


def _check_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entry in matrix")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator; ``stream`` selects an independent substream.

    The (seed, stream) pair fully determines the draw sequence on every platform.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    # an explicit uint64 key; a plain list goes through float for seeds >= 2**63
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    _check_finite(out)
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    squeeze = m.ndim == 1
    if squeeze:
        m = m[None, :]
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def row_argmax(m: np.ndarray) -> list[tuple[int, float]]:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    # np.argmax returns the first occurrence of the maximum
    idx = np.argmax(m, axis=1)
    return [(int(i), float(m[r, i])) for r, i in enumerate(idx)]


def top_k(values: Sequence[float] | np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest values, descending; ties go to the smaller index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if k < 0 or k > v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    order = np.argsort(-v, kind="stable")
    return [int(i) for i in order[:k]]


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.size} vs {b.size}")
    sa = float(np.max(np.abs(a))) if a.size else 0.0
    sb = float(np.max(np.abs(b))) if b.size else 0.0
    if sa == 0.0 or sb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    # rescale first so tiny or huge vectors neither underflow nor overflow the norms
    a, b = a / sa, b / sb
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Parameter-free RMS normalisation over the last axis."""
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))
