"""Dense tensor helpers and seeded random streams.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order. The
helpers here add the shape checks and numerically guarded activations that
the layers rely on.

Precision is float64 unless the environment variable ``FALLDETECT_FLOAT32``
is set to ``1`` before import.
"""
from __future__ import annotations

import os
import zlib
from typing import Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("FALLDETECT_FLOAT32") == "1" else np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


class SeededRng:
    """Deterministic random stream (numpy PCG64) with named sub-streams.

    ``child("init")`` and ``child("shuffle")`` derive independent generators
    from the same master seed, so consuming one never shifts the other. A
    child's seed material is the parent's spawn key extended with the CRC-32
    of the name.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, self.key + (zlib.crc32(name.encode("utf-8")),))

    def uniform(self, lo: float, hi: float, size=None) -> np.ndarray:
        return self.generator.uniform(lo, hi, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        return self.generator.integers(lo, hi, size=size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


_EWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ewise(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise add/sub/mul. ``b`` may be a vector broadcast along the last axis."""
    try:
        op = _EWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"ewise {kind}: incompatible shapes {a.shape} and {b.shape}")
    return op(a, b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches are algebraically equal
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def map_activation(kind: str, x: np.ndarray) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def flatten(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1)


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    if len(parts) == 0:
        raise ValueError("concat needs at least one part")
    return np.concatenate([np.asarray(p).reshape(-1) for p in parts])


def seeded_uniform(shape, lo: float, hi: float, rng: SeededRng) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"seeded_uniform: need lo < hi, got lo={lo}, hi={hi}")
    out = rng.uniform(lo, hi, size=shape).astype(DTYPE)
    # float rounding can land exactly on hi for very narrow ranges
    return np.where(out >= hi, np.nextafter(DTYPE(hi), DTYPE(lo)), out)
