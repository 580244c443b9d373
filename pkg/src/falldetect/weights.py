"""Self-describing weight container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"FDWEIGHT"
    8       4     uint32 format version (1)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header
    16+H    P     payload: every tensor as raw float64 LE, in header order
    16+H+P  32    SHA-256 of bytes [0, 16+H+P)

The header holds ``kind``, ``config`` (ModelConfig fields), ``config_hash``
(SHA-256 of the canonical config JSON), ``seed``, optional ``standardizer``
(``mean``/``std`` lists) and ``tensors``: a list of ``{name, shape, offset}``
with ``offset`` in bytes from the payload start.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import Standardizer
from .models import FallModel, ModelConfig
from .tensor import SeededRng

MAGIC = b"FDWEIGHT"
VERSION = 1


class WeightsError(ValueError):
    """Corrupt or incompatible weights file."""


def dumps(model: FallModel, scaler: Standardizer | None = None) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in model.params().items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": model.kind.value,
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "seed": model.seed,
        "standardizer": None if scaler is None else {"mean": scaler.mean.tolist(), "std": scaler.std.tolist()},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save(path, model: FallModel, scaler: Standardizer | None = None) -> None:
    Path(path).write_bytes(dumps(model, scaler))


def loads(blob: bytes) -> tuple[FallModel, Standardizer | None, dict]:
    if len(blob) < 16 + 32 or blob[:8] != MAGIC:
        raise WeightsError("not a weights file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsError("checksum mismatch: weights file is corrupted")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != VERSION:
        raise WeightsError(f"unsupported weights format version {version}")
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    if config.digest() != header["config_hash"]:
        raise WeightsError("config hash does not match the stored config")
    model = FallModel(config, SeededRng(header["seed"]))
    payload = body[16 + hlen:]
    params = model.params()
    stored = {t["name"] for t in header["tensors"]}
    if stored != set(params):
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        raise WeightsError(f"tensor set mismatch for {config.kind.value}: missing {missing}, unexpected {extra}")
    for t in header["tensors"]:
        arr = params[t["name"]]
        if list(arr.shape) != t["shape"]:
            raise WeightsError(f"tensor {t['name']} has shape {t['shape']}, model expects {list(arr.shape)}")
        if t["offset"] + arr.size * 8 > len(payload):
            raise WeightsError(f"tensor {t['name']} runs past the end of the payload")
        arr[...] = np.frombuffer(payload, dtype="<f8", count=arr.size, offset=t["offset"]).reshape(arr.shape)
    sc = header.get("standardizer")
    scaler = None if sc is None else Standardizer(sc["mean"], sc["std"])
    return model, scaler, header


def load(path) -> tuple[FallModel, Standardizer | None, dict]:
    return loads(Path(path).read_bytes())
