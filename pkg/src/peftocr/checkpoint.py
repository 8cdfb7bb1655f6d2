"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"PEFTOCR1"
    u32       header length H
    H bytes   UTF-8 JSON header: config, strategy, adapter metadata, vocabulary, meta
    u32       tensor count
    per tensor, sorted by name:
        u16   name length, then the UTF-8 name
        u8    ndim, then ndim x u64 dimensions
        f64   values in C order

Adapter tensors are stored as ``<site>#A``, ``<site>#B`` and
``<site>#magnitude``.  Save followed by load is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapters import DoraState, LowRankPair
from .data import Vocabulary
from .errors import CheckpointError
from .model import ModelConfig, OcrModel

MAGIC = b"PEFTOCR1"


def _header(model: OcrModel, vocab: Vocabulary | None, meta: dict | None) -> dict:
    adapters = {}
    for site, a in sorted(model.adapters.items()):
        pair = a.delta if isinstance(a, DoraState) else a
        adapters[site] = {
            "kind": "dora" if isinstance(a, DoraState) else "lora",
            "rank": pair.rank,
            "scale": pair.scale,
            "magnitude_trainable": bool(getattr(a, "magnitude_trainable", False)),
        }
    return {
        "format": 1,
        "config": model.config.to_dict(),
        "strategy": model.strategy,
        "injected": model.injected,
        "adapters": adapters,
        "merged_sites": list(model.merged_sites),
        "vocab": (vocab or Vocabulary()).chars,
        "meta": meta or {},
    }


def to_bytes(model: OcrModel, vocab: Vocabulary | None = None, meta: dict | None = None) -> bytes:
    header = json.dumps(_header(model, vocab, meta), sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    tensors = model.state_arrays()
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> tuple[OcrModel, Vocabulary, dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", blob, 8)
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after tensor table")

    config = ModelConfig(**header["config"])
    params = {k: v for k, v in tensors.items() if "#" not in k}
    model = OcrModel(config, params, strategy=dict(header["strategy"]), injected=bool(header["injected"]),
                     merged_sites=list(header.get("merged_sites", [])))
    for site, info in header["adapters"].items():
        pair = LowRankPair(tensors[f"{site}#A"], tensors[f"{site}#B"], int(info["rank"]), float(info["scale"]))
        if info["kind"] == "dora":
            model.adapters[site] = DoraState(params[site], tensors[f"{site}#magnitude"], pair,
                                             bool(info["magnitude_trainable"]))
        else:
            model.adapters[site] = pair
    return model, Vocabulary(header["vocab"]), header.get("meta", {})


def save(path: str | Path, model: OcrModel, vocab: Vocabulary | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, vocab, meta))


def load(path: str | Path) -> tuple[OcrModel, Vocabulary, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())
