"""Binary tensor container: length-prefixed JSON header + raw little-endian payload.

Layout::

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON header (sorted keys, compact separators)
    [...]      payload: tensors concatenated in header order

Header::

    {"format_version": 1,
     "metadata": {...},
     "tensors": {name: {"dtype": "f32", "shape": [...],
                        "byte_offset": o, "byte_length": n}}}

``byte_offset`` is relative to the start of the payload. Quantized tensors use
``"dtype": "i8-codes"`` plus ``bits`` and ``scale`` fields; their codes are
stored as int8.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .quant import QuantizedTensor, QuantSpec
from .tensor import ToyViT

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(tensors: Mapping[str, np.ndarray | QuantizedTensor], metadata: Mapping | None = None) -> bytes:
    table = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, QuantizedTensor):
            raw = np.ascontiguousarray(t.codes, dtype="<i1").tobytes()
            entry = {"dtype": "i8-codes", "bits": t.spec.bits, "scale": t.spec.scale, "shape": list(t.shape)}
        else:
            arr = np.asarray(t)
            if arr.dtype != np.float32:
                raise TypeError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry = {"dtype": "f32", "shape": list(arr.shape)}
        entry["byte_offset"] = offset
        entry["byte_length"] = len(raw)
        table[name] = entry
        chunks.append(raw)
        offset += len(raw)
    header = _dumps({"format_version": FORMAT_VERSION, "metadata": dict(metadata or {}), "tensors": table})
    return _LEN.pack(len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray | QuantizedTensor], dict]:
    if len(blob) < _LEN.size:
        raise ValueError("container truncated")
    (n,) = _LEN.unpack_from(blob, 0)
    header = json.loads(blob[_LEN.size : _LEN.size + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {header.get('format_version')!r}")
    payload = memoryview(blob)[_LEN.size + n :]
    tensors: dict[str, np.ndarray | QuantizedTensor] = {}
    for name, entry in header["tensors"].items():
        start, length = entry["byte_offset"], entry["byte_length"]
        if start + length > len(payload):
            raise ValueError(f"{name}: payload truncated")
        raw = payload[start : start + length]
        shape = tuple(entry["shape"])
        if entry["dtype"] == "f32":
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        elif entry["dtype"] == "i8-codes":
            codes = np.frombuffer(raw, dtype="<i1").astype(np.int8).reshape(shape)
            tensors[name] = QuantizedTensor(codes, QuantSpec(entry["bits"], entry["scale"]))
        else:
            raise ValueError(f"{name}: unknown dtype {entry['dtype']!r}")
    return tensors, header["metadata"]


def save_tensors(path, tensors, metadata=None) -> None:
    Path(path).write_bytes(encode(tensors, metadata))


def load_tensors(path):
    return decode(Path(path).read_bytes())


def save_model(model: ToyViT, path) -> None:
    save_tensors(path, model.state_dict(), {"kind": "toy-vit", "config": model.config()})


def load_model(path) -> ToyViT:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "toy-vit":
        raise ValueError(f"{path}: not a model container")
    return ToyViT.from_state_dict(tensors, meta["config"])
