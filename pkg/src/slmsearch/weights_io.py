"""Weights container file.

Layout (all integers little-endian)::

    b"SLMF" | version u32 | header_len u64 | header (UTF-8 JSON) | tensor blobs

The header holds the ArchConfig, the model precision and a tensor directory
(name, shape, precision, byte offset from the start of the blob section, byte
length). ``f64`` tensors are raw little-endian float64. ``q4`` tensors are
the float32 block scales (row-major over blocks) followed by the packed
codes, two per byte, low nibble first, blocks in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from slmsearch.archspace import ArchConfig
from slmsearch.engine import ModelWeights, assemble
from slmsearch.quantkit import Q4BlockTensor, pack_q4_codes, unpack_q4_codes

MAGIC = b"SLMF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class WeightsFormatError(ValueError):
    """File is not a readable weights container."""


def _blob(t) -> tuple[str, bytes, dict]:
    if isinstance(t, Q4BlockTensor):
        scales = t.block_scales.astype("<f4").tobytes()
        return "q4", scales + pack_q4_codes(t.codes), {"scales_length": len(scales)}
    arr = np.asarray(t, dtype="<f8")
    return "f64", arr.tobytes(), {}


def dumps(model: ModelWeights) -> bytes:
    directory, blobs, offset = [], [], 0
    for name, tensor in model.named_tensors():
        precision, data, extra = _blob(tensor)
        shape = [tensor.rows, tensor.cols] if isinstance(tensor, Q4BlockTensor) else list(tensor.shape)
        directory.append({"name": name, "shape": shape, "precision": precision,
                          "offset": offset, "length": len(data), **extra})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": model.config.to_dict(), "precision": model.precision,
                         "tensors": directory}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        raise WeightsFormatError("file too short")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"unreadable header: {exc}") from exc
    return header, start


def loads(data: bytes) -> ModelWeights:
    header, base = read_header(data)
    config = ArchConfig.from_dict(header["config"])
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        raw = data[lo:lo + entry["length"]]
        if len(raw) != entry["length"]:
            raise WeightsFormatError(f"tensor {entry['name']} truncated")
        shape = tuple(entry["shape"])
        if entry["precision"] == "f64":
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        elif entry["precision"] == "q4":
            rows, cols = shape
            n_s = entry["scales_length"]
            rb, cb = -(-rows // 4), -(-cols // 4)
            scales = np.frombuffer(raw[:n_s], dtype="<f4").astype(np.float32).reshape(rb, cb)
            codes = unpack_q4_codes(raw[n_s:], rows, cols)
            tensors[entry["name"]] = Q4BlockTensor(rows, cols, scales.copy(), codes)
        else:
            raise WeightsFormatError(f"unknown tensor precision {entry['precision']!r}")
    return assemble(config, header["precision"], tensors)


def save(model: ModelWeights, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> ModelWeights:
    return loads(Path(path).read_bytes())


def inspect(path: str | Path) -> dict:
    """Header plus file size, without decoding tensors."""
    data = Path(path).read_bytes()
    header, base = read_header(data)
    return {"version": VERSION, "file_bytes": len(data), "blob_offset": base, **header}
