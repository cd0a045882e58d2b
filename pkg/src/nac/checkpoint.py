"""Single-file parameter checkpoints.

Byte layout (all integers little-endian)::

    offset 0          uint64  header_len  (bytes of JSON that follow)
    offset 8          header  UTF-8 JSON array, right-padded with ASCII spaces
                              so that 8 + header_len is a multiple of 8
    offset 8+header_len       blob of IEEE-754 binary64 values, little-endian

Each header entry is ``{"name": str, "shape": [int, ...], "dtype": "f64",
"byte_offset": int}``. ``byte_offset`` counts from the start of the blob;
entries are stored in header order, C-contiguous, back to back, so entry
``i`` occupies ``8 * prod(shape)`` bytes. A scalar has ``shape == []``.
Names are unique. The file ends exactly at the end of the last entry.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from nac.tensor import Tensor

DTYPE = "f64"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def encode(named_arrays) -> bytes:
    entries, chunks, offset = [], [], 0
    seen = set()
    for name, arr in named_arrays:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        data = np.array(arr.data if isinstance(arr, Tensor) else arr, dtype=_LE_F64, order="C")
        entries.append({"name": name, "shape": list(data.shape), "dtype": DTYPE, "byte_offset": offset})
        raw = data.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    header += b" " * ((-(8 + len(header))) % 8)
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if 8 + hlen > len(buf):
        raise CheckpointError(f"header length {hlen} runs past end of file ({len(buf)} bytes)")
    try:
        entries = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    blob = memoryview(buf)[8 + hlen:]
    out, end = {}, 0
    for e in entries:
        if e.get("dtype") != DTYPE:
            raise CheckpointError(f"{e.get('name')!r}: unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = int(e["byte_offset"])
        stop = start + 8 * n
        if start < 0 or stop > len(blob):
            raise CheckpointError(f"{e['name']!r}: bytes [{start}, {stop}) outside blob of {len(blob)}")
        out[e["name"]] = np.frombuffer(blob[start:stop], dtype=_LE_F64).astype(np.float64).reshape(shape)
        end = max(end, stop)
    if end != len(blob):
        raise CheckpointError(f"blob has {len(blob) - end} trailing bytes")
    return out


def save(path, named_arrays) -> None:
    data = encode(named_arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def restore(named_params, arrays: dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into the leaf tensors of ``named_params`` in place."""
    named_params = list(named_params)
    missing = [n for n, _ in named_params if n not in arrays]
    extra = set(arrays) - {n for n, _ in named_params}
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing} unexpected={sorted(extra)}")
    for name, tensor in named_params:
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointError(f"{name!r}: shape {arrays[name].shape} != {tensor.data.shape}")
    for name, tensor in named_params:
        tensor.data[...] = arrays[name]
