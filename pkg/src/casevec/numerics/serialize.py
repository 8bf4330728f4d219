"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    magic        4 bytes   b"CVCK"
    version      uint32    currently 1
    header_len   uint32    length of the UTF-8 header JSON
    header       bytes     JSON object: {"config": {...}, "meta": {...}}
    num_tensors  uint32
    per tensor, sorted by name:
        name_len uint16
        name     UTF-8 bytes
        dtype    uint8     0 = float64, 1 = float32
        ndim     uint8
        dims     ndim x uint64
        values   raw little-endian C-order bytes

Writing sorts tensors by name and goes through a temp file + rename, so a
checkpoint on disk is always complete and identical runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"CVCK"
VERSION = 1
_DTYPE_CODES = {0: "<f8", 1: "<f4"}
_DTYPE_IDS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = json.dumps({"config": config, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_IDS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_IDS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            dtype_id, ndim = struct.unpack("<BB", fh.read(2))
            if dtype_id not in _DTYPE_CODES:
                raise CheckpointError(f"{path}: unknown dtype id {dtype_id}")
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = np.dtype(_DTYPE_CODES[dtype_id])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            tensors[name] = arr
    return header["config"], tensors, header.get("meta", {})
