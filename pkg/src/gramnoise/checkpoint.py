"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"GRNCKPT\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
    ...       raw array payload, each array C-contiguous little-endian at its offset
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRNCKPT\0"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]):
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    base = 20 + hlen
    arrays = {}
    for item in header["arrays"]:
        start = base + item["offset"]
        raw = data[start:start + item["nbytes"]]
        if len(raw) != item["nbytes"]:
            raise CheckpointError(f"{path}: array {item['name']} truncated")
        arrays[item["name"]] = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return header["meta"], arrays


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
