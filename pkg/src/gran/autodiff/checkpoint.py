"""Binary checkpoint: magic, header length, JSON manifest, then raw little-endian float64 arrays."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRANCKPT1\n"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        data = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=start)
        arrays[e["name"]] = data.astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]
