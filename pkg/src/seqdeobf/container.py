"""``NUPARAMS1`` array container.

Layout::

    b"NUPARAMS1\\n"
    uint64 little-endian: byte length of the JSON header
    JSON header (UTF-8): {"meta": {...}, "arrays": [{"name", "shape", "offset"}]}
    little-endian float64 payload, arrays back to back in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NUPARAMS1\n"


class ContainerError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: not a NUPARAMS1 file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ContainerError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen])
    except ValueError as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    pos += hlen
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"])
    if len(raw) - pos != 8 * total:
        raise ContainerError(f"{path}: payload has {len(raw) - pos} bytes, expected {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
    return arrays, header["meta"]
