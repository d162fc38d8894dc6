"""Deterministic binary container: a JSON header plus raw little-endian
arrays.

Used for trajectory checkpoints and fit results. Unlike zip-based formats the
bytes depend only on the content, so rewriting identical data yields
identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"KINEFUSE\x01"


class FormatError(IOError):
    """File is not a readable kinefuse container."""


def save_arrays(path, meta: dict, arrays: dict) -> None:
    order = list(arrays)
    header = {
        "meta": meta,
        "arrays": [
            {"name": k, "shape": list(np.asarray(arrays[k]).shape)} for k in order
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in order:
            a = np.ascontiguousarray(arrays[k], dtype="<f8")
            fh.write(a.tobytes())


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise FormatError(f"{path}: truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["meta"], arrays
