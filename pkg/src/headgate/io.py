"""Self-describing binary blobs for checkpoints and datasets.

Layout (byte-stable across platforms):

    magic   8 bytes   b"HGBLOB1\\n"
    hlen    8 bytes   little-endian uint64, length of the JSON header
    header  hlen bytes of UTF-8 JSON with sorted keys; lists each array as
            {"name", "shape"} in storage order
    body    the arrays, concatenated as little-endian float64 ("<f8"),
            C order, in header order

The header's "meta" field carries arbitrary JSON (configs, seeds, counters).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"HGBLOB1\n"


def dumps_json(obj) -> str:
    """Canonical JSON used everywhere a byte-stable file is promised."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_blob(path, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays]
    header = dumps_json({"meta": meta, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path) -> tuple[dict, dict]:
    """Returns (meta, {name: ndarray})."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a headgate blob (bad magic)")
    hlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    return header["meta"], arrays
