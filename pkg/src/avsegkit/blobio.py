"""Flat float32 blob files with a plain-text sidecar descriptor.

The blob holds the array values as little-endian 32-bit reals in C order;
the sidecar (same path plus ``.meta``) lists ``shape`` and any extra fields
one ``key value`` pair per line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def save_f32(path, array: np.ndarray, extra: dict | None = None) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    lines = ["shape " + " ".join(str(d) for d in arr.shape), "dtype float32-le"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} {value}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_f32(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta: dict = {}
    shape = None
    for line in Path(str(path) + ".meta").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if key == "shape":
            shape = tuple(int(d) for d in value.split())
        else:
            meta[key] = value
    if shape is None:
        raise ValueError(f"{path}.meta has no shape line")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(
            f"{path}: blob holds {data.size} values, descriptor says {expected}"
        )
    return data.reshape(shape).astype(np.float64), meta
