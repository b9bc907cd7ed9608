"""State-file container: a one-line JSON shape header followed by raw
little-endian 32-bit float data, concatenated in header order."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError

FORMAT = "salon-arrays-v1"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    header = {
        "format": FORMAT,
        "dtype": "<f4",
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"array file not found: {path}")
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT:
            raise InputError(f"{path} is not a {FORMAT} file")
        out = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
            out[entry["name"]] = data.reshape(shape).copy()
    return out
