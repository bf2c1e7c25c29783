"""Checkpoint directory format and deterministic JSON helpers.

A checkpoint is a directory holding index.json, which maps parameter names
to {shape, dtype, file}, plus one raw binary file per parameter
(little-endian scalars, row-major). Auxiliary training state (rng, step
counters, optimizer moments) goes to meta.json next to the index so the
index schema stays a pure name->entry map.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def canonical_json(obj) -> str:
    """Stable JSON encoding: sorted keys, fixed separators, newline-terminated."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def _filename(i: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"p{i:04d}_{safe}.bin"


def save_arrays(dirpath: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    os.makedirs(dirpath, exist_ok=True)
    index = {}
    for i, name in enumerate(sorted(arrays)):
        arr = arrays[name]
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype!r} for {name!r}")
        fname = _filename(i, name)
        with open(os.path.join(dirpath, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
        index[name] = {"shape": list(arr.shape), "dtype": dtype, "file": fname}
    write_json(os.path.join(dirpath, "index.json"), index)
    if meta is not None:
        write_json(os.path.join(dirpath, "meta.json"), meta)


def load_arrays(dirpath: str) -> dict[str, np.ndarray]:
    index = read_json(os.path.join(dirpath, "index.json"))
    out = {}
    for name, entry in index.items():
        raw = open(os.path.join(dirpath, entry["file"]), "rb").read()
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        out[name] = arr.reshape(entry["shape"])
    return out


def load_meta(dirpath: str) -> dict | None:
    path = os.path.join(dirpath, "meta.json")
    return read_json(path) if os.path.exists(path) else None


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a Generator's bit generator state."""
    return json.loads(json.dumps(rng.bit_generator.state))


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
