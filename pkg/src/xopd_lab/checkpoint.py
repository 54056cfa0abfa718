"""Checkpoint files: one JSON header line, then raw float64 payloads.

The header records parameter names, shapes, and byte offsets (relative to
the end of the header line) plus arbitrary metadata such as the model
config. Payloads are little-endian float64, written in header order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor


def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    for name in sorted(params):
        arr = params[name].data
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"params": entries, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for entry in entries:
            f.write(params[entry["name"]].data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        header = json.loads(header_line.decode("utf-8"))
        payload = f.read()
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload[off : off + n * 8], dtype="<f8").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return params, header["meta"]


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(params[name].data.astype("<f8").tobytes(order="C"))
    return h.hexdigest()
