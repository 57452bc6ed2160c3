"""Model checkpoint format: one JSON header line, then float64 payload.

The header records entry names, shapes, and free-form metadata; the payload
is the little-endian float64 bytes of each array concatenated in header
order.  One file per model.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(state)
    header = {
        "names": names,
        "shapes": {n: list(state[n].shape) for n in names},
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc

    state: dict[str, np.ndarray] = {}
    offset = 0
    for n in header["names"]:
        shape = tuple(header["shapes"][n])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated payload at entry {n!r}")
        state[n] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after final entry")
    return state, header.get("meta", {})
