"""Weight checkpoints: a JSON header followed by a flat little-endian f32 blob.

Layout::

    b"AMNCKPT1" | uint64 LE header length | UTF-8 JSON header | f32 LE weights

The header always carries ``n_params`` so a truncated blob is detected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"AMNCKPT1"


def save_checkpoint(path: str | Path, header: dict, weights: np.ndarray) -> Path:
    path = Path(path)
    weights = np.ascontiguousarray(weights, dtype="<f4").reshape(-1)
    header = dict(header, n_params=int(weights.size))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(weights.tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header") from exc
    blob = data[16 + n :]
    if len(blob) != 4 * header.get("n_params", -1):
        raise CheckpointError(f"{path}: weight blob has {len(blob)} bytes, header says {header.get('n_params')} params")
    return header, np.frombuffer(blob, dtype="<f4").astype(np.float32)
