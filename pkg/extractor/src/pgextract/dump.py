"""Writers for the `.pgstack` binary format and its JSON-lines manifest.

Implemented against the published wire format so the dumps are bit-compatible
with any conforming reader:

    magic ``PGEN`` | u16 version=1 | u16 reserved=0 | u32 L | u32 d |
    u32 id length | UTF-8 sample_id | L*d little-endian float32, row-major

Manifest: one JSON object per line; a header record carrying
(version, num_layers, dim, split), one ``sample`` record per stack
(sample_id, role, path) and one ``triplet`` record per linked pair
(query_id, target_id, text, group_key).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"PGEN"
FORMAT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def stack_bytes(sample_id: str, data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"stack must be 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"stack for {sample_id!r} contains non-finite values")
    layers, dim = data.shape
    sid = sample_id.encode("utf-8")
    header = struct.pack("<4sHHIII", MAGIC, FORMAT_VERSION, 0, layers, dim, len(sid))
    return header + sid + data.tobytes()


def write_stack_file(path, sample_id: str, data: np.ndarray) -> None:
    atomic_write_bytes(path, stack_bytes(sample_id, data))


def manifest_bytes(num_layers: int, dim: int, split: str, samples, triplets) -> bytes:
    lines = [
        json.dumps(
            {
                "record": "header",
                "version": 1,
                "num_layers": num_layers,
                "dim": dim,
                "split": split,
            },
            sort_keys=True,
        )
    ]
    for sample_id, role, path in samples:
        lines.append(
            json.dumps(
                {"record": "sample", "sample_id": sample_id, "role": role, "path": path},
                sort_keys=True,
            )
        )
    for query_id, target_id, text, group_key in triplets:
        lines.append(
            json.dumps(
                {
                    "record": "triplet",
                    "query_id": query_id,
                    "target_id": target_id,
                    "text": text,
                    "group_key": group_key,
                },
                sort_keys=True,
            )
        )
    return ("\n".join(lines) + "\n").encode("utf-8")
