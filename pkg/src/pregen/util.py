"""Shared helpers: atomic file writes, checksums, seed derivation."""

from __future__ import annotations

import hashlib
import os

import numpy as np


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write `data` to `path` via a temp file and rename.

    Readers never observe a partial file; an interrupted write leaves the
    destination untouched.
    """
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


def checksum64(data: bytes) -> int:
    """64-bit content checksum (blake2b truncated to 8 bytes)."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def derived_seed(seed: int, *parts: int) -> int:
    """Stable child seed from a base seed and integer context parts."""
    state = np.random.SeedSequence(entropy=seed, spawn_key=tuple(parts)).generate_state(1)
    return int(state[0])


def keyed_rng(seed: int, *parts: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by (seed, *parts).

    Streams for distinct keys are independent and do not depend on how many
    other streams were drawn from, which keeps per-sample dropout noise
    reproducible regardless of batch composition.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(parts))
    return np.random.Generator(np.random.Philox(ss))
