"""Layer-stack storage and dataset manifests.

A *layer stack* is the per-sample feature the rest of the package consumes:
an L x d float32 matrix whose row l is the hidden state of the final token
at backbone layer l (rows stored in ascending layer order).

Binary stack format (`.pgstack`), all integers little-endian:

    offset  size        field
    0       4           magic ``PGEN``
    4       2           format version (u16, currently 1)
    6       2           reserved (u16, 0)
    8       4           num_layers L (u32)
    12      4           dim d (u32)
    16      4           sample_id byte length n (u32)
    20      n           sample_id (UTF-8)
    20+n    4*L*d       row-major float32 payload, little-endian

One stack per file. The manifest is a line-delimited text file of JSON
records: one header record (version, num_layers, dim, split), one record per
sample (sample_id, role, path) and one per triplet (query_id, target_id,
text, group_key). Sample paths are relative to the manifest's directory.
"""

from __future__ import annotations

import collections
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .util import atomic_write_bytes

MAGIC = b"PGEN"
FORMAT_VERSION = 1
ROLES = ("query", "target")
SPLITS = ("train", "test")

_HEADER = struct.Struct("<4sHHIII")


class StackError(Exception):
    """Base class for stack and manifest failures."""


class InvalidStackError(StackError):
    """Stack data violates an invariant (shape, finiteness, parity)."""


class BadMagicError(StackError):
    """Leading bytes are not the ``PGEN`` magic."""


class UnsupportedVersionError(StackError):
    """Format version is not one this reader understands."""


class TruncatedPayloadError(StackError):
    """Payload shorter or longer than the header declares."""


class NonFiniteDataError(StackError):
    """Payload contains NaN or infinity."""


class ManifestError(StackError):
    """Manifest file is syntactically or referentially invalid."""


@dataclass
class LayerStack:
    """One sample's L x d matrix of per-layer final-token hidden states."""

    sample_id: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        validate_stack_data(self.data)

    @property
    def num_layers(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerStack):
            return NotImplemented
        return self.sample_id == other.sample_id and np.array_equal(
            self.data, other.data, equal_nan=False
        )


def validate_stack_data(data: np.ndarray) -> None:
    if data.ndim != 2:
        raise InvalidStackError(f"stack data must be 2-D, got shape {data.shape}")
    num_layers, dim = data.shape
    if num_layers < 1:
        raise InvalidStackError("stack needs at least one layer row")
    if dim < 2 or dim % 2 != 0:
        raise InvalidStackError(f"dim must be even and >= 2, got {dim}")
    if not np.all(np.isfinite(data)):
        raise InvalidStackError("stack contains non-finite values")


def write_stack(stack: LayerStack, dest: BinaryIO) -> None:
    """Serialize one stack. Validates before any bytes reach the sink."""
    validate_stack_data(stack.data)
    dest.write(stack_to_bytes(stack))


def stack_to_bytes(stack: LayerStack) -> bytes:
    validate_stack_data(stack.data)
    sid = stack.sample_id.encode("utf-8")
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        0,
        stack.num_layers,
        stack.dim,
        len(sid),
    )
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    return header + sid + payload


def read_stack(source: BinaryIO) -> LayerStack:
    """Parse one stack, checking magic, version, sizes and finiteness."""
    header = source.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise TruncatedPayloadError(
            f"header truncated: expected {_HEADER.size} bytes, got {len(header)}"
        )
    magic, version, _reserved, num_layers, dim, id_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    sid_bytes = source.read(id_len)
    if len(sid_bytes) < id_len:
        raise TruncatedPayloadError(
            f"sample_id truncated: expected {id_len} bytes, got {len(sid_bytes)}"
        )
    expected = 4 * num_layers * dim
    payload = source.read(expected)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: expected {expected} bytes, got {len(payload)}"
        )
    trailing = source.read(1)
    if trailing:
        raise TruncatedPayloadError(
            f"payload longer than declared: expected {expected} bytes, found extra data"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(num_layers, dim)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError("stack payload contains non-finite values")
    try:
        return LayerStack(sid_bytes.decode("utf-8"), data)
    except InvalidStackError as exc:
        raise InvalidStackError(f"stored stack violates invariants: {exc}") from exc


def bytes_to_stack(data: bytes) -> LayerStack:
    return read_stack(io.BytesIO(data))


def write_stack_file(stack: LayerStack, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, stack_to_bytes(stack))


def read_stack_file(path: str | os.PathLike) -> LayerStack:
    with open(path, "rb") as fh:
        return read_stack(fh)


@dataclass(frozen=True)
class SampleEntry:
    sample_id: str
    role: str
    path: str


@dataclass(frozen=True)
class TripletRecord:
    query_id: str
    target_id: str
    text: str
    group_key: str


@dataclass
class Manifest:
    version: int
    num_layers: int
    dim: int
    split: str
    samples: list[SampleEntry] = field(default_factory=list)
    triplets: list[TripletRecord] = field(default_factory=list)

    def sample_ids(self, role: str | None = None) -> list[str]:
        return [s.sample_id for s in self.samples if role is None or s.role == role]

    def sample_map(self) -> dict[str, SampleEntry]:
        return {s.sample_id: s for s in self.samples}

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ManifestError(f"dim must be even and >= 2, got {self.dim}")
        if self.num_layers < 1:
            raise ManifestError(f"num_layers must be >= 1, got {self.num_layers}")
        seen: dict[str, str] = {}
        for s in self.samples:
            if s.role not in ROLES:
                raise ManifestError(f"sample {s.sample_id!r}: bad role {s.role!r}")
            if s.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {s.sample_id!r}")
            seen[s.sample_id] = s.role
        for t in self.triplets:
            if t.query_id not in seen:
                raise ManifestError(f"triplet references missing query_id {t.query_id!r}")
            if t.target_id not in seen:
                raise ManifestError(f"triplet references missing target_id {t.target_id!r}")
            if seen[t.query_id] != "query":
                raise ManifestError(f"triplet query_id {t.query_id!r} is not a query sample")
            if seen[t.target_id] != "target":
                raise ManifestError(f"triplet target_id {t.target_id!r} is not a target sample")
            if not t.group_key:
                raise ManifestError(
                    f"triplet ({t.query_id!r}, {t.target_id!r}) has empty group_key"
                )


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    manifest.validate()
    lines = [
        json.dumps(
            {
                "record": "header",
                "version": manifest.version,
                "num_layers": manifest.num_layers,
                "dim": manifest.dim,
                "split": manifest.split,
            },
            sort_keys=True,
        )
    ]
    for s in manifest.samples:
        lines.append(
            json.dumps(
                {"record": "sample", "sample_id": s.sample_id, "role": s.role, "path": s.path},
                sort_keys=True,
            )
        )
    for t in manifest.triplets:
        lines.append(
            json.dumps(
                {
                    "record": "triplet",
                    "query_id": t.query_id,
                    "target_id": t.target_id,
                    "text": t.text,
                    "group_key": t.group_key,
                },
                sort_keys=True,
            )
        )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse and validate a manifest file. Errors carry 1-based line numbers."""
    manifest: Manifest | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid record: {exc}") from exc
            if not isinstance(rec, dict) or "record" not in rec:
                raise ManifestError(f"{path}:{lineno}: record missing 'record' field")
            kind = rec["record"]
            try:
                if kind == "header":
                    if manifest is not None:
                        raise ManifestError(f"{path}:{lineno}: duplicate header record")
                    manifest = Manifest(
                        version=int(rec["version"]),
                        num_layers=int(rec["num_layers"]),
                        dim=int(rec["dim"]),
                        split=str(rec["split"]),
                    )
                elif kind == "sample":
                    if manifest is None:
                        raise ManifestError(f"{path}:{lineno}: sample record before header")
                    manifest.samples.append(
                        SampleEntry(str(rec["sample_id"]), str(rec["role"]), str(rec["path"]))
                    )
                elif kind == "triplet":
                    if manifest is None:
                        raise ManifestError(f"{path}:{lineno}: triplet record before header")
                    manifest.triplets.append(
                        TripletRecord(
                            str(rec["query_id"]),
                            str(rec["target_id"]),
                            str(rec["text"]),
                            str(rec["group_key"]),
                        )
                    )
                else:
                    raise ManifestError(f"{path}:{lineno}: unknown record kind {kind!r}")
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
    if manifest is None:
        raise ManifestError(f"{path}: no header record found")
    try:
        manifest.validate()
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return manifest


class StackStore:
    """Resolves manifest-relative stack paths and reads/writes stack files."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path_for(self, rel_path: str) -> Path:
        return self.root / rel_path

    def read(self, rel_path: str) -> LayerStack:
        return read_stack_file(self.path_for(rel_path))

    def write(self, rel_path: str, stack: LayerStack) -> None:
        target = self.path_for(rel_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        write_stack_file(stack, target)


def store_for_manifest(manifest_path: str | os.PathLike) -> StackStore:
    return StackStore(Path(manifest_path).parent)


@dataclass
class DatasetStats:
    samples: int = 0
    triplets: int = 0
    num_groups: int = 0
    group_size_hist: dict[int, int] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_dataset(manifest: Manifest, store: StackStore) -> DatasetStats:
    """Open every referenced stack and cross-check it against the manifest.

    Per-stack failures do not abort the scan; they are collected into
    ``stats.errors`` with the offending sample_id.
    """
    stats = DatasetStats(samples=len(manifest.samples), triplets=len(manifest.triplets))
    for entry in manifest.samples:
        try:
            stack = store.read(entry.path)
        except (StackError, OSError) as exc:
            stats.errors.append(f"{entry.sample_id}: {exc}")
            continue
        if stack.sample_id != entry.sample_id:
            stats.errors.append(
                f"{entry.sample_id}: stored sample_id {stack.sample_id!r} does not match"
            )
        if stack.num_layers != manifest.num_layers or stack.dim != manifest.dim:
            stats.errors.append(
                f"{entry.sample_id}: shape ({stack.num_layers}, {stack.dim}) does not match "
                f"manifest ({manifest.num_layers}, {manifest.dim})"
            )
    group_sizes = collections.Counter(t.group_key for t in manifest.triplets)
    stats.num_groups = len(group_sizes)
    stats.group_size_hist = dict(collections.Counter(group_sizes.values()))
    return stats


def load_stacks(manifest: Manifest, store: StackStore) -> dict[str, LayerStack]:
    """Read every sample's stack into memory, keyed by sample_id."""
    return {entry.sample_id: store.read(entry.path) for entry in manifest.samples}


def stacks_as_array(
    manifest: Manifest,
    stacks: Mapping[str, LayerStack],
    ids: Iterable[str],
) -> np.ndarray:
    """Stack the named samples into a (N, L, d) float32 array."""
    rows = []
    for sid in ids:
        stack = stacks[sid]
        if stack.num_layers != manifest.num_layers or stack.dim != manifest.dim:
            raise InvalidStackError(
                f"{sid}: shape ({stack.num_layers}, {stack.dim}) does not match manifest"
            )
        rows.append(stack.data)
    return np.stack(rows, axis=0) if rows else np.zeros(
        (0, manifest.num_layers, manifest.dim), dtype=np.float32
    )
