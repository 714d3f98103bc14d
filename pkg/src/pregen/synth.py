"""Synthetic layer-stack datasets with a known combinatorial answer key.

Each concept is a length-L code over an alphabet of size A. Layer l of a
sample's stack embeds the code symbol at position l (a fixed random unit
vector per (layer, symbol), plus Gaussian noise). Identifying a sample
therefore requires reading *all* layers: any single layer only narrows the
candidates to the samples sharing that one symbol, which makes the
multi-layer-versus-single-layer comparison an exact, brute-force-checkable
statement instead of an empirical one.

Group structure: every concept spawns ``group_size`` target variants that
differ from the concept's canonical code in exactly the last position, plus
one query per variant encoding the variant's full code with independent
noise. Variants of one concept share a group_key, agree on all but the last
layer, and are therefore each other's hardest negatives.

Concept codes are built so that:

* codes are pairwise distinct, and when C <= A**(L-1) even the (L-1)-prefixes
  are distinct, which makes every emitted target code unique in the corpus
  (exact retrieval is then unambiguous at zero noise);
* at every position, no symbol is carried by exactly one concept (a symbol
  unique to one concept would make that single layer sufficient to identify
  it, defeating the point of the construction).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .stackio import (
    LayerStack,
    Manifest,
    SampleEntry,
    StackStore,
    TripletRecord,
    save_manifest,
)

logger = logging.getLogger(__name__)

MAX_CODEBOOK_COSINE = 0.5
_CODEBOOK_TRY_LIMIT = 10_000


class SynthConfigError(ValueError):
    """Config asks for an impossible construction."""


@dataclass(frozen=True)
class SynthConfig:
    num_layers: int = 4
    dim: int = 16
    alphabet_size: int = 4
    num_concepts: int = 64
    group_size: int = 3
    noise_sigma: float = 0.05
    seed: int = 0
    split: str = "train"

    def validate(self) -> None:
        if self.num_layers < 1:
            raise SynthConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise SynthConfigError(f"dim must be even and >= 2, got {self.dim}")
        if self.alphabet_size < 2:
            raise SynthConfigError(f"alphabet_size must be >= 2, got {self.alphabet_size}")
        if self.num_concepts < 1:
            raise SynthConfigError(f"num_concepts must be >= 1, got {self.num_concepts}")
        if self.num_concepts > self.alphabet_size**self.num_layers:
            raise SynthConfigError(
                f"num_concepts {self.num_concepts} exceeds the {self.alphabet_size}^"
                f"{self.num_layers} distinct codes available"
            )
        if self.group_size < 1:
            raise SynthConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.group_size >= self.alphabet_size:
            raise SynthConfigError(
                f"group_size {self.group_size} needs {self.group_size} distinct last-position "
                f"edits but the alphabet only offers {self.alphabet_size - 1}"
            )
        if self.noise_sigma < 0:
            raise SynthConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.split not in ("train", "test"):
            raise SynthConfigError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass
class SynthDataset:
    stacks: dict[str, LayerStack]
    manifest: Manifest
    concept_codes: np.ndarray  # (C, L) int
    target_codes: dict[str, np.ndarray]
    codebook: np.ndarray  # (L, A, d) float32


def build_codebook(rng: np.random.Generator, num_layers: int, alphabet: int, dim: int) -> np.ndarray:
    """Per layer, `alphabet` random unit vectors with pairwise cosine <= 0.5."""
    book = np.zeros((num_layers, alphabet, dim), dtype=np.float64)
    for layer in range(num_layers):
        accepted = 0
        tries = 0
        while accepted < alphabet:
            tries += 1
            if tries > _CODEBOOK_TRY_LIMIT:
                raise SynthConfigError(
                    f"cannot place {alphabet} unit vectors with pairwise cosine <= "
                    f"{MAX_CODEBOOK_COSINE} in dim {dim}"
                )
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if accepted and np.max(np.abs(book[layer, :accepted] @ v)) > MAX_CODEBOOK_COSINE:
                continue
            book[layer, accepted] = v
            accepted += 1
    return book.astype(np.float32)


def _balanced_column(rng: np.random.Generator, count: int, symbols: int) -> np.ndarray:
    reps = -(-count // symbols)  # ceil
    col = np.tile(np.arange(symbols), reps)[:count]
    rng.shuffle(col)
    return col


def _distinct_tuples(
    rng: np.random.Generator, count: int, width: int, symbols: int
) -> np.ndarray:
    """`count` distinct rows drawn from {0..symbols-1}^width."""
    space = symbols**width
    if count > space:
        raise SynthConfigError(
            f"cannot build {count} distinct codes over {symbols} usable symbols "
            f"and {width} positions"
        )
    if space <= 1 << 22:
        chosen = rng.permutation(space)[:count].astype(np.int64)
        codes = np.zeros((count, width), dtype=np.int64)
        for pos in range(width - 1, -1, -1):
            codes[:, pos] = chosen % symbols
            chosen //= symbols
        return codes
    # space too large to enumerate: draw and redraw collisions
    codes = rng.integers(0, symbols, size=(count, width), dtype=np.int64)
    for _ in range(1000):
        _, first = np.unique(codes, axis=0, return_index=True)
        keep = np.zeros(count, dtype=bool)
        keep[first] = True
        if keep.all():
            return codes
        codes[~keep] = rng.integers(0, symbols, size=(int((~keep).sum()), width))
    raise SynthConfigError("could not draw distinct codes; config too tight")


def _fix_singleton_symbols(
    rng: np.random.Generator, codes: np.ndarray, symbols: int
) -> None:
    """Mutate codes in place until no (position, symbol) pair is carried by
    exactly one code, keeping rows distinct. A symbol unique to one code
    would let a single layer identify it."""
    count, width = codes.shape
    for _ in range(100):
        clean = True
        for pos in range(width):
            occ = np.bincount(codes[:, pos], minlength=symbols)
            for sym in np.flatnonzero(occ == 1):
                clean = False
                donor_sym = int(np.argmax(occ))
                candidates = np.flatnonzero(codes[:, pos] == donor_sym)
                rng.shuffle(candidates)
                moved = False
                for j in candidates:
                    trial = codes[j].copy()
                    trial[pos] = sym
                    if not (codes == trial).all(axis=1).any():
                        codes[j, pos] = sym  # recruit a second carrier
                        moved = True
                        break
                if not moved:
                    i = int(np.flatnonzero(codes[:, pos] == sym)[0])
                    trial = codes[i].copy()
                    trial[pos] = donor_sym
                    if not (codes == trial).all(axis=1).any():
                        codes[i, pos] = donor_sym  # retire the lone carrier
                occ = np.bincount(codes[:, pos], minlength=symbols)
        if clean:
            return
    raise SynthConfigError(
        "cannot arrange codes so every used symbol is shared; config too tight"
    )


def build_concept_codes(
    rng: np.random.Generator, num_layers: int, alphabet: int, count: int
) -> np.ndarray:
    """Distinct length-L codes whose per-position symbols are never unique.

    When count <= usable_symbols**(L-1) the (L-1)-prefixes themselves are
    distinct, which keeps last-position edits of different concepts from
    colliding. Restricts to count // 2 symbols per position when the concept
    count sits between A and 2A, since all A symbols cannot each appear
    twice there.
    """
    if count == 1:
        return np.zeros((1, num_layers), dtype=np.int64)
    if alphabet < count < 2 * alphabet:
        symbols = max(1, count // 2)
    else:
        symbols = alphabet

    prefix_len = num_layers - 1
    if prefix_len >= 1 and count <= symbols**prefix_len:
        prefix = _distinct_tuples(rng, count, prefix_len, symbols)
        if count > alphabet:
            _fix_singleton_symbols(rng, prefix, symbols)
        last = _balanced_column(rng, count, symbols)[:, None]
        codes = np.concatenate([prefix, last], axis=1)
    else:
        codes = _distinct_tuples(rng, count, num_layers, symbols)
        if count > alphabet:
            _fix_singleton_symbols(rng, codes, symbols)
    _assert_code_invariants(codes, alphabet)
    return codes


def _assert_code_invariants(codes: np.ndarray, alphabet: int) -> None:
    count, num_layers = codes.shape
    if len(np.unique(codes, axis=0)) != count:
        raise AssertionError("concept codes are not pairwise distinct")
    if count > alphabet:
        for layer in range(num_layers):
            occ = np.bincount(codes[:, layer], minlength=alphabet)
            if np.any(occ == 1):
                raise AssertionError(
                    f"position {layer}: some symbol identifies a single concept"
                )


def _encode(
    codebook: np.ndarray, code: np.ndarray, rng: np.random.Generator, sigma: float
) -> np.ndarray:
    num_layers, _, dim = codebook.shape
    rows = codebook[np.arange(num_layers), code].astype(np.float64)
    if sigma > 0:
        rows = rows + sigma * rng.standard_normal((num_layers, dim))
    return rows.astype(np.float32)


def generate_synthetic_dataset(config: SynthConfig) -> SynthDataset:
    """Deterministic dataset construction; byte-identical for equal configs.

    Structure (codebook, concept codes, variant edits) depends only on
    ``config.seed``; per-sample noise additionally depends on ``config.split``
    so train and test share the answer key but not the noise.
    """
    config.validate()
    structure_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    )
    split_index = 0 if config.split == "train" else 1
    noise_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=config.seed, spawn_key=(1, split_index)))
    )

    L, A, C, g = (
        config.num_layers,
        config.alphabet_size,
        config.num_concepts,
        config.group_size,
    )
    codebook = build_codebook(structure_rng, L, A, config.dim)
    concept_codes = build_concept_codes(structure_rng, L, A, C)

    stacks: dict[str, LayerStack] = {}
    target_codes: dict[str, np.ndarray] = {}
    samples: list[SampleEntry] = []
    triplets: list[TripletRecord] = []
    prefix = config.split

    for concept in range(C):
        code = concept_codes[concept]
        group_key = f"c{concept:04d}"
        last = int(code[-1])
        alternates = np.array([s for s in range(A) if s != last])
        chosen = alternates[structure_rng.permutation(len(alternates))[:g]]
        for v, alt in enumerate(chosen):
            variant_code = code.copy()
            variant_code[-1] = int(alt)
            target_id = f"t{concept:04d}_{v}"
            query_id = f"q{concept:04d}_{v}"
            stacks[target_id] = LayerStack(
                target_id, _encode(codebook, variant_code, noise_rng, config.noise_sigma)
            )
            stacks[query_id] = LayerStack(
                query_id, _encode(codebook, variant_code, noise_rng, config.noise_sigma)
            )
            target_codes[target_id] = variant_code
            samples.append(
                SampleEntry(target_id, "target", f"stacks/{prefix}/{target_id}.pgstack")
            )
            samples.append(
                SampleEntry(query_id, "query", f"stacks/{prefix}/{query_id}.pgstack")
            )
            triplets.append(
                TripletRecord(
                    query_id,
                    target_id,
                    f"change the final symbol from {last} to {int(alt)}",
                    group_key,
                )
            )

    manifest = Manifest(
        version=1,
        num_layers=L,
        dim=config.dim,
        split=config.split,
        samples=samples,
        triplets=triplets,
    )
    manifest.validate()
    return SynthDataset(stacks, manifest, concept_codes, target_codes, codebook)


def write_dataset(dataset: SynthDataset, out_dir: str | Path) -> Path:
    """Write stacks plus the manifest under `out_dir`; returns the manifest path."""
    out_dir = Path(out_dir)
    store = StackStore(out_dir)
    for entry in dataset.manifest.samples:
        store.write(entry.path, dataset.stacks[entry.sample_id])
    manifest_path = out_dir / f"{dataset.manifest.split}.manifest"
    save_manifest(dataset.manifest, manifest_path)
    return manifest_path


def generate_split_pair(config: SynthConfig) -> tuple[SynthDataset, SynthDataset]:
    """Train and test datasets sharing codebook and codes, independent noise."""
    train = generate_synthetic_dataset(replace(config, split="train"))
    test = generate_synthetic_dataset(replace(config, split="test"))
    return train, test


def oracle_nn_recall(
    stacks: Mapping[str, LayerStack],
    manifest: Manifest,
    layer_subset: Iterable[int],
) -> float:
    """Exact nearest-neighbor Recall@1 using only the chosen layer rows.

    Brute force in float64: for every triplet, the query's selected rows are
    flattened and compared by cosine against every target's. Ties break by
    ascending target id. Independent of the trained model path by design.
    """
    subset = sorted(set(int(l) for l in layer_subset))
    if not subset:
        raise ValueError("layer_subset must be non-empty")
    if subset[0] < 1 or subset[-1] > manifest.num_layers:
        raise ValueError(
            f"layer_subset {subset} outside 1..{manifest.num_layers}"
        )
    rows = [l - 1 for l in subset]
    target_ids = sorted(manifest.sample_ids("target"))
    if not manifest.triplets:
        raise ValueError("manifest has no triplets to score")

    gallery = np.stack(
        [stacks[t].data[rows].astype(np.float64).ravel() for t in target_ids]
    )
    gallery_norms = np.linalg.norm(gallery, axis=1)
    hits = 0
    for triplet in manifest.triplets:
        q = stacks[triplet.query_id].data[rows].astype(np.float64).ravel()
        scores = gallery @ q / (gallery_norms * np.linalg.norm(q))
        best = int(np.argmax(scores))  # argmax takes the first max: id-ascending
        if target_ids[best] == triplet.target_id:
            hits += 1
    return hits / len(manifest.triplets)
