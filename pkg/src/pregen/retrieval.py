"""Corpus embedding, exact cosine ranking and Recall@k reports.

Retrieval is brute force by design: every query is scored against the full
target gallery with unit-norm dot products (scores accumulated in float64),
ranks are fully deterministic (ties break by ascending target id), and the
report carries both per-query ranks and the Recall@k aggregates.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ModelConfig, ModelParams, forward_batch
from .stackio import LayerStack, Manifest, StackStore, load_stacks
from .util import atomic_write_bytes

DEFAULT_KS = (1, 5, 10, 50)
THREADS_ENV = "PREGEN_THREADS"
_EMBED_CHUNK = 256


class RetrievalError(Exception):
    pass


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class EmbeddingMatrix:
    ids: list[str]
    vectors: np.ndarray  # (N, D), unit-norm rows

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise RetrievalError("ids and vector rows disagree")
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate ids in embedding matrix")

    def row_for(self, sample_id: str) -> np.ndarray:
        return self.vectors[self.ids.index(sample_id)]


def embed_corpus(
    manifest: Manifest,
    side: str,
    store: StackStore,
    params: ModelParams,
    config: ModelConfig,
    stacks: Mapping[str, LayerStack] | None = None,
    threads: int | None = None,
) -> EmbeddingMatrix:
    """Eval-mode embeddings for every manifest sample of the given role,
    L2-normalized, in manifest order."""
    if side not in ("query", "target"):
        raise RetrievalError(f"side must be 'query' or 'target', got {side!r}")
    if manifest.num_layers != config.num_layers or manifest.dim != config.dim:
        raise RetrievalError(
            f"manifest shape ({manifest.num_layers}, {manifest.dim}) does not match "
            f"model config ({config.num_layers}, {config.dim})"
        )
    entries = [s for s in manifest.samples if s.role == side]
    if stacks is None:
        stacks = {e.sample_id: store.read(e.path) for e in entries}
    batch = np.stack([stacks[e.sample_id].data for e in entries]) if entries else np.zeros(
        (0, config.num_layers, config.dim), dtype=np.float32
    )

    n_threads = default_threads() if threads is None else max(1, threads)
    chunks = [
        (start, batch[start : start + _EMBED_CHUNK])
        for start in range(0, len(entries), _EMBED_CHUNK)
    ]
    out = np.zeros((len(entries), config.out_dim), dtype=params.dtype)

    def run(chunk):
        start, data = chunk
        emb, _ = forward_batch(data, params, config, "eval")
        return start, emb

    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for start, emb in results:
        out[start : start + emb.shape[0]] = emb

    norms = np.linalg.norm(out, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise RetrievalError(f"zero-norm embedding for sample {entries[zero[0]].sample_id!r}")
    return EmbeddingMatrix([e.sample_id for e in entries], out / norms[:, None])


def rank(query_row: np.ndarray, targets: EmbeddingMatrix) -> list[str]:
    """Target ids by descending cosine, ties broken by ascending id."""
    q = np.asarray(query_row, dtype=np.float64)
    if q.shape != (targets.vectors.shape[1],):
        raise RetrievalError(
            f"query dim {q.shape} does not match target dim ({targets.vectors.shape[1]},)"
        )
    scores = targets.vectors.astype(np.float64) @ q
    order = np.lexsort((np.asarray(targets.ids), -scores))
    return [targets.ids[i] for i in order]


def recall_at_k(ranks: Sequence[int], ks: Sequence[int]) -> dict[int, float]:
    """Fraction of queries whose ground-truth rank is <= k, per k."""
    if not ranks:
        raise RetrievalError("no query ranks to aggregate")
    if any(r < 1 for r in ranks):
        raise RetrievalError("ranks are 1-based and must be >= 1")
    arr = np.asarray(ranks)
    return {int(k): float(np.mean(arr <= k)) for k in ks}


@dataclass
class QueryResult:
    query_id: str
    target_id: str
    rank: int
    top_ids: list[str]


@dataclass
class RetrievalReport:
    per_query: list[QueryResult]
    recall: dict[int, float]
    ks: tuple[int, ...]
    num_targets: int

    @property
    def query_count(self) -> int:
        return len(self.per_query)


def evaluate(
    manifest: Manifest,
    store: StackStore,
    params: ModelParams,
    config: ModelConfig,
    ks: Sequence[int] = DEFAULT_KS,
    variant_override: str | None = None,
    exclude_self: bool = False,
    stacks: Mapping[str, LayerStack] | None = None,
    top_k_kept: int = 10,
) -> RetrievalReport:
    """Rank every triplet's query against the full target gallery.

    ``variant_override`` swaps the forward variant when architecturally
    compatible with the checkpoint: the encoder variants (full, no_pe,
    avg_pool) share parameters, while single_layer bypasses the encoder and
    needs a checkpoint trained that way. ``exclude_self`` removes gallery
    targets that stem from the query's own source (same group_key) other
    than the ground truth, for galleries that mix in reference material.
    """
    if not manifest.triplets:
        raise RetrievalError("manifest has no triplets (no ground truth to score)")
    eff_config = config
    if variant_override is not None and variant_override != config.variant:
        encoder_variants = {"full", "no_pe", "avg_pool"}
        if not (variant_override in encoder_variants and config.variant in encoder_variants):
            raise RetrievalError(
                f"variant override {variant_override!r} is incompatible with a "
                f"{config.variant!r} checkpoint; single_layer needs its own checkpoint"
            )
        eff_config = dataclasses.replace(config, variant=variant_override)

    if stacks is None:
        stacks = load_stacks(manifest, store)
    queries = embed_corpus(manifest, "query", store, params, eff_config, stacks=stacks)
    gallery = embed_corpus(manifest, "target", store, params, eff_config, stacks=stacks)

    q_index = {sid: i for i, sid in enumerate(queries.ids)}
    target_group = {t.target_id: t.group_key for t in manifest.triplets}
    ks = tuple(sorted(set(int(k) for k in ks)))
    per_query: list[QueryResult] = []
    for triplet in manifest.triplets:
        row = queries.vectors[q_index[triplet.query_id]]
        ordered = rank(row, gallery)
        if exclude_self:
            ordered = [
                tid
                for tid in ordered
                if tid == triplet.target_id or target_group.get(tid) != triplet.group_key
            ]
        try:
            position = ordered.index(triplet.target_id) + 1
        except ValueError:
            raise RetrievalError(
                f"ground-truth target {triplet.target_id!r} absent from gallery"
            ) from None
        per_query.append(
            QueryResult(triplet.query_id, triplet.target_id, position, ordered[:top_k_kept])
        )
    recall = recall_at_k([r.rank for r in per_query], ks)
    return RetrievalReport(per_query, recall, ks, len(gallery.ids))


def report_to_text(report: RetrievalReport) -> str:
    head = " ".join(f"R@{k}" for k in report.ks)
    vals = " ".join(f"{report.recall[k]:.4f}" for k in report.ks)
    lines = [
        f"queries: {report.query_count}  targets: {report.num_targets}",
        head,
        vals,
    ]
    return "\n".join(lines) + "\n"


def save_report(report: RetrievalReport, path) -> None:
    """Line-delimited report: one record per query, then the aggregate."""
    lines = []
    for r in report.per_query:
        lines.append(
            json.dumps(
                {
                    "record": "query",
                    "query_id": r.query_id,
                    "target_id": r.target_id,
                    "rank": r.rank,
                    "top_ids": r.top_ids,
                },
                sort_keys=True,
            )
        )
    lines.append(
        json.dumps(
            {
                "record": "aggregate",
                "query_count": report.query_count,
                "num_targets": report.num_targets,
                "recall": {str(k): report.recall[k] for k in report.ks},
            },
            sort_keys=True,
        )
    )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
