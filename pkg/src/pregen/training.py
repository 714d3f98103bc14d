"""Contrastive training: batch planning, symmetric InfoNCE, AdamW.

Batches are planned ahead of time. In hard-negative mode, triplets whose
reference videos come from the same source (equal group_key) are packed into
the same batch whenever capacity allows, so the in-batch negatives are the
visually confusable ones; no online similarity search happens. Training is
fully deterministic given the seed: batch plans come from seeded shuffles
and per-sample dropout noise is keyed by (seed, step, tower, sample index).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (
    ModelConfig,
    ModelParams,
    backward_batch,
    forward_batch,
    init_params,
)
from .stackio import LayerStack, Manifest, StackStore, TripletRecord, load_stacks
from .util import atomic_write_bytes, derived_seed, keyed_rng

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


class ZeroNormError(TrainingError):
    def __init__(self, side: str, row: int):
        super().__init__(f"zero-norm embedding: {side} row {row}")
        self.side = side
        self.row = row


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    lr: float = 5e-5
    weight_decay: float = 0.05
    epochs: int = 1
    grad_clip: float = 1.0
    temperature: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hard_negative_batching: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.temperature <= 0:
            raise TrainingError(f"temperature must be > 0, got {self.temperature}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError("adam betas must be in [0, 1)")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_clip <= 0:
            raise TrainingError(f"grad_clip must be > 0, got {self.grad_clip}")


def similarity_matrix(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities S[i, j] = cos(queries[i], targets[j])."""
    q = np.asarray(queries)
    t = np.asarray(targets)
    if q.ndim != 2 or t.ndim != 2 or q.shape[1] != t.shape[1]:
        raise TrainingError(f"incompatible embedding shapes {q.shape} and {t.shape}")
    qn = np.linalg.norm(q, axis=1)
    tn = np.linalg.norm(t, axis=1)
    for side, norms in (("query", qn), ("target", tn)):
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ZeroNormError(side, int(bad[0]))
    return (q / qn[:, None]) @ (t / tn[:, None]).T


def cosine_backward(
    queries: np.ndarray, targets: np.ndarray, sim: np.ndarray, d_sim: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a cosine-similarity matrix w.r.t. both embedding sides."""
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    tn = np.linalg.norm(targets, axis=1, keepdims=True)
    q_hat = queries / qn
    t_hat = targets / tn
    d_q = (d_sim @ t_hat - (d_sim * sim).sum(axis=1, keepdims=True) * q_hat) / qn
    d_t = (d_sim.T @ q_hat - (d_sim * sim).sum(axis=0)[:, None] * t_hat) / tn
    return d_q, d_t


def info_nce(sim: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE over an in-batch similarity matrix.

    Averages the query-to-target (row softmax) and target-to-query (column
    softmax) cross-entropies whose positives sit on the diagonal. Returns the
    loss and its exact gradient w.r.t. the similarity entries. Softmaxes are
    computed with max subtraction.
    """
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise TrainingError(f"similarity matrix must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise TrainingError("similarity matrix contains non-finite entries")
    if temperature <= 0:
        raise TrainingError(f"temperature must be > 0, got {temperature}")
    n = s.shape[0]
    logits = s / temperature

    row_shift = logits - logits.max(axis=1, keepdims=True)
    row_logprob = row_shift - np.log(np.exp(row_shift).sum(axis=1, keepdims=True))
    col_shift = logits - logits.max(axis=0, keepdims=True)
    col_logprob = col_shift - np.log(np.exp(col_shift).sum(axis=0, keepdims=True))

    diag = np.arange(n)
    loss = float(-(row_logprob[diag, diag].sum() + col_logprob[diag, diag].sum()) / (2 * n))

    row_soft = np.exp(row_logprob)
    col_soft = np.exp(col_logprob)
    eye = np.eye(n)
    d_sim = (row_soft + col_soft - 2 * eye) / (2 * n * temperature)
    return loss, d_sim


@dataclass
class BatchPlan:
    batches: list[list[int]]
    dropped: list[int]
    batch_size: int
    seed: int
    hard_negative_batching: bool

    def covered_indices(self) -> list[int]:
        return [i for batch in self.batches for i in batch]


def build_batches(
    triplets: Sequence[TripletRecord],
    batch_size: int,
    seed: int,
    hard_negative_batching: bool,
) -> BatchPlan:
    """Deterministic batch plan over triplet indices.

    Hard mode shuffles same-group buckets, then packs whole buckets first-fit
    into fixed-size batches, splitting a bucket only when nothing else fits.
    Random mode is a single seeded shuffle chunked by batch size. A trailing
    batch of size >= 2 is kept; a trailing singleton is dropped and logged.
    """
    if batch_size < 2:
        raise TrainingError(f"batch_size must be >= 2, got {batch_size}")
    if len(triplets) < 2:
        raise TrainingError(f"need at least 2 triplets, got {len(triplets)}")
    rng = np.random.default_rng(seed)

    if hard_negative_batching:
        buckets: dict[str, list[int]] = {}
        for idx, t in enumerate(triplets):
            buckets.setdefault(t.group_key, []).append(idx)
        bucket_list = list(buckets.values())
        order = rng.permutation(len(bucket_list))
        queue = []
        for bi in order:
            bucket = bucket_list[bi]
            queue.append([bucket[j] for j in rng.permutation(len(bucket))])
        stream: list[list[int]] = queue
    else:
        stream = [[int(i)] for i in rng.permutation(len(triplets))]

    batches: list[list[int]] = []
    current: list[int] = []
    pending = list(stream)
    while pending:
        room = batch_size - len(current)
        pick = next((j for j, b in enumerate(pending) if len(b) <= room), None)
        if pick is None:
            head = pending[0]
            current.extend(head[:room])
            pending[0] = head[room:]
            batches.append(current)
            current = []
        else:
            current.extend(pending.pop(pick))
            if len(current) == batch_size:
                batches.append(current)
                current = []
    dropped: list[int] = []
    if len(current) >= 2:
        batches.append(current)
    elif current:
        dropped = current
        logger.warning("dropping trailing singleton batch (triplet index %d)", current[0])
    return BatchPlan(batches, dropped, batch_size, seed, hard_negative_batching)


def save_batch_plan(plan: BatchPlan, path) -> None:
    lines = [
        f"# batch_size={plan.batch_size} seed={plan.seed} "
        f"hard_negative_batching={plan.hard_negative_batching} "
        f"dropped={' '.join(map(str, plan.dropped)) if plan.dropped else '-'}"
    ]
    lines.extend(" ".join(map(str, batch)) for batch in plan.batches)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_batch_plan(path) -> BatchPlan:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise TrainingError(f"{path}: missing batch plan header line")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    batches = [[int(x) for x in ln.split()] for ln in lines[1:]]
    dropped = [] if meta.get("dropped", "-") == "-" else [int(x) for x in meta["dropped"].split()]
    return BatchPlan(
        batches,
        dropped,
        int(meta["batch_size"]),
        int(meta["seed"]),
        meta["hard_negative_batching"] == "True",
    )


def same_group_pairs(plan: BatchPlan, triplets: Sequence[TripletRecord]) -> int:
    """Number of co-resident same-group triplet pairs across all batches."""
    total = 0
    for batch in plan.batches:
        counts: dict[str, int] = {}
        for idx in batch:
            key = triplets[idx].group_key
            counts[key] = counts.get(key, 0) + 1
        total += sum(c * (c - 1) // 2 for c in counts.values())
    return total


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
    )


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g.astype(np.float64))))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise TrainingError("gradient norm is non-finite")
    return norm


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / ||g|| when the global norm exceeds
    max_norm. Returns (gradients, pre-clip global norm)."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return {k: g.copy() for k, g in grads.items()}, norm


def adamw_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """One decoupled-weight-decay Adam update; pure function of its inputs."""
    if set(grads) != set(params.tensors):
        raise TrainingError("gradient tensor names do not match parameters")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise TrainingError(f"gradient shape mismatch for {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        new_params[name] = theta - config.lr * update - config.lr * config.weight_decay * theta
        new_m[name] = m
        new_v[name] = v
    return ModelParams(new_params), OptimizerState(new_m, new_v, t)


@dataclass
class StepRecord:
    step: int
    batch_size: int
    loss: float
    grad_norm: float
    wall_time: float


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)


def save_training_log(log: TrainingLog, path) -> None:
    lines = [
        f"step={r.step} batch_size={r.batch_size} loss={r.loss:.8f} "
        f"grad_norm={r.grad_norm:.8f} wall_time={r.wall_time:.6f}"
        for r in log.records
    ]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed if epoch == 0 else derived_seed(seed, 7, epoch)


def train_step(
    params: ModelParams,
    opt_state: OptimizerState,
    query_stacks: np.ndarray,
    target_stacks: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int,
) -> tuple[ModelParams, OptimizerState, float, float]:
    """One optimizer step over a (queries, targets) batch pair.

    Both towers share parameters; each target embedding receives gradient
    from the query-to-target and the target-to-query loss directions.
    Returns (params, state, loss, pre-clip grad norm).
    """
    n = query_stacks.shape[0]
    rngs_q = [keyed_rng(train_config.seed, step, 0, i) for i in range(n)]
    rngs_t = [keyed_rng(train_config.seed, step, 1, i) for i in range(n)]
    e_q, cache_q = forward_batch(query_stacks, params, model_config, "train", rngs_q)
    e_t, cache_t = forward_batch(target_stacks, params, model_config, "train", rngs_t)
    sim = similarity_matrix(e_q, e_t)
    loss, d_sim = info_nce(sim, train_config.temperature)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}")
    d_q, d_t = cosine_backward(e_q, e_t, sim, d_sim)
    grads_q, _ = backward_batch(cache_q, d_q, params, model_config)
    grads_t, _ = backward_batch(cache_t, d_t, params, model_config)
    grads = {k: grads_q[k] + grads_t[k] for k in grads_q}
    grads, norm = clip_grad_norm(grads, train_config.grad_clip)
    params, opt_state = adamw_step(params, grads, opt_state, train_config)
    return params, opt_state, loss, norm


def train(
    manifest: Manifest,
    store: StackStore,
    model_config: ModelConfig,
    train_config: TrainConfig,
    initial_params: ModelParams | None = None,
    stacks: Mapping[str, LayerStack] | None = None,
    max_steps: int | None = None,
) -> tuple[ModelParams, TrainingLog]:
    """Train the aggregator on a manifest's triplets.

    Deterministic given the config seed: parameter init, batch plans and
    dropout streams all derive from it. ``max_steps`` caps the total number
    of optimizer steps across epochs (None means run all planned batches).
    """
    train_config.validate()
    model_config.validate()
    if manifest.num_layers != model_config.num_layers or manifest.dim != model_config.dim:
        raise TrainingError(
            f"manifest shape ({manifest.num_layers}, {manifest.dim}) does not match model "
            f"config ({model_config.num_layers}, {model_config.dim})"
        )
    if not manifest.triplets:
        raise TrainingError("manifest has no triplets to train on")
    if stacks is None:
        stacks = load_stacks(manifest, store)
    params = initial_params if initial_params is not None else init_params(
        model_config, train_config.seed
    )
    params.check_shapes(model_config)
    opt_state = init_optimizer_state(params)
    log = TrainingLog()
    step = 0
    for epoch in range(train_config.epochs):
        plan = build_batches(
            manifest.triplets,
            train_config.batch_size,
            _epoch_seed(train_config.seed, epoch),
            train_config.hard_negative_batching,
        )
        for batch in plan.batches:
            if max_steps is not None and step >= max_steps:
                return params, log
            step += 1
            t0 = time.perf_counter()
            q = np.stack([stacks[manifest.triplets[i].query_id].data for i in batch])
            t = np.stack([stacks[manifest.triplets[i].target_id].data for i in batch])
            params, opt_state, loss, norm = train_step(
                params, opt_state, q, t, model_config, train_config, step
            )
            log.records.append(
                StepRecord(step, len(batch), loss, norm, time.perf_counter() - t0)
            )
    return params, log
