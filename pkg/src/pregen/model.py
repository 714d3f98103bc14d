"""Layer-stack aggregator: encoder over per-layer features with exact backprop.

The trainable model maps an (L, d) stack of per-layer features to a single
embedding. The default ("full") path prepends a learnable CLS vector, adds
sinusoidal position encodings indexed by layer order, runs a pre-layernorm
Transformer encoder, reads the CLS output, and projects it through a GELU
MLP head. Forward and backward passes are implemented directly in numpy so
gradients are exact, replayable, and finite-difference checkable.

Variants used for ablations:

* ``full``          CLS read-out over all layers (default).
* ``single_layer``  MLP head applied to the last layer row only; no encoder,
                    no CLS, no position encodings.
* ``no_pe``         full path with all position-encoding additions skipped.
* ``avg_pool``      mean over the encoder outputs of the layer tokens; the
                    CLS token is omitted from the sequence.

All parameters live in a flat name -> array mapping so optimizer steps,
clipping, checkpointing and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .stackio import LayerStack
from .util import atomic_write_bytes, checksum64

VARIANTS = ("full", "single_layer", "no_pe", "avg_pool")
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class ShapeMismatchError(ModelError):
    """A tensor's shape disagrees with the model configuration."""


class NonFiniteComputeError(ModelError):
    """A forward stage produced NaN or infinity."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values produced at stage {stage!r}")
        self.stage = stage


class CheckpointError(ModelError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    dim: int
    heads: int = 8
    encoder_depth: int = 1
    ffn_dim: int = 0  # 0 -> 4 * dim
    mlp_depth: int = 2
    mlp_hidden: int = 14336
    output_dim: int = 0  # 0 -> dim
    dropout: float = 0.1
    variant: str = "full"

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.dim

    @property
    def out_dim(self) -> int:
        return self.output_dim if self.output_dim else self.dim

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ModelError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ModelError(f"dim must be even and >= 2, got {self.dim}")
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.encoder_depth < 1:
            raise ModelError("encoder_depth must be >= 1")
        if self.mlp_depth < 1:
            raise ModelError("mlp_depth must be >= 1")
        if self.out_dim < 2:
            raise ModelError(f"output embedding dim must be >= 2, got {self.out_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in a stable order."""
    config.validate()
    d, f = config.dim, config.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {"cls": (d,)}
    for i in range(config.encoder_depth):
        p = f"enc{i}"
        shapes[f"{p}.ln1.scale"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{name}"] = (d,)
        shapes[f"{p}.ln2.scale"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_ln.scale"] = (d,)
    shapes["final_ln.bias"] = (d,)
    dims = [d] + [config.mlp_hidden] * (config.mlp_depth - 1) + [config.out_dim]
    for i in range(config.mlp_depth):
        shapes[f"head.w{i + 1}"] = (dims[i], dims[i + 1])
        shapes[f"head.b{i + 1}"] = (dims[i + 1],)
    return shapes


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def check_shapes(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatchError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatchError(
                    f"tensor {name!r}: shape {self.tensors[name].shape} != expected {shape}"
                )

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ModelError(f"tensor {name!r} contains non-finite values")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform linear weights, zero biases, unit layernorm scales,
    CLS ~ N(0, 0.02^2). Deterministic in the given seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name == "cls":
            tensors[name] = (0.02 * rng.standard_normal(shape)).astype(np.float32)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 2:
            bound = float(np.sqrt(6.0 / (shape[0] + shape[1])))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ModelParams(tensors)


def zero_grads(config: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(config).items()}


def sinusoidal_pe(position: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos position code: PE[2i] = sin(pos / 10000^(2i/d)),
    PE[2i+1] = cos(pos / 10000^(2i/d))."""
    if dim % 2 != 0:
        raise ModelError(f"sinusoidal position encoding needs even dim, got {dim}")
    if position < 0:
        raise ModelError(f"position must be non-negative, got {position}")
    i = np.arange(dim // 2, dtype=np.float64)
    angles = position / np.power(10000.0, 2.0 * i / dim)
    pe = np.empty(dim, dtype=np.float64)
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe


def pe_table(positions: Sequence[int], dim: int, dtype) -> np.ndarray:
    return np.stack([sinusoidal_pe(p, dim) for p in positions]).astype(dtype)


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv_std
    return xhat * scale + bias, xhat, inv_std


def _layer_norm_backward(dy, xhat, inv_std, scale):
    dxhat = dy * scale
    dscale = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dscale, dbias


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteComputeError(stage)


def _draw_mask(rng: np.random.Generator, shape, p: float, dtype) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype.type(1.0 - p)


@dataclass
class ForwardCache:
    """Intermediates required for an exact, replayable backward pass."""

    config: ModelConfig
    variant: str
    batch: int
    seq: np.ndarray | None = None  # encoder input after PE, (B, T, d)
    blocks: list[dict] = field(default_factory=list)
    final_ln: dict | None = None
    pooled: np.ndarray | None = None  # (B, d) head input
    head: list[dict] = field(default_factory=list)
    embeddings: np.ndarray | None = None


def forward_batch(
    stacks: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rngs: Sequence[np.random.Generator] | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the aggregator over a (B, L, d) batch; returns (B, D) embeddings.

    In train mode each sample's dropout masks come from its own generator in
    ``rngs``, so results are independent of batch composition order. Eval
    mode applies no dropout and returns no cache.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    config.validate()
    dtype = params.dtype
    x = np.ascontiguousarray(stacks, dtype=dtype)
    if x.ndim != 3 or x.shape[1] != config.num_layers or x.shape[2] != config.dim:
        raise ShapeMismatchError(
            f"stack batch shape {x.shape} does not match (B, {config.num_layers}, {config.dim})"
        )
    batch = x.shape[0]
    train = mode == "train"
    p = config.dropout if train else 0.0
    if train and p > 0.0:
        if rngs is None or len(rngs) != batch:
            raise ModelError("train mode with dropout needs one rng per sample")
    _check_finite(x, "input")

    cache = ForwardCache(config=config, variant=config.variant, batch=batch)

    if config.variant == "single_layer":
        pooled = x[:, -1, :]
    else:
        if config.variant == "avg_pool":
            seq = x.copy()
            positions = list(range(1, config.num_layers + 1))
        else:
            cls_tok = np.broadcast_to(params["cls"], (batch, 1, config.dim))
            seq = np.concatenate([cls_tok, x], axis=1)
            positions = list(range(0, config.num_layers + 1))
        if config.variant != "no_pe":
            seq = seq + pe_table(positions, config.dim, dtype)[None, :, :]
        seq = np.ascontiguousarray(seq)
        _check_finite(seq, "position_encoding")
        cache.seq = seq

        h = seq
        n_tok = seq.shape[1]
        dh = config.dim // config.heads
        scale = 1.0 / float(np.sqrt(dh))
        for i in range(config.encoder_depth):
            blk: dict = {"h_in": h}
            pfx = f"enc{i}"
            a, xhat1, inv1 = _layer_norm(h, params[f"{pfx}.ln1.scale"], params[f"{pfx}.ln1.bias"])
            blk.update(a=a, xhat1=xhat1, inv1=inv1)

            def split_heads(t):
                return t.reshape(batch, n_tok, config.heads, dh).transpose(0, 2, 1, 3)

            q = split_heads(a @ params[f"{pfx}.attn.wq"] + params[f"{pfx}.attn.bq"])
            k = split_heads(a @ params[f"{pfx}.attn.wk"] + params[f"{pfx}.attn.bk"])
            v = split_heads(a @ params[f"{pfx}.attn.wv"] + params[f"{pfx}.attn.bv"])
            logits = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
            probs = _softmax_last(logits)
            blk.update(q=q, k=k, v=v, probs=probs)

            if p > 0.0:
                mask_attn = np.stack(
                    [_draw_mask(rngs[b], probs.shape[1:], p, np.dtype(dtype)) for b in range(batch)]
                )
                probs_used = probs * mask_attn
                blk["mask_attn"] = mask_attn
            else:
                probs_used = probs
                blk["mask_attn"] = None
            blk["probs_used"] = probs_used

            ctx = np.matmul(probs_used, v)  # (B, nh, T, dh)
            attn_flat = ctx.transpose(0, 2, 1, 3).reshape(batch, n_tok, config.dim)
            blk["attn_flat"] = attn_flat
            attn_out = attn_flat @ params[f"{pfx}.attn.wo"] + params[f"{pfx}.attn.bo"]
            if p > 0.0:
                mask_res1 = np.stack(
                    [_draw_mask(rngs[b], attn_out.shape[1:], p, np.dtype(dtype)) for b in range(batch)]
                )
                attn_out = attn_out * mask_res1
                blk["mask_res1"] = mask_res1
            else:
                blk["mask_res1"] = None
            h = h + attn_out
            _check_finite(h, f"enc{i}.attention")
            blk["h_mid"] = h

            b_normed, xhat2, inv2 = _layer_norm(
                h, params[f"{pfx}.ln2.scale"], params[f"{pfx}.ln2.bias"]
            )
            blk.update(b=b_normed, xhat2=xhat2, inv2=inv2)
            u = b_normed @ params[f"{pfx}.ffn.w1"] + params[f"{pfx}.ffn.b1"]
            blk["u"] = u
            g = _gelu(u)
            blk["g"] = g
            ffn_out = g @ params[f"{pfx}.ffn.w2"] + params[f"{pfx}.ffn.b2"]
            if p > 0.0:
                mask_res2 = np.stack(
                    [_draw_mask(rngs[b], ffn_out.shape[1:], p, np.dtype(dtype)) for b in range(batch)]
                )
                ffn_out = ffn_out * mask_res2
                blk["mask_res2"] = mask_res2
            else:
                blk["mask_res2"] = None
            h = h + ffn_out
            _check_finite(h, f"enc{i}.ffn")
            cache.blocks.append(blk)

        y, xhatf, invf = _layer_norm(h, params["final_ln.scale"], params["final_ln.bias"])
        _check_finite(y, "final_layernorm")
        cache.final_ln = {"xhat": xhatf, "inv": invf}
        if config.variant == "avg_pool":
            pooled = y.mean(axis=1)
        else:
            pooled = y[:, 0, :]

    cache.pooled = pooled
    a_in = pooled
    for i in range(config.mlp_depth):
        u = a_in @ params[f"head.w{i + 1}"] + params[f"head.b{i + 1}"]
        cache.head.append({"a_in": a_in, "u": u})
        a_in = _gelu(u) if i < config.mlp_depth - 1 else u
    e = a_in
    _check_finite(e, "head")
    cache.embeddings = e
    return e, (cache if train else None)


def forward(
    stack: LayerStack | np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Single-sample wrapper around :func:`forward_batch`."""
    data = stack.data if isinstance(stack, LayerStack) else np.asarray(stack)
    e, cache = forward_batch(
        data[None, :, :], params, config, mode, [rng] if rng is not None else None
    )
    return e[0], cache


def backward_batch(
    cache: ForwardCache,
    grad_e: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for a cached train-mode forward.

    Returns (parameter gradients summed over the batch, gradient w.r.t. the
    input stack batch).
    """
    if cache.config != config:
        raise ModelError("cache was produced under a different model config")
    dtype = params.dtype
    de = np.ascontiguousarray(grad_e, dtype=dtype)
    if de.shape != cache.embeddings.shape:
        raise ShapeMismatchError(
            f"grad_e shape {de.shape} != embeddings shape {cache.embeddings.shape}"
        )
    grads = zero_grads(config, dtype)
    batch = cache.batch

    da = de
    for i in reversed(range(config.mlp_depth)):
        entry = cache.head[i]
        du = da if i == config.mlp_depth - 1 else da * _gelu_grad(entry["u"])
        grads[f"head.w{i + 1}"] += entry["a_in"].T @ du
        grads[f"head.b{i + 1}"] += du.sum(axis=0)
        da = du @ params[f"head.w{i + 1}"].T
    dpooled = da

    if config.variant == "single_layer":
        dstack = np.zeros((batch, config.num_layers, config.dim), dtype=dtype)
        dstack[:, -1, :] = dpooled
        return grads, dstack

    n_tok = cache.seq.shape[1]
    if config.variant == "avg_pool":
        dy = np.broadcast_to(dpooled[:, None, :] / n_tok, cache.seq.shape).astype(dtype)
    else:
        dy = np.zeros_like(cache.seq)
        dy[:, 0, :] = dpooled

    dh, dscale_f, dbias_f = _layer_norm_backward(
        dy, cache.final_ln["xhat"], cache.final_ln["inv"], params["final_ln.scale"]
    )
    grads["final_ln.scale"] += dscale_f
    grads["final_ln.bias"] += dbias_f

    dh_head = config.dim // config.heads
    scale = 1.0 / float(np.sqrt(dh_head))
    for i in reversed(range(config.encoder_depth)):
        blk = cache.blocks[i]
        pfx = f"enc{i}"

        dffn_out = dh if blk["mask_res2"] is None else dh * blk["mask_res2"]
        g_flat = blk["g"].reshape(-1, config.ffn_hidden)
        dffn_flat = dffn_out.reshape(-1, config.dim)
        grads[f"{pfx}.ffn.w2"] += g_flat.T @ dffn_flat
        grads[f"{pfx}.ffn.b2"] += dffn_flat.sum(axis=0)
        dg = dffn_out @ params[f"{pfx}.ffn.w2"].T
        du = dg * _gelu_grad(blk["u"])
        b_flat = blk["b"].reshape(-1, config.dim)
        du_flat = du.reshape(-1, config.ffn_hidden)
        grads[f"{pfx}.ffn.w1"] += b_flat.T @ du_flat
        grads[f"{pfx}.ffn.b1"] += du_flat.sum(axis=0)
        db_normed = du @ params[f"{pfx}.ffn.w1"].T
        dh_mid, dscale2, dbias2 = _layer_norm_backward(
            db_normed, blk["xhat2"], blk["inv2"], params[f"{pfx}.ln2.scale"]
        )
        grads[f"{pfx}.ln2.scale"] += dscale2
        grads[f"{pfx}.ln2.bias"] += dbias2
        dh = dh + dh_mid

        dattn_out = dh if blk["mask_res1"] is None else dh * blk["mask_res1"]
        attn_flat_2d = blk["attn_flat"].reshape(-1, config.dim)
        dattn_2d = dattn_out.reshape(-1, config.dim)
        grads[f"{pfx}.attn.wo"] += attn_flat_2d.T @ dattn_2d
        grads[f"{pfx}.attn.bo"] += dattn_2d.sum(axis=0)
        dctx_flat = dattn_out @ params[f"{pfx}.attn.wo"].T
        dctx = dctx_flat.reshape(batch, n_tok, config.heads, dh_head).transpose(0, 2, 1, 3)

        dprobs_used = np.matmul(dctx, blk["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(blk["probs_used"].transpose(0, 1, 3, 2), dctx)
        dprobs = (
            dprobs_used if blk["mask_attn"] is None else dprobs_used * blk["mask_attn"]
        )
        row_dot = (dprobs * blk["probs"]).sum(axis=-1, keepdims=True)
        dlogits = blk["probs"] * (dprobs - row_dot)
        dq = np.matmul(dlogits, blk["k"]) * scale
        dk = np.matmul(dlogits.transpose(0, 1, 3, 2), blk["q"]) * scale

        def merge_heads(t):
            return t.transpose(0, 2, 1, 3).reshape(batch, n_tok, config.dim)

        da_total = np.zeros_like(blk["a"])
        a_2d = blk["a"].reshape(-1, config.dim)
        for name, dt in (("wq", dq), ("wk", dk), ("wv", dv)):
            dt_flat = merge_heads(dt)
            dt_2d = dt_flat.reshape(-1, config.dim)
            grads[f"{pfx}.attn.{name}"] += a_2d.T @ dt_2d
            grads[f"{pfx}.attn.b{name[1]}"] += dt_2d.sum(axis=0)
            da_total += dt_flat @ params[f"{pfx}.attn.{name}"].T

        dh_in_branch, dscale1, dbias1 = _layer_norm_backward(
            da_total, blk["xhat1"], blk["inv1"], params[f"{pfx}.ln1.scale"]
        )
        grads[f"{pfx}.ln1.scale"] += dscale1
        grads[f"{pfx}.ln1.bias"] += dbias1
        dh = dh + dh_in_branch

    if config.variant == "avg_pool":
        dstack = dh
    else:
        grads["cls"] += dh[:, 0, :].sum(axis=0)
        dstack = dh[:, 1:, :]
    return grads, np.ascontiguousarray(dstack)


def backward(
    cache: ForwardCache,
    grad_e: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Single-sample wrapper around :func:`backward_batch`."""
    grad_e = np.asarray(grad_e)
    if grad_e.ndim == 1:
        grads, dstack = backward_batch(cache, grad_e[None, :], params, config)
        return grads, dstack[0]
    return backward_batch(cache, grad_e, params, config)


def _config_to_bytes(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def _config_from_bytes(blob: bytes) -> ModelConfig:
    try:
        fields = json.loads(blob.decode("utf-8"))
        return ModelConfig(**fields)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc


def checkpoint_to_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    params.check_shapes(config)
    params.check_finite()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HH", CHECKPOINT_VERSION, 0)
    cfg = _config_to_bytes(config)
    out += struct.pack("<I", len(cfg)) + cfg
    names = list(param_shapes(config))
    out += struct.pack("<I", len(names))
    for name in names:
        tensor = params[name]
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    out += struct.pack("<Q", checksum64(bytes(out)))
    return bytes(out)


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(params, config))


def checkpoint_from_bytes(blob: bytes) -> tuple[ModelParams, ModelConfig]:
    if len(blob) < 8 + 8:
        raise CheckpointError("checkpoint too short")
    body, (stored_sum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum64(body) != stored_sum:
        raise ChecksumError("checkpoint checksum mismatch; file corrupted")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise CheckpointError("checkpoint truncated")
        chunk = body[off : off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic, expected {CHECKPOINT_MAGIC!r}")
    version, _reserved = struct.unpack("<HH", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = _config_from_bytes(take(cfg_len))
    expected = param_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name not in expected:
            raise ShapeMismatchError(f"unexpected tensor {name!r} in checkpoint")
        if shape != expected[name]:
            raise ShapeMismatchError(
                f"tensor {name!r}: stored shape {shape} != config shape {expected[name]}"
            )
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape)
        tensors[name] = np.ascontiguousarray(data)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"checkpoint missing tensors: {missing}")
    if off != len(body):
        raise CheckpointError(f"checkpoint has {len(body) - off} undeclared trailing bytes")
    params = ModelParams(tensors)
    params.check_finite()
    return params, config


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
