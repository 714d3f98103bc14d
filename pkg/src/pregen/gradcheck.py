"""Finite-difference verification of the analytic gradients.

Runs the whole differentiable pipeline (stack -> position encoding ->
encoder -> head -> cosine similarities -> symmetric InfoNCE) in float64 and
compares every analytic parameter gradient against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, backward_batch, forward_batch, init_params
from .training import cosine_backward, info_nce, similarity_matrix
from .util import keyed_rng

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-4
_REL_FLOOR = 1e-6


def default_check_config() -> ModelConfig:
    return ModelConfig(
        num_layers=6,
        dim=16,
        heads=4,
        encoder_depth=1,
        mlp_hidden=24,
        output_dim=8,
        dropout=0.0,
        variant="full",
    )


def _rngs(seed: int, tower: int, count: int):
    return [keyed_rng(seed, 1, tower, i) for i in range(count)]


def pipeline_loss(
    params: ModelParams,
    query_stacks: np.ndarray,
    target_stacks: np.ndarray,
    config: ModelConfig,
    temperature: float,
    seed: int,
) -> float:
    """Train-mode loss with dropout streams keyed only by (seed, sample), so
    repeated evaluations see identical masks."""
    n = query_stacks.shape[0]
    e_q, _ = forward_batch(query_stacks, params, config, "train", _rngs(seed, 0, n))
    e_t, _ = forward_batch(target_stacks, params, config, "train", _rngs(seed, 1, n))
    loss, _ = info_nce(similarity_matrix(e_q, e_t), temperature)
    return loss


def analytic_param_grads(
    params: ModelParams,
    query_stacks: np.ndarray,
    target_stacks: np.ndarray,
    config: ModelConfig,
    temperature: float,
    seed: int,
) -> dict[str, np.ndarray]:
    n = query_stacks.shape[0]
    e_q, cache_q = forward_batch(query_stacks, params, config, "train", _rngs(seed, 0, n))
    e_t, cache_t = forward_batch(target_stacks, params, config, "train", _rngs(seed, 1, n))
    sim = similarity_matrix(e_q, e_t)
    _, d_sim = info_nce(sim, temperature)
    d_q, d_t = cosine_backward(e_q, e_t, sim, d_sim)
    g_q, _ = backward_batch(cache_q, d_q, params, config)
    g_t, _ = backward_batch(cache_t, d_t, params, config)
    return {k: g_q[k] + g_t[k] for k in g_q}


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> TensorCheck:
        return max(self.checks, key=lambda c: c.max_rel_error)

    def to_text(self) -> str:
        lines = [
            f"{c.name:24s} max_rel_err={c.max_rel_error:.3e} "
            f"{'ok' if c.passed else 'FAIL'}"
            for c in self.checks
        ]
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines) + "\n"


def gradient_check(
    config: ModelConfig | None = None,
    batch: int = 4,
    temperature: float = 0.05,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    corrupt_tensor: str | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients tensor by tensor.

    Everything runs in float64. ``corrupt_tensor`` perturbs one analytic
    gradient tensor before the comparison; used as a negative control to
    prove the check can fail.
    """
    config = config or default_check_config()
    config.validate()
    params = init_params(config, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    q = rng.standard_normal((batch, config.num_layers, config.dim))
    t = rng.standard_normal((batch, config.num_layers, config.dim))

    analytic = analytic_param_grads(params, q, t, config, temperature, seed)
    if corrupt_tensor is not None:
        analytic[corrupt_tensor] = analytic[corrupt_tensor] + 1e-2

    report = GradCheckReport(tolerance=tolerance)
    for name in analytic:
        theta = params.tensors[name]
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            plus = pipeline_loss(params, q, t, config, temperature, seed)
            flat[idx] = orig - step
            minus = pipeline_loss(params, q, t, config, temperature, seed)
            flat[idx] = orig
            num_flat[idx] = (plus - minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric)), _REL_FLOOR)
        rel = float(np.max(np.abs(analytic[name] - numeric) / denom))
        report.checks.append(TensorCheck(name, rel, rel <= tolerance))
    return report
