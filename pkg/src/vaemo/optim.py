"""AdamW with decoupled weight decay, plus the cosine schedule.

The step function is pure bookkeeping over named arrays: moments live in
an explicit state object so checkpoints can carry them, and the caller
decides which parameters participate (that is how stage two freezes
everything except LayerNorms and adapters).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError, ParameterError
from .params import ParamStore


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decay_exempt(store: ParamStore) -> set[str]:
    """Names excluded from weight decay: biases, norms, embeddings."""
    return {name for name, _ in store.items() if store.kind(name) in ("bias", "layer_norm", "embedding")}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    no_decay: set[str] | frozenset[str] = frozenset(),
) -> None:
    """One in-place AdamW update over the given parameter subset."""
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ParameterError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient supplied for parameter {name!r}")
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and name not in no_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.0) -> float:
    """Linear warmup into a cosine decay that reaches zero at total_steps."""
    if total_steps <= 0:
        raise ParameterError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ParameterError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction}")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return base_lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))
