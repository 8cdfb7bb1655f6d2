"""AdamW with decoupled weight decay, operating in place on named arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientShapeError, TrainingDivergenceError


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               config: AdamWConfig) -> AdamWState:
    """One update of every parameter that has a gradient.

    ``p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.  Tensors
    without a gradient entry (frozen) are left alone.  All gradients are
    checked before anything is modified, so a divergence error leaves the
    parameters untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise GradientShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise GradientShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(grads):
        p, g = params[name], grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay:
            p *= 1.0 - config.lr * config.weight_decay
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state
