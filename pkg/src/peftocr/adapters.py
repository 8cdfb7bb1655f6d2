"""LoRA and DoRA weight parameterisations.

Weights are ``m x n`` matrices.  A LoRA pair adds ``scale * B @ A`` (``B`` is
``m x r``, ``A`` is ``r x n``) to a frozen base.  DoRA rescales every column
of the low-rank-updated weight ``V' = W0 + scale * B @ A`` to a magnitude
vector ``u`` (one entry per column)::

    W' = u * V' / ||V'||_c

where ``||.||_c`` is the vector of column norms.  In the model a layer
computes ``x @ W`` so columns correspond to output units.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AdapterStateError,
    ConfigurationError,
    DegenerateWeightError,
    DimensionError,
    GradientShapeError,
    NormalizationSingularityError,
)


@dataclass
class LowRankPair:
    a_matrix: np.ndarray  # r x n
    b_matrix: np.ndarray  # m x r
    rank: int
    scale: float = 1.0
    merged: bool = False

    def __post_init__(self) -> None:
        m, r_b = self.b_matrix.shape
        r_a, n = self.a_matrix.shape
        if r_a != self.rank or r_b != self.rank:
            raise DimensionError(
                f"factor shapes B{self.b_matrix.shape} / A{self.a_matrix.shape} disagree with rank {self.rank}"
            )
        _check_rank(m, n, self.rank)

    @property
    def shape(self) -> tuple[int, int]:
        return self.b_matrix.shape[0], self.a_matrix.shape[1]

    @property
    def trainable_count(self) -> int:
        return self.a_matrix.size + self.b_matrix.size


@dataclass
class DoraState:
    base_weight: np.ndarray
    magnitude: np.ndarray  # length n
    delta: LowRankPair
    magnitude_trainable: bool = False
    merged: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.base_weight.shape

    @property
    def trainable_count(self) -> int:
        return self.delta.trainable_count + (self.magnitude.size if self.magnitude_trainable else 0)


@dataclass
class AdapterGradients:
    grad_a: np.ndarray
    grad_b: np.ndarray
    grad_magnitude: np.ndarray | None = None
    extras: dict = field(default_factory=dict, repr=False)


def _check_rank(m: int, n: int, r: int) -> None:
    if not 1 <= r <= min(m, n):
        raise ConfigurationError(f"rank {r} must lie in [1, min(m={m}, n={n})]")


def lora_init(m: int, n: int, r: int, scale: float = 1.0, seed: int = 0) -> LowRankPair:
    """B = 0, A ~ N(0, 1/r) from ``numpy.random.default_rng(seed)``."""
    _check_rank(m, n, r)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((r, n)) / np.sqrt(r)
    return LowRankPair(a, np.zeros((m, r)), r, float(scale))


def lora_delta(pair: LowRankPair) -> np.ndarray:
    return pair.scale * (pair.b_matrix @ pair.a_matrix)


def column_norms(w: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", w, w))


def dora_init(base: np.ndarray, r: int, seed: int = 0, magnitude_trainable: bool = False,
              scale: float = 1.0) -> DoraState:
    base = np.asarray(base, dtype=np.float64)
    norms = column_norms(base)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateWeightError(int(zero[0]))
    m, n = base.shape
    return DoraState(base, norms.copy(), lora_init(m, n, r, scale, seed), magnitude_trainable)


def _direction(state: DoraState) -> tuple[np.ndarray, np.ndarray]:
    v = state.base_weight + lora_delta(state.delta)
    norms = column_norms(v)
    if np.any(norms == 0.0):
        j = int(np.flatnonzero(norms == 0.0)[0])
        raise NormalizationSingularityError(f"column {j} of base + BA has zero norm")
    return v, norms


def dora_effective_weight(state: DoraState) -> np.ndarray:
    v, norms = _direction(state)
    return v * (state.magnitude / norms)


def effective_weight(base: np.ndarray, adapter: LowRankPair | DoraState | None) -> np.ndarray:
    if adapter is None:
        return base
    if isinstance(adapter, DoraState):
        return dora_effective_weight(adapter)
    return base + lora_delta(adapter)


def lora_gradients(pair: LowRankPair, upstream: np.ndarray) -> AdapterGradients:
    """Chain dL/dW into the factors of ``W = W0 + scale * B @ A``."""
    if upstream.shape != pair.shape:
        raise GradientShapeError(f"upstream {upstream.shape} does not match weight {pair.shape}")
    return AdapterGradients(pair.scale * (pair.b_matrix.T @ upstream), pair.scale * (upstream @ pair.a_matrix.T))


def dora_gradients(state: DoraState, upstream: np.ndarray) -> AdapterGradients:
    """Gradients of a loss with respect to A, B (and the magnitude) given dL/dW'.

    Per column j, with ``c_j = ||V'_j||`` and unit direction ``d_j = V'_j / c_j``::

        dL/dV'_j = (u_j / c_j) (I - d_j d_j^T) dL/dW'_j
        dL/du_j  = d_j . dL/dW'_j

    and then ``dL/dA = scale * B^T dL/dV'``, ``dL/dB = scale * dL/dV' A^T``.
    The projector is normalised by the updated column norm ``||V'||``.
    """
    if upstream.shape != state.shape:
        raise GradientShapeError(f"upstream {upstream.shape} does not match weight {state.shape}")
    v, norms = _direction(state)
    unit = v / norms
    along = np.einsum("ij,ij->j", unit, upstream)
    grad_v = (state.magnitude / norms) * (upstream - unit * along)
    pair = state.delta
    grads = AdapterGradients(
        pair.scale * (pair.b_matrix.T @ grad_v),
        pair.scale * (grad_v @ pair.a_matrix.T),
        along.copy() if state.magnitude_trainable else None,
    )
    grads.extras["grad_direction"] = grad_v
    grads.extras["direction"] = v
    return grads


def adapter_gradients(adapter: LowRankPair | DoraState, upstream: np.ndarray) -> AdapterGradients:
    if isinstance(adapter, DoraState):
        return dora_gradients(adapter, upstream)
    return lora_gradients(adapter, upstream)


def merge_adapter(base: np.ndarray, adapter: LowRankPair | DoraState) -> np.ndarray:
    """Collapse an adapter into a dense weight; the adapter is then marked consumed."""
    if adapter.merged:
        raise AdapterStateError("adapter has already been merged")
    if isinstance(adapter, DoraState):
        if base.shape != adapter.shape:
            raise DimensionError(f"base {base.shape} does not match adapter {adapter.shape}")
        merged = dora_effective_weight(adapter)
    else:
        if base.shape != adapter.shape:
            raise DimensionError(f"base {base.shape} does not match adapter {adapter.shape}")
        merged = base + lora_delta(adapter) if np.any(adapter.b_matrix) else base.copy()
    adapter.merged = True
    return merged
