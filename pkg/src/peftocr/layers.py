"""Differentiable building blocks with explicit forward/backward pairs.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input gradients plus a
dict of parameter gradients.  Activations are laid out ``(batch, seq, dim)``
and linear maps compute ``x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

LN_EPS = 1e-5


# ----------------------------------------------------------------------- linear


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True):
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    dx = dy @ w.T if need_dx else None
    return dx, dw, db


# ------------------------------------------------------------------- layer norm


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ activations


def activation_forward(x: np.ndarray, kind: str):
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "swish":
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return x * sig, (x, sig)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dy: np.ndarray, cache, kind: str):
    if kind == "relu":
        return dy * (cache > 0.0)
    x, sig = cache
    return dy * (sig + x * sig * (1.0 - sig))


# -------------------------------------------------------------------- softmax


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# ------------------------------------------------------------------- attention


@dataclass
class AttentionWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


def causal_mask(t: int) -> np.ndarray:
    """Boolean ``t x t`` mask, True where attention is allowed."""
    return np.tril(np.ones((t, t), dtype=bool))


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def attention_forward(xq: np.ndarray, xk: np.ndarray, xv: np.ndarray, w: AttentionWeights,
                      head_count: int, mask: np.ndarray | None = None):
    """Multi-head scaled dot-product attention.

    ``mask`` is boolean and broadcastable to ``(batch, heads, Tq, Tk)``; False
    entries get exactly zero attention weight.
    """
    if xq.ndim != 3 or xk.ndim != 3 or xv.ndim != 3:
        raise DimensionError("attention inputs must be (batch, seq, dim)")
    d = w.wq.shape[1]
    if d % head_count:
        raise DimensionError(f"model dim {d} is not divisible by {head_count} heads")
    if xk.shape[1] != xv.shape[1]:
        raise DimensionError("keys and values must have the same length")
    q = _split_heads(xq @ w.wq + w.bq, head_count)
    k = _split_heads(xk @ w.wk + w.bk, head_count)
    v = _split_heads(xv @ w.wv + w.bv, head_count)
    dk = d // head_count
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dk)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            allowed = np.broadcast_to(mask, scores.shape)
        except ValueError as exc:
            raise DimensionError(f"mask shape {mask.shape} incompatible with scores {scores.shape}") from exc
        scores = np.where(allowed, scores, -np.inf)
        row_max = scores.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(scores - row_max)
        denom = e.sum(axis=-1, keepdims=True)
        probs = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    else:
        probs = softmax(scores)
    ctx = _merge_heads(probs @ v)
    out = ctx @ w.wo + w.bo
    cache = (xq, xk, xv, q, k, v, probs, ctx, w, head_count)
    return out, cache


def attention_backward(dout: np.ndarray, cache, need_dq: bool = True, need_dkv: bool = True):
    """Returns ``(dxq, dxk, dxv, grads)`` with grads keyed wq, bq, ... bo."""
    xq, xk, xv, q, k, v, probs, ctx, w, h = cache
    dk = q.shape[-1]
    dctx, dwo, dbo = linear_backward(dout, ctx, w.wo)
    dctx_h = _split_heads(dctx, h)
    dprobs = dctx_h @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx_h
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dk)
    dq = dscores @ k
    dkk = dscores.transpose(0, 1, 3, 2) @ q
    dxq, dwq, dbq = linear_backward(_merge_heads(dq), xq, w.wq, need_dq)
    dxk, dwk, dbk = linear_backward(_merge_heads(dkk), xk, w.wk, need_dkv)
    dxv, dwv, dbv = linear_backward(_merge_heads(dv), xv, w.wv, need_dkv)
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk, "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dxq, dxk, dxv, grads


def attention_probabilities(cache) -> np.ndarray:
    return cache[6]


# ------------------------------------------------------------------ feed-forward


def ffn_forward(x, w1, b1, w2, b2, kind: str):
    hpre, _ = linear_forward(x, w1, b1)
    hact, act_cache = activation_forward(hpre, kind)
    out, _ = linear_forward(hact, w2, b2)
    return out, (x, hact, act_cache, w1, w2, kind)


def ffn_backward(dout, cache):
    x, hact, act_cache, w1, w2, kind = cache
    dh, dw2, db2 = linear_backward(dout, hact, w2)
    dpre = activation_backward(dh, act_cache, kind)
    dx, dw1, db1 = linear_backward(dpre, x, w1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
