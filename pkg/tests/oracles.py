"""Independent reference implementations shared by the tests."""
from functools import lru_cache

import numpy as np

from peftocr.model import ModelConfig, OcrModel, inject_adapters, patchify

TINY = ModelConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8, head_count=2, encoder_layers=1,
                   decoder_layers=1, ffn_dim=16, vocab_size=6, max_decode_len=5, activation="swish")

TOKENS_IN = np.array([[1, 3, 4, 5, 0], [1, 5, 3, 0, 0]])
TOKENS_OUT = np.array([[3, 4, 5, 2, 0], [5, 3, 2, 0, 0]])


def naive_attention(xq, xk, xv, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=None):
    """Per-query, per-head loops with an explicit softmax."""
    b, tq, d = xq.shape
    tk = xk.shape[1]
    dk = d // heads
    out = np.zeros((b, tq, d))
    for n in range(b):
        q, k, v = xq[n] @ wq + bq, xk[n] @ wk + bk, xv[n] @ wv + bv
        ctx = np.zeros((tq, d))
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            for i in range(tq):
                allowed = [j for j in range(tk) if mask is None or mask[i][j]]
                scores = [float(q[i, sl] @ k[j, sl]) / np.sqrt(dk) for j in allowed]
                top = max(scores)
                e = [np.exp(s - top) for s in scores]
                total = sum(e)
                for j, ej in zip(allowed, e):
                    ctx[i, sl] += (ej / total) * v[j, sl]
        out[n] = ctx @ wo + bo
    return out


def naive_nll(logits, targets, pad=0):
    total, count = 0.0, 0
    for row, tgt in zip(logits.reshape(-1, logits.shape[-1]), np.ravel(targets)):
        if tgt == pad:
            continue
        z = np.exp(row - row.max())
        total -= np.log(z[tgt] / z.sum())
        count += 1
    return total / count


def perturbed_model(strategy, seed=3, magnitude_trainable=True, cfg=TINY):
    model = OcrModel.initialize(cfg, seed=seed)
    if strategy != ("full_ft", "full_ft"):
        inject_adapters(model, *strategy, rank=2, seed=1, magnitude_trainable=magnitude_trainable)
        rng = np.random.default_rng(5)
        for adapter in model.adapters.values():
            pair = getattr(adapter, "delta", adapter)
            pair.b_matrix[...] = 0.3 * rng.standard_normal(pair.b_matrix.shape)
    return model


def model_gradient_errors(model, h=1e-6):
    """Relative error between analytic and central-difference gradients per trainable tensor."""
    cfg = model.config
    imgs = np.random.default_rng(0).random((2, 1, cfg.image_height, cfg.image_width))
    patches = patchify(imgs, cfg.patch_size)
    _, grads = model.loss_and_grads(patches, TOKENS_IN, TOKENS_OUT)
    errors = {}
    for name, arr in model.trainable_arrays().items():
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = model.loss(patches, TOKENS_IN, TOKENS_OUT)
            flat[i] = old - h
            down = model.loss(patches, TOKENS_IN, TOKENS_OUT)
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        g = grads[name]
        errors[name] = np.linalg.norm(g - num) / max(np.linalg.norm(num), np.linalg.norm(g), 1e-8)
    return errors


def closed_form_trainable(model):
    """Sum of r*(m+n) per adapter site (+n for a trainable magnitude) plus every full-FT tensor."""
    total = 0
    for adapter in model.adapters.values():
        pair = getattr(adapter, "delta", adapter)
        m, n = pair.shape
        total += pair.rank * (m + n)
        if getattr(adapter, "magnitude_trainable", False):
            total += n
    for name, arr in model.params.items():
        comp = "encoder" if name.startswith(("patch.", "enc.")) else "decoder"
        if model.strategy[comp] == "full_ft":
            total += arr.size
    return total


def recursive_distance_oracle(a, b) -> int:
    """Exhaustive recursion over match/substitute, delete and insert (memoised for speed only)."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)
