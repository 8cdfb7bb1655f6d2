import numpy as np
import pytest

from peftocr import layers as L
from peftocr.errors import (
    AdapterStateError,
    ConfigurationError,
    DimensionError,
    EmptyLossError,
    VocabularyError,
)
from peftocr.model import (
    EOS,
    ModelConfig,
    OcrModel,
    count_parameters,
    generate,
    inject_adapters,
    merge_all,
    nll_loss,
    nll_loss_and_grad,
    patchify,
    unpatchify,
)
from peftocr.training import ABLATION_GRID

from oracles import TINY, closed_form_trainable, model_gradient_errors, naive_attention, naive_nll, perturbed_model

SMALL = ModelConfig(image_height=8, image_width=16, patch_size=4, embed_dim=8, head_count=2, encoder_layers=2,
                    decoder_layers=2, ffn_dim=16, vocab_size=10, max_decode_len=6)


def random_attention(rng, d=8):
    return L.AttentionWeights(*(rng.standard_normal(s) for _ in "qkvo" for s in ((d, d), (d,))))


# ------------------------------------------------------------------ patches


def test_patchify_counts_and_order():
    img = np.arange(64, dtype=float).reshape(1, 8, 8)
    p = patchify(img, 4)
    assert p.shape == (4, 16)
    assert p[1].tolist() == img[0, :4, 4:].ravel().tolist()
    assert np.array_equal(unpatchify(p, 4, 1, 8, 8), img)


def test_patchify_divisibility():
    with pytest.raises(ConfigurationError):
        patchify(np.zeros((1, 6, 8)), 4)
    with pytest.raises(ConfigurationError):
        ModelConfig(image_height=6, patch_size=4)


# ---------------------------------------------------------------- attention


def test_attention_single_position(rng):
    w = random_attention(rng)
    x = rng.standard_normal((1, 1, 8))
    out, _ = L.attention_forward(x, x, x, w, 2)
    assert np.allclose(out, (x @ w.wv + w.bv) @ w.wo + w.bo, atol=1e-12)


def test_attention_identical_keys_is_uniform(rng):
    w = random_attention(rng)
    w.wk[:] = 0
    xq = rng.standard_normal((1, 2, 8))
    xkv = rng.standard_normal((1, 4, 8))
    out, _ = L.attention_forward(xq, xkv, xkv, w, 2)
    values = xkv[0] @ w.wv + w.bv
    assert np.allclose(out[0], np.tile(values.mean(axis=0) @ w.wo + w.bo, (2, 1)), atol=1e-12)


def test_attention_matches_naive_loop(rng):
    w = random_attention(rng)
    x = rng.standard_normal((2, 3, 8))
    out, _ = L.attention_forward(x, x, x, w, 2)
    assert np.allclose(out, naive_attention(x, x, x, *vars(w).values(), 2), atol=1e-12)
    mask = L.causal_mask(3)
    out, cache = L.attention_forward(x, x, x, w, 2, mask)
    assert np.allclose(out, naive_attention(x, x, x, *vars(w).values(), 2, mask), atol=1e-12)
    probs = L.attention_probabilities(cache)
    assert np.all(probs[..., ~mask] == 0.0)


def test_attention_mask_shape_error(rng):
    x = rng.standard_normal((1, 3, 8))
    with pytest.raises(DimensionError):
        L.attention_forward(x, x, x, random_attention(rng), 2, np.ones((2, 2), dtype=bool))


# -------------------------------------------------------------------- model


def test_encoder_permutation_equivariance(rng):
    model = OcrModel.initialize(SMALL, seed=1)
    model.params["enc.pos"][:] = 0
    img = rng.random((1, 1, 8, 16))
    swapped = img.copy()
    swapped[..., :4, :4], swapped[..., :4, 4:8] = img[..., :4, 4:8], img[..., :4, :4]
    a, b = model.encode(img), model.encode(swapped)
    assert np.allclose(a[0, [1, 0, 2, 3, 4, 5, 6, 7]], b[0], atol=1e-12)


def test_decoder_causality(rng):
    model = OcrModel.initialize(SMALL, seed=2)
    mem = model.encode(rng.random((1, 1, 8, 16)))
    tokens = np.array([[1, 4, 5, 6, 7, 8]])
    base = model.decode(tokens, mem)
    for t in range(1, 6):
        changed = tokens.copy()
        changed[0, t] = 9
        diff = np.abs(model.decode(changed, mem) - base).max(axis=-1)[0]
        assert np.all(diff[:t] == 0) and np.all(diff[t:] > 0)


def test_logits_ignore_image_without_cross_values(rng):
    model = OcrModel.initialize(SMALL, seed=2)
    for i in range(SMALL.decoder_layers):
        model.params[f"dec.{i}.cross.v.w"][:] = 0
        model.params[f"dec.{i}.cross.v.b"][:] = 0
    tokens = np.array([[1, 4, 5]])
    a = model.decode(tokens, model.encode(rng.random((1, 1, 8, 16))))
    b = model.decode(tokens, np.zeros((1, SMALL.patch_count, SMALL.embed_dim)))
    assert np.allclose(a, b, atol=1e-12)


def test_decoder_rejects_bad_tokens(rng):
    model = OcrModel.initialize(SMALL)
    mem = model.encode(rng.random((1, 1, 8, 16)))
    with pytest.raises(VocabularyError):
        model.decode(np.array([[1, 10]]), mem)
    with pytest.raises(DimensionError):
        model.decode(np.ones((1, 7), dtype=int), mem)
    with pytest.raises(DimensionError):
        model.encode(rng.random((1, 1, 8, 8)))


# --------------------------------------------------------------------- loss


def test_nll_uniform_and_asymptote():
    assert nll_loss(np.zeros((2, 3, 7)), [[4, 5, 6], [4, 0, 0]]) == pytest.approx(np.log(7), abs=1e-14)
    logits = np.zeros((1, 1, 5))
    logits[0, 0, 3] = 800
    assert nll_loss(logits, [[3]]) == 0.0


def test_nll_matches_naive_oracle(rng):
    logits = rng.standard_normal((3, 4, 6))
    targets = np.array([[1, 2, 3, 0], [5, 0, 0, 0], [4, 4, 1, 2]])
    assert nll_loss(logits, targets) == pytest.approx(naive_nll(logits, targets), rel=1e-13)
    loss, grad = nll_loss_and_grad(logits, targets)
    h = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (naive_nll(up, targets) - naive_nll(down, targets)) / (2 * h)
    assert np.allclose(grad, num, atol=1e-8)


def test_nll_all_pad():
    with pytest.raises(EmptyLossError):
        nll_loss(np.zeros((1, 2, 4)), [[0, 0]])


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("strategy", [("full_ft", "full_ft"), ("dora", "lora"), ("lora", "dora")])
def test_model_gradients_match_finite_differences(strategy):
    errors = model_gradient_errors(perturbed_model(strategy))
    assert max(errors.values()) < 1e-5, {k: v for k, v in errors.items() if v >= 1e-5}


# --------------------------------------------------------------- generation


def test_generation_forced_token(rng):
    model = OcrModel.initialize(SMALL)
    model.params["proj.w"][:] = 0
    model.params["proj.b"][:] = 0
    model.params["proj.b"][7] = 5
    seqs = generate(model, rng.random((2, 1, 8, 16)))
    assert all(s.ids == (7,) * SMALL.max_decode_len and s.truncated for s in seqs)
    model.params["proj.b"][EOS] = 10
    seqs = generate(model, rng.random((1, 1, 8, 16)))
    assert seqs[0].ids == () and not seqs[0].truncated


def test_generation_tie_goes_to_lowest_id(rng):
    model = OcrModel.initialize(SMALL)
    model.params["proj.w"][:] = 0
    model.params["proj.b"][:] = 0
    model.params["proj.b"][[5, 8]] = 3
    assert generate(model, rng.random((1, 1, 8, 16)), max_len=2)[0].ids == (5, 5)


# ---------------------------------------------------------------- injection


def test_dlora_site_inventory():
    inv = inject_adapters(OcrModel.initialize(SMALL), "dora", "lora", rank=2)
    kinds = list(inv.values())
    assert kinds.count("dora") == 6 and kinds.count("lora") == 16


def test_injection_errors():
    model = OcrModel.initialize(SMALL)
    with pytest.raises(ConfigurationError):
        inject_adapters(model, "dora", "lora")
    with pytest.raises(ConfigurationError):
        inject_adapters(model, "prefix", "lora", rank=2)
    inject_adapters(model, "frozen", "lora", rank=2)
    with pytest.raises(AdapterStateError):
        inject_adapters(model, "frozen", "lora", rank=2)


def test_parameter_counts():
    model = OcrModel.initialize(SMALL)
    full = count_parameters(model)
    assert full["ratio_percent"] == 100.0
    frozen = OcrModel.initialize(SMALL)
    inject_adapters(frozen, "frozen", "frozen")
    assert count_parameters(frozen)["trainable"] == 0
    for enc, dec in ABLATION_GRID:
        for mag in (False, True):
            m = OcrModel.initialize(SMALL)
            inject_adapters(m, enc, dec, rank=2, magnitude_trainable=mag)
            counts = count_parameters(m)
            assert counts["trainable"] == closed_form_trainable(m)
            assert counts["total"] == full["total"] + sum(
                a.trainable_count + (a.magnitude.size if hasattr(a, "magnitude") and not a.magnitude_trainable else 0)
                for a in m.adapters.values())


@pytest.mark.parametrize("strategy", ABLATION_GRID)
def test_injection_is_transparent(strategy, rng):
    base = OcrModel.initialize(SMALL, seed=4)
    model = base.copy()
    inject_adapters(model, *strategy, rank=2, seed=9)
    imgs = rng.random((3, 1, 8, 16))
    tokens = np.array([[1, 4, 5, 6]] * 3)
    a = base.decode(tokens, base.encode(imgs))
    b = model.decode(tokens, model.encode(imgs))
    assert np.max(np.abs(a - b)) < 1e-12


def test_merge_preserves_generation(rng):
    model = perturbed_model(("dora", "lora"), cfg=SMALL)
    imgs = rng.random((20, 1, 8, 16))
    before = generate(model, imgs)
    merged = merge_all(model.copy())
    assert not merged.adapters and len(merged.merged_sites) == 22
    assert generate(merged, imgs) == before
