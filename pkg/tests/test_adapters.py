import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftocr.adapters import (
    LowRankPair,
    column_norms,
    dora_effective_weight,
    dora_gradients,
    dora_init,
    effective_weight,
    lora_delta,
    lora_gradients,
    lora_init,
    merge_adapter,
)
from peftocr.errors import (
    AdapterStateError,
    ConfigurationError,
    DegenerateWeightError,
    GradientShapeError,
    NormalizationSingularityError,
)


def naive_matmul(b, a):
    m, r = len(b), len(a)
    n = len(a[0])
    return [[sum(b[i][k] * a[k][j] for k in range(r)) for j in range(n)] for i in range(m)]


def naive_dora(base, b, a, u, scale):
    v = base + scale * np.array(naive_matmul(b.tolist(), a.tolist()))
    out = np.empty_like(v)
    for j in range(v.shape[1]):
        norm = sum(x * x for x in v[:, j]) ** 0.5
        out[:, j] = u[j] * (v[:, j] / norm)
    return out


def randomised_dora(rng, m, n, r, magnitude_trainable=True, scale=1.0):
    state = dora_init(rng.standard_normal((m, n)), r, seed=int(rng.integers(1 << 30)),
                      magnitude_trainable=magnitude_trainable, scale=scale)
    state.delta.b_matrix[:] = rng.standard_normal((m, r))
    state.magnitude[:] = rng.uniform(0.5, 2.0, n)
    return state


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# ------------------------------------------------------------------- LoRA


def test_lora_init_shapes_and_zero_delta():
    pair = lora_init(8, 6, 2, scale=1.0, seed=7)
    assert pair.trainable_count == 28
    assert pair.b_matrix.shape == (8, 2) and pair.a_matrix.shape == (2, 6)
    assert not lora_delta(pair).any()


def test_lora_init_rank_errors():
    with pytest.raises(ConfigurationError, match="m=4, n=4"):
        lora_init(4, 4, 5)
    with pytest.raises(ConfigurationError):
        lora_init(4, 4, 0)


def test_lora_init_deterministic():
    assert np.array_equal(lora_init(5, 7, 3, seed=1).a_matrix, lora_init(5, 7, 3, seed=1).a_matrix)


def test_lora_delta_example():
    pair = LowRankPair(np.array([[3.0, 4.0]]), np.array([[1.0], [2.0]]), 1)
    assert lora_delta(pair).tolist() == naive_matmul([[1], [2]], [[3, 4]]) == [[3, 4], [6, 8]]


def test_lora_gradients_match_finite_differences(rng):
    pair = lora_init(6, 4, 2, scale=0.5, seed=3)
    pair.b_matrix[:] = rng.standard_normal((6, 2))
    base = rng.standard_normal((6, 4))
    g = rng.standard_normal((6, 4))
    loss = lambda: float(np.sum(g * effective_weight(base, pair)))
    grads = lora_gradients(pair, g)
    assert rel_err(grads.grad_a, central_difference(loss, pair.a_matrix)) < 1e-6
    assert rel_err(grads.grad_b, central_difference(loss, pair.b_matrix)) < 1e-6


# ------------------------------------------------------------------- norms


def test_column_norms_examples(rng):
    assert column_norms(np.eye(3)).tolist() == [1.0, 1.0, 1.0]
    assert not column_norms(np.zeros((3, 2))).any()
    w = rng.standard_normal((5, 3))
    oracle = [sum(w[i, j] ** 2 for i in range(5)) ** 0.5 for j in range(3)]
    assert np.allclose(column_norms(w), oracle, rtol=1e-14, atol=0)


# ------------------------------------------------------------------- DoRA


def test_dora_init_identity():
    state = dora_init(np.eye(4), 2)
    assert state.magnitude.tolist() == [1.0] * 4
    assert np.array_equal(dora_effective_weight(state), np.eye(4))


def test_dora_init_transparent(rng):
    base = rng.standard_normal((7, 5))
    assert np.max(np.abs(dora_effective_weight(dora_init(base, 3)) - base)) < 1e-12


def test_dora_init_zero_column():
    base = np.ones((3, 3))
    base[:, 1] = 0
    with pytest.raises(DegenerateWeightError, match="column 1"):
        dora_init(base, 1)


def test_dora_effective_weight_matches_naive_oracle(rng):
    state = randomised_dora(rng, 6, 4, 2, scale=0.7)
    oracle = naive_dora(state.base_weight, state.delta.b_matrix, state.delta.a_matrix, state.magnitude, 0.7)
    assert np.allclose(dora_effective_weight(state), oracle, rtol=1e-13, atol=1e-13)


def test_dora_singularity():
    state = dora_init(np.eye(2), 1)
    state.delta.a_matrix[:] = [[1.0, 0.0]]
    state.delta.b_matrix[:] = [[-1.0], [0.0]]
    with pytest.raises(NormalizationSingularityError):
        dora_effective_weight(state)


def test_dora_gradients_zero_b(rng):
    state = dora_init(rng.standard_normal((6, 4)), 2)
    assert not dora_gradients(state, rng.standard_normal((6, 4))).grad_a.any()


def test_dora_gradient_shape_error(rng):
    state = dora_init(rng.standard_normal((6, 4)), 2)
    with pytest.raises(GradientShapeError):
        dora_gradients(state, np.zeros((4, 6)))
    with pytest.raises(GradientShapeError):
        lora_gradients(state.delta, np.zeros((4, 6)))


def test_dora_projected_gradient_orthogonal(rng):
    for _ in range(20):
        state = randomised_dora(rng, 6, 4, 2)
        grads = dora_gradients(state, rng.standard_normal((6, 4)))
        v, gv = grads.extras["direction"], grads.extras["grad_direction"]
        assert np.max(np.abs(np.einsum("ij,ij->j", v, gv))) < 1e-10


def test_dora_gradients_match_finite_differences(rng):
    state = randomised_dora(rng, 6, 4, 2)
    g = rng.standard_normal((6, 4))
    loss = lambda: float(np.sum(g * dora_effective_weight(state)))
    grads = dora_gradients(state, g)
    assert rel_err(grads.grad_a, central_difference(loss, state.delta.a_matrix)) < 1e-5
    assert rel_err(grads.grad_b, central_difference(loss, state.delta.b_matrix)) < 1e-5
    assert rel_err(grads.grad_magnitude, central_difference(loss, state.magnitude)) < 1e-5


def test_dora_gradient_uses_updated_norm(rng):
    # Normalising the projector by the frozen base norm instead gives a wrong gradient.
    state = randomised_dora(rng, 6, 4, 2)
    g = rng.standard_normal((6, 4))
    grads = dora_gradients(state, g)
    v = grads.extras["direction"]
    unit = v / column_norms(v)
    wrong_v = (state.magnitude / column_norms(state.base_weight)) * (g - unit * np.einsum("ij,ij->j", unit, g))
    wrong_a = state.delta.scale * state.delta.b_matrix.T @ wrong_v
    loss = lambda: float(np.sum(g * dora_effective_weight(state)))
    fd = central_difference(loss, state.delta.a_matrix)
    assert rel_err(wrong_a, fd) > 1e-3 > rel_err(grads.grad_a, fd)


def test_frozen_magnitude_has_no_gradient(rng):
    state = randomised_dora(rng, 5, 5, 2, magnitude_trainable=False)
    assert dora_gradients(state, np.ones((5, 5))).grad_magnitude is None
    assert state.trainable_count == 2 * (5 + 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.data())
def test_dora_effective_columns_have_magnitude_norm(m, n, data):
    r = data.draw(st.integers(1, min(m, n)))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    state = randomised_dora(rng, m, n, r)
    assert np.allclose(column_norms(dora_effective_weight(state)), state.magnitude, rtol=1e-12)


# ------------------------------------------------------------------- merge


def test_merge_zero_delta_bit_identical(rng):
    base = rng.standard_normal((5, 4))
    assert np.array_equal(merge_adapter(base, lora_init(5, 4, 2)), base)
    assert np.array_equal(merge_adapter(base, dora_init(base, 2)), base)


def test_merge_lora_forward_equivalence(rng):
    base = rng.standard_normal((6, 5))
    pair = lora_init(6, 5, 3, scale=2.0, seed=4)
    pair.b_matrix[:] = rng.standard_normal((6, 3))
    x = rng.standard_normal((100, 6))
    composed = x @ base + x @ (2.0 * pair.b_matrix @ pair.a_matrix)
    merged = merge_adapter(base, pair)
    assert np.max(np.abs(x @ merged - composed)) < 1e-9


def test_merge_twice_is_an_error(rng):
    base = rng.standard_normal((4, 4))
    pair = lora_init(4, 4, 2)
    merge_adapter(base, pair)
    with pytest.raises(AdapterStateError):
        merge_adapter(base, pair)
