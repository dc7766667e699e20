import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from direcformer import tensor as tn
from direcformer.tensor import Tensor, backward, finite_diff_check


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# -- matmul ------------------------------------------------------------------
def test_matmul_identity():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(tn.matmul(a, T(np.eye(2))).data, a.data)


def test_matmul_against_triple_loop():
    a, b = np.array([[1., 2], [3, 4]]), np.array([[5., 6], [7, 8]])
    out = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                out[i, j] += a[i, k] * b[k, j]
    assert np.array_equal(out, [[19, 22], [43, 50]])
    assert np.array_equal(tn.matmul(T(a), T(b)).data, out)


def test_matmul_zero():
    out = tn.matmul(T(np.zeros((2, 3))), T(np.arange(12.).reshape(3, 4)))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# -- layer norm --------------------------------------------------------------
def test_layer_norm_constant_row():
    out = tn.layer_norm(T([5., 5, 5, 5]), T(np.ones(4)), T(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros(4))


def test_layer_norm_two_values():
    out = tn.layer_norm(T([1., 3]), T(np.ones(2)), T(np.zeros(2)), eps=1e-300)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    rng = np.random.default_rng(0)
    b = rand(rng, 5)
    out = tn.layer_norm(T(rand(rng, 3, 5)), T(np.zeros(5)), T(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 5)))


def test_norm_linear_matches_layer_norm_then_linear():
    rng = np.random.default_rng(1)
    x, g, b, w, c = rand(rng, 4, 6), rand(rng, 6), rand(rng, 6), rand(rng, 6, 3), rand(rng, 3)
    ref = tn.linear(tn.layer_norm(T(x), T(g), T(b)), T(w), T(c)).data
    np.testing.assert_allclose(tn.norm_linear(T(x), T(g), T(b), T(w), T(c)).data, ref, atol=1e-12)


# -- cosine -------------------------------------------------------------------
def test_cosine_parallel_and_orthogonal():
    k = np.array([[1., 2, 0], [0, 0, 3]])
    q = np.array([[2., 4, 0]])
    out = tn.cosine_rows(T(q), T(k)).data
    assert out[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert out[0, 1] == 0.0


def test_cosine_matches_scalar_loop():
    rng = np.random.default_rng(2)
    q, k = rand(rng, 3, 4), rand(rng, 5, 4)
    ref = np.empty((3, 5))
    for i in range(3):
        for j in range(5):
            dot = sum(q[i, d] * k[j, d] for d in range(4))
            nq = max(np.sqrt(sum(v * v for v in q[i])), 1e-8)
            nk = max(np.sqrt(sum(v * v for v in k[j])), 1e-8)
            ref[i, j] = dot / (nq * nk)
    np.testing.assert_allclose(tn.cosine_rows(T(q), T(k)).data, ref, atol=1e-12)


def test_cosine_zero_row_is_zero():
    out = tn.cosine_rows(T(np.zeros((1, 3))), T([[1., 2, 3]]))
    assert out.data[0, 0] == 0.0 and np.isfinite(out.data).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (5, 4), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3))
def test_cosine_bounded_and_scale_invariant(q, k, c):
    a = tn.cosine_rows(T(q), T(k)).data
    assert np.all(a <= 1 + 1e-12) and np.all(a >= -1 - 1e-12)
    # rows far above the eps guard are exactly scale invariant up to rounding
    big = np.linalg.norm(q, axis=1) > 1e-6
    b = tn.cosine_rows(T(c * q), T(k)).data
    np.testing.assert_allclose(b[big], a[big], atol=1e-10)


# -- softmax ------------------------------------------------------------------
def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(tn.softmax_rows(T([[0., 0, 0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(tn.softmax_rows(T([[1000., 0]])).data, [[1, 0]], atol=1e-12)


def test_softmax_direct_formula():
    e = np.exp([1., 2, 3])
    np.testing.assert_allclose(tn.softmax_rows(T([[1., 2, 3]])).data[0], e / e.sum(), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    y = tn.softmax_rows(T(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


# -- elementwise --------------------------------------------------------------
def test_elementwise_examples():
    x = T([1., -2, 3])
    assert np.array_equal(tn.elementwise("add", x, T(np.zeros(3))).data, x.data)
    assert np.array_equal(tn.elementwise("scale", x, 1.0).data, x.data)
    assert np.array_equal(tn.elementwise("mul", T([1., 2]), T([3., 4])).data, [3, 8])
    with pytest.raises(ValueError):
        tn.elementwise("add", T([1., 2]), T([1., 2, 3]))
    with pytest.raises(ValueError):
        tn.elementwise("pow", x, x)


def test_float32_is_preserved_with_scalars():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x * 0.5 + 1.0) - 2.0
    assert y.dtype == np.float32
    backward(y.sum())
    assert x.grad.dtype == np.float32


# -- gelu ---------------------------------------------------------------------
def test_gelu_values():
    g = tn.gelu(T([0., 10., -10., 1.])).data
    assert g[0] == 0.0
    assert abs(g[1] - 10) < 1e-3 and abs(g[2]) < 1e-3
    c = np.sqrt(2 / np.pi)
    assert g[3] == pytest.approx(0.5 * (1 + np.tanh(c * (1 + 0.044715))), abs=1e-12)
    # tanh form stays within 1e-3 of the erf form at 1
    assert g[3] == pytest.approx(0.8413447460685429, abs=1e-3)


# -- backward -----------------------------------------------------------------
def test_backward_sum_and_square():
    x = T([1., 2, 3], grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    backward((x * x).sum())
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_fan_out_accumulates():
    x = T([1., 2], grad=True)
    y = x * 3.0
    backward((y + y * y).sum())
    np.testing.assert_allclose(x.grad, 3 + 2 * 9 * x.data)


def test_backward_detached_is_usage_error():
    with pytest.raises(RuntimeError):
        backward(T(1.0))
    with pytest.raises(RuntimeError):
        backward(T([1., 2], grad=True) * 2.0)


def test_no_grad_records_nothing():
    x = T([1., 2], grad=True)
    with tn.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_cross_entropy_oracles():
    out = tn.cross_entropy(T(np.zeros(27)), 4)
    assert out.item() == pytest.approx(np.log(27), abs=1e-12)
    z = np.zeros(5)
    z[2] = 1e6
    assert tn.cross_entropy(T(z), 2).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(3)
    logits, t = rand(rng, 4, 7), np.array([0, 6, 3, 3])
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ref = np.mean(lse - logits[np.arange(4), t])
    assert tn.cross_entropy(T(logits), t).item() == pytest.approx(ref, abs=1e-10)
    with pytest.raises(ValueError):
        tn.cross_entropy(T(np.zeros(3)), 3)


# -- finite differences --------------------------------------------------------
def test_finite_diff_exact_on_linear():
    rng = np.random.default_rng(4)
    assert finite_diff_check(lambda x: x.sum(), rand(rng, 3, 4)) <= 1e-10


def test_finite_diff_layer_norm_matmul():
    rng = np.random.default_rng(5)
    w, g, b = T(rand(rng, 4, 3)), T(rand(rng, 3)), T(rand(rng, 3))
    f = lambda x: (tn.layer_norm(tn.matmul(x, w), g, b) * T(rand(np.random.default_rng(9), 5, 3))).sum()
    assert finite_diff_check(f, rand(rng, 5, 4)) <= 1e-4


def test_finite_diff_cosine():
    rng = np.random.default_rng(6)
    k, c = T(rand(rng, 5, 4)), T(rand(rng, 3, 5))
    assert finite_diff_check(lambda q: (tn.cosine_rows(q, k) * c).sum(), rand(rng, 3, 4)) <= 1e-4


def test_getitem_fancy_index_accumulates():
    x = T([1., 2, 3], grad=True)
    backward(x[np.array([0, 0, 2])].sum())
    assert np.array_equal(x.grad, [2, 0, 1])


def test_determinism_bitwise():
    rng = np.random.default_rng(7)
    q, k = rand(rng, 6, 8), rand(rng, 9, 8)
    a = tn.cosine_rows(T(q), T(k)).data
    b = tn.cosine_rows(T(q), T(k)).data
    assert a.tobytes() == b.tobytes()
