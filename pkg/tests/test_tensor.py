import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loma import tensor as T
from oracles import central_difference


def leaf(a):
    return T.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- matmul --------------------------------------------------------------------
def test_matmul_identity():
    out = T.matmul(T.Tensor([[1.0, 0.0], [0.0, 1.0]]), T.Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_dot():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a = leaf(rng.standard_normal((3, 4)))
    b = T.Tensor(rng.standard_normal((4, 2)))
    T.matmul(a, b).sum().backward()
    num = central_difference(lambda: float(np.matmul(a.data, b.data).sum()), a.data)
    np.testing.assert_allclose(a.grad, num, rtol=1e-6)


# -- masked softmax --------------------------------------------------------------
def test_masked_softmax_uniform():
    out = T.masked_softmax(T.Tensor([0.0, 0.0, 0.0]), np.array([1, 1, 1], bool))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_masked_softmax_single_allowed():
    out = T.masked_softmax(T.Tensor([5.0, 100.0]), np.array([1, 0], bool))
    assert out.data.tolist() == [1.0, 0.0]


def test_masked_softmax_two_way():
    out = T.masked_softmax(T.Tensor([1.0, 2.0, 3.0]), np.array([1, 1, 0], bool))
    z = math.e + math.e**2
    np.testing.assert_allclose(out.data, [math.e / z, math.e**2 / z, 0.0], atol=1e-15)
    assert out.data[2] == 0.0


def test_masked_softmax_degenerate_row():
    with pytest.raises(T.DegenerateRowError):
        T.masked_softmax(T.Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]], bool))


def test_masked_softmax_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.masked_softmax(T.Tensor(np.zeros((2, 3))), np.ones((3, 2), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_masked_softmax_rows_are_distributions(b, h, n, k, seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((b, h, n, k)) * 5
    mask = rng.random((b, n, k)) < 0.5
    mask[..., rng.integers(0, k)] = True
    p = T.masked_softmax(T.Tensor(scores), mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
    assert (p[~np.broadcast_to(mask[:, None], p.shape)] == 0).all()


# -- cross entropy -----------------------------------------------------------------
def test_cross_entropy_uniform():
    assert T.cross_entropy(T.Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_saturated():
    logits = np.zeros(5)
    logits[3] = 30.0
    assert T.cross_entropy(T.Tensor(logits), 3).item() < 1e-9


def test_cross_entropy_direct():
    expected = math.log(math.e + math.e**2 + math.e**3) - 1.0
    assert expected == pytest.approx(2.4076, abs=1e-4)
    assert T.cross_entropy(T.Tensor([1.0, 2.0, 3.0]), 0).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("target", [4, 7, -1])
def test_cross_entropy_out_of_vocab(target):
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros(4)), target)


def test_cross_entropy_ignores_minus_one_rows():
    logits = T.Tensor(np.random.default_rng(1).standard_normal((3, 5)), requires_grad=True)
    loss = T.cross_entropy(logits, np.array([1, -1, 4]), reduction="none")
    assert loss.data[1] == 0.0
    loss.sum().backward()
    assert (logits.grad[1] == 0).all()


# -- backward ------------------------------------------------------------------------
def test_sum_gradient_all_ones():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_cross_entropy_of_linear_matches_fd():
    rng = np.random.default_rng(2)
    w = leaf(rng.standard_normal((5, 4)))
    x = T.Tensor(rng.standard_normal((4, 1)))
    T.cross_entropy(T.matmul(w, x).reshape(5), 3).backward()

    def f():
        z = (w.data @ x.data)[:, 0]
        return float(np.log(np.exp(z).sum()) - z[3])

    num = central_difference(f, w.data)
    rel = np.abs(w.grad - num).max() / np.abs(num).max()
    assert rel < 1e-4


def test_unreachable_parameter_gets_no_gradient():
    a = leaf(np.ones(3))
    unused = leaf(np.ones(3))
    (a * 2.0).sum().backward()
    assert unused.grad is None or not unused.grad.any()


def test_backward_twice_raises():
    a = leaf(np.ones(3))
    loss = (a * a).sum()
    loss.backward()
    with pytest.raises(T.GraphConsumedError):
        loss.backward()


def test_gradients_accumulate_across_graphs():
    a = leaf(np.ones(2))
    a.sum().backward()
    a.sum().backward()
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    a = leaf(np.ones(2))
    with T.no_grad():
        out = a * 3.0
    assert not out.requires_grad


# -- finite-difference sweep over every op -------------------------------------------
def _fd_check(build, inputs, rtol=1e-4):
    """build(*tensors) -> scalar Tensor; compare grads to central differences."""
    leaves = [leaf(x) for x in inputs]
    build(*leaves).backward()
    for lf in leaves:
        def f():
            with T.no_grad():
                return build(*[T.Tensor(l.data) for l in leaves]).item()

        num = central_difference(f, lf.data)
        scale = max(np.abs(num).max(), np.abs(lf.grad).max(), 1e-8)
        assert np.abs(lf.grad - num).max() / scale < rtol


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=10, deadline=None)
@given(shapes, st.integers(0, 10_000))
def test_fd_elementwise_and_shape_ops(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape[1:])
    w = rng.standard_normal(shape)

    def build(x, y):
        z = T.silu(x * y + x) - y
        z = z.transpose(2, 0, 1).reshape(-1)
        return (z * w.transpose(2, 0, 1).reshape(-1)).sum() + x[:, :1].mean()

    _fd_check(build, [a, b])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_fd_batched_matmul(b, n, k, m, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((b, n, m))
    _fd_check(lambda x, y: (T.matmul(x, y) * w).sum(), [rng.standard_normal((b, n, k)), rng.standard_normal((k, m))])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 2), st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_fd_masked_softmax(b, h, n, k, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((b, n, k)) < 0.6
    mask[..., 0] = True
    w = rng.standard_normal((b, h, n, k))
    _fd_check(lambda s: (T.masked_softmax(s, mask, 0.7) * w).sum(), [rng.standard_normal((b, h, n, k))])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 10_000))
def test_fd_rms_norm(n, d, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, d))
    _fd_check(lambda x, g: (T.rms_norm(x, g) * w).sum(), [rng.standard_normal((n, d)), rng.standard_normal(d)])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 10_000))
def test_fd_cross_entropy_batch(n, v, seed):
    rng = np.random.default_rng(seed)
    tg = rng.integers(-1, v, size=n)
    _fd_check(lambda x: T.cross_entropy(x, tg, reduction="sum"), [rng.standard_normal((n, v))])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_fd_embedding(n, d, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, size=n)
    w = rng.standard_normal((n, d))
    _fd_check(lambda tab: (T.embedding(tab, ids) * w).sum(), [rng.standard_normal((5, d))])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 2), st.integers(1, 5), st.sampled_from([2, 4, 8]), st.integers(0, 10_000))
def test_fd_rope_and_concat(b, h, n, d, seed):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 50, size=n)
    w = rng.standard_normal((b, h, 2 * n, d))

    def build(x, y):
        return (T.concat([T.rope(x, pos), y], axis=2) * w).sum()

    _fd_check(build, [rng.standard_normal((b, h, n, d)), rng.standard_normal((b, h, n, d))])


def test_getitem_fancy_index_accumulates():
    x = leaf(np.arange(4.0))
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1, 0])


def test_rope_is_rotation():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((1, 2, 5, 8)))
    y = T.rope(x, np.arange(5) * 7)
    np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1), rtol=1e-12)
    np.testing.assert_array_equal(T.rope(x, np.zeros(5, int)).data, x.data)


def test_determinism_same_seed():
    a = T.randn((4, 4), seed=11)
    b = T.randn((4, 4), seed=11)
    out1 = T.masked_softmax(T.matmul(a, a), np.tri(4, dtype=bool)).data
    out2 = T.masked_softmax(T.matmul(b, b), np.tri(4, dtype=bool)).data
    assert out1.tobytes() == out2.tobytes()


def test_float32_selectable():
    prev = T.get_default_dtype()
    try:
        T.set_default_dtype("float32")
        assert T.Tensor([1, 2]).dtype == np.float32
        assert T.randn((2,), seed=0).dtype == np.float32
    finally:
        T.set_default_dtype(prev)
