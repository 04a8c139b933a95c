import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sodnet import tensor as T
from sodnet.tensor import DimensionError, NumericalError, Tape, Tensor

floats = st.floats(-3, 3, allow_nan=False, width=64)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=floats)


def backward_of(fn, *ts):
    for t in ts:
        t.grad = None
    with Tape() as tape:
        y = fn()
        tape.backward(y)
    return y


def test_add_broadcast_example():
    y = T.add(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(y.data, [[4, 5], [5, 6]])


def test_add_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_matmul_example_and_mismatch():
    y = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(y.data, [[3], [7]])
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    y = T.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(y.data, [0.5, 0.5])
    y = T.softmax(Tensor([1000.0, 0.0]))
    assert np.isfinite(y.data).all()
    np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-300)


def test_layer_norm_output_statistics():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 16)) * 3 + 2)
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(y.data.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(-1), 1, atol=1e-4)


def test_gelu_values():
    y = T.gelu(Tensor([0.0, 1.0, -1.0]))
    ref = [0.0, 0.5 * (1 + math.erf(1 / math.sqrt(2))), -0.5 * (1 - math.erf(1 / math.sqrt(2)))]
    np.testing.assert_allclose(y.data, ref, rtol=1e-14)


def test_nan_is_an_error():
    with pytest.raises(NumericalError):
        T.log(Tensor([-1.0]))
    with pytest.raises(NumericalError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_twice_requires_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(x * x)
        tape.backward(y)
        with pytest.raises(RuntimeError):
            tape.backward(y)
        tape.reset()
        x.grad = None
        y = T.sum(x * x)
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_gradient_accumulates_over_reuse():
    x = Tensor([3.0], requires_grad=True)
    backward_of(lambda: T.sum(x * x + x), x)
    np.testing.assert_array_equal(x.grad, [7.0])


def test_records_replayed_in_reverse_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    order = []
    with Tape() as tape:
        y = T.exp(x)
        z = T.sum(y)
        tape.backward(z)
        order = [rec[0] for rec in tape.records]
    assert order[0] is y and order[-1] is z


def test_grad_check_examples():
    x = Tensor(np.random.default_rng(1).normal(size=5))
    assert T.grad_check(lambda t: T.sum(t), x) < 1e-10
    x = Tensor([1.0, 2.0])
    assert T.grad_check(lambda t: T.sum(t * t), x) < 1e-8
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_rejects_step_out_of_range():
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.sum(t), Tensor([1.0]), h=1e-2)


def test_grad_check_nonfinite_is_numerical_error():
    with pytest.raises(NumericalError):
        T.grad_check(lambda t: T.sum(T.log(t)), Tensor([1e-7]), h=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays((3, 4)), arrays((4,)))
def test_broadcast_add_gradients_reduce(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    backward_of(lambda: T.sum(ta + tb), ta, tb)
    np.testing.assert_array_equal(ta.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays((2, 5)))
def test_softmax_rows_sum_to_one(a):
    y = T.softmax(Tensor(a * 10), -1)
    np.testing.assert_allclose(y.data.sum(-1), 1.0, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays((2, 3, 4)))
def test_transpose_reshape_roundtrip(a):
    t = Tensor(a)
    back = T.reshape(T.transpose(T.reshape(t, (6, 4))), (4, 6))
    np.testing.assert_array_equal(back.data, a.reshape(6, 4).T)


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=5), requires_grad=True)
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True

    def f():
        h = T.gelu(T.linear(x, w))
        h = T.layer_norm(h, g, Tensor(np.zeros(5)))
        return T.sum(T.softmax(h, -1, mask) * T.sigmoid(h))

    assert T.grad_check_many(f, [x, w, g]) < 1e-4


def brute_fold(p, k, s, pad, out_hw):
    *lead, h, w, c, _, _ = p.shape
    ho, wo = out_hw
    canvas = np.zeros(tuple(lead) + (ho + 2 * pad, wo + 2 * pad, c))
    for i in range(h):
        for j in range(w):
            for a in range(k):
                for b in range(k):
                    canvas[..., i * s + a, j * s + b, :] += p[..., i, j, :, a, b]
    return canvas[..., pad : pad + ho, pad : pad + wo, :]


@pytest.mark.parametrize("k,s,p", [(3, 2, 1), (7, 4, 2), (2, 2, 0), (4, 4, 0)])
def test_fold_matches_scatter_loop(k, s, p):
    rng = np.random.default_rng(k * 10 + s)
    patches = rng.normal(size=(2, 3, 2, 2, k, k))
    out = T.fold(Tensor(patches), k, s, p, (3 * s, 2 * s))
    np.testing.assert_allclose(out.data, brute_fold(patches, k, s, p, (3 * s, 2 * s)), atol=1e-13)


def test_interp_matrix_rows_sum_to_one_and_identity():
    m = T.interp_matrix(5, 11, np.float64)
    np.testing.assert_allclose(m.sum(1), 1.0)
    np.testing.assert_array_equal(T.interp_matrix(4, 4, np.float64), np.eye(4))


def test_take_accumulates_repeated_indices():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward_of(lambda: T.sum(T.take(x, np.array([0, 0, 2]), axis=0)), x)
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_default_dtype_context():
    with T.default_dtype(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
