import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advlab.gradcheck import max_gradient_error, numeric_grad
from advlab.tensor import (ShapeError, Tensor, TapeError, backward, concat, exp, log, matmul,
                           no_grad, power, relu, reset_tape, split, sqrt, tsum)
from advlab.tensor import add, div, mul, sub


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_add_values():
    np.testing.assert_array_equal((T([1, 2]) + T([3, 4])).data, [4, 6])


def test_mul_by_ones_is_identity(rng):
    x = T(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal((x * Tensor(np.ones((3, 4)))).data, x.data)


def test_mul_grad_matches_finite_difference():
    a, b = T([2.0]), T([5.0])
    backward((a * b).sum())
    np.testing.assert_allclose(a.grad, [5.0])
    num = numeric_grad(lambda: (a * b).sum(), a, 1e-6)
    np.testing.assert_allclose(num, [5.0], rtol=1e-8)


def test_broadcast_and_unbroadcast(rng):
    a = T(rng.normal(size=(2, 3, 4)))
    b = T(rng.normal(size=(4,)))
    out = a * b
    assert out.shape == (2, 3, 4)
    backward(out.sum())
    np.testing.assert_allclose(b.grad, a.data.sum(axis=(0, 1)))
    assert a.grad.shape == a.shape


def test_broadcast_failure_raises():
    with pytest.raises(ShapeError):
        T(np.ones((2, 3))) + T(np.ones((4,)))


def test_division_by_zero_propagates_inf():
    with np.errstate(divide="ignore"):
        out = div(T([1.0, -1.0]), T([0.0, 0.0]))
    assert np.isposinf(out.data[0]) and np.isneginf(out.data[1])


def test_matmul_identity_and_hand_values(rng):
    m = rng.normal(size=(2, 2))
    np.testing.assert_array_equal(matmul(T(np.eye(2)), T(m)).data, m)
    out = matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradient(rng):
    a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    assert max_gradient_error(lambda: (matmul(a, b) ** 2).sum(), [a, b], h=1e-6) < 1e-6


def test_batched_matmul_gradient(rng):
    a, b = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(2, 4, 5)))
    assert max_gradient_error(lambda: (a @ b).sum() * (a @ b).mean(), [a, b]) < 1e-6


def test_sum_grad_is_ones():
    x = T([1.0, 2.0, 3.0])
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_quadratic_grad():
    x = T([1.0, 2.0])
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_multi_consumer_accumulates(rng):
    x = T(rng.normal(size=(5,)))
    backward((x * 3.0).sum())
    g1 = x.grad.copy()
    x.grad = None
    reset_tape()
    backward(exp(x).sum())
    g2 = x.grad.copy()
    x.grad = None
    reset_tape()
    backward((x * 3.0).sum() + exp(x).sum())
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-14)


def test_backward_requires_scalar(rng):
    x = T(rng.normal(size=(3,)))
    with pytest.raises(TapeError):
        backward(x * 2.0)


def test_tape_is_single_use(rng):
    x = T(rng.normal(size=(3,)))
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_no_grad_records_nothing(rng):
    x = T(rng.normal(size=(3,)))
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    with pytest.raises(TapeError):
        backward(y)


def test_constant_inputs_never_get_grad(rng):
    x = T(rng.normal(size=(3,)))
    c = Tensor(rng.normal(size=(3,)))
    backward((x * c).sum())
    assert c.grad is None


@pytest.mark.parametrize("fn", [
    lambda x: exp(x).sum(),
    lambda x: log(x * x + 1.0).sum(),
    lambda x: sqrt(x * x + 1.0).sum(),
    lambda x: power(x * x + 0.5, 1.5).sum(),
    lambda x: (relu(x) * x).sum(),
    lambda x: sub(x, x * x).mean(),
    lambda x: add(x.reshape(2, 6).transpose() @ x.reshape(2, 6), 1.0).sum(),
    lambda x: (x[1:, ::2] * x[:-1, 1::2]).sum(),
    lambda x: tsum(x, axis=1, keepdims=True).sum() * x.mean(),
    lambda x: concat(split(x, 2, axis=1)[::-1], axis=0).reshape(-1)[3:].sum() ** 2,
    lambda x: mul(x[[0, 2, 2]], 2.0).sum(),
])
def test_op_gradients(rng, fn):
    x = T(rng.normal(size=(3, 4)) + 0.1)
    assert max_gradient_error(lambda: fn(x), [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4),
                  elements=st.floats(-1e3, 1e3)))
def test_reshape_roundtrip(arr):
    x = Tensor(arr)
    assert np.array_equal(x.reshape(-1).reshape(*arr.shape).data, arr)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20),
       st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_add_commutes(a, b):
    n = min(len(a), len(b))
    x, y = Tensor(np.array(a[:n])), Tensor(np.array(b[:n]))
    assert np.array_equal((x + y).data, (y + x).data)
