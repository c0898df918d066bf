import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import numeric_grad, rel_err
from sic import tensor as T
from sic.tensor import DimensionError, Tensor, no_grad

floats = st.floats(-3, 3, allow_nan=False, width=64)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, eye).data, np.eye(2))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert not T.matmul(a, Tensor(np.zeros((4, 2)))).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_examples():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    assert np.array_equal(T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0))).data, 2 * x.data)
    ones = Tensor(np.ones((1, 1, 3, 3)))
    assert np.array_equal(T.conv2d(ones, Tensor(np.ones((1, 1, 3, 3)))).data, [[[[9.0]]]])
    assert not T.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), padding=1).data.any()


@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(4, 7), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_conv2d_matches_direct_loops(k, stride, padding, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, size, size))
    w = rng.normal(size=(3, 2, k, k))
    out = T.conv2d(Tensor(x[None]), Tensor(w), stride, padding).data[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (size + 2 * padding - k) // stride + 1
    ref = np.zeros((3, oh, oh))
    for o in range(3):
        for i in range(oh):
            for j in range(oh):
                ref[o, i, j] = (xp[:, i * stride : i * stride + k, j * stride : j * stride + k] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_relu_examples():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not T.relu(Tensor([-1.0, -5.0])).data.any()


@given(arrays(np.float64, st.integers(1, 8), elements=floats))
def test_relu_idempotent(x):
    once = T.relu(Tensor(x))
    assert np.array_equal(T.relu(once).data, once.data)


def test_l2_norm_examples():
    assert T.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    assert T.l2_norm(Tensor([0.0, 0.0])).item() == 0.0
    assert T.l2_norm(Tensor([0.6, 0.8])).item() == pytest.approx(1.0)


def test_backward_examples():
    x = Tensor(2.0, requires_grad=True)
    T.mul(x, 3.0).backward()
    assert x.grad == pytest.approx(3.0)
    x = Tensor(2.0, requires_grad=True)
    T.mul(x, x).backward()
    assert x.grad == pytest.approx(4.0)


@given(arrays(np.float64, st.integers(1, 6), elements=floats))
@settings(max_examples=30)
def test_squared_norm_gradient_is_2x(x):
    t = Tensor(x, requires_grad=True)
    T.tsum(T.mul(t, t)).backward()
    np.testing.assert_allclose(t.grad, 2 * x, rtol=1e-12)
    fd = numeric_grad(lambda v: float((v**2).sum()), x)
    np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-8)


def test_backward_requires_scalar_without_seed():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(Exception):
        T.mul(t, 2.0).backward()


def test_no_grad_builds_no_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.mul(t, 2.0)
    assert not y.requires_grad


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    T.tsum(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def _composite(x, w):
    h = T.relu(T.conv2d(x, w, stride=1, padding=1))
    return T.tsum(T.mul(T.sqrt(T.clamp_min(T.mean(T.mul(h, h), axis=(2, 3)), 1e-6)), 1.5))


@pytest.mark.parametrize("seed", range(4))
def test_composite_graph_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(1, 2, 4, 4))
    w0 = rng.normal(size=(3, 2, 3, 3))
    x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
    _composite(x, w).backward()
    fx = numeric_grad(lambda v: _composite(Tensor(v), Tensor(w0)).item(), x0)
    fw = numeric_grad(lambda v: _composite(Tensor(x0), Tensor(v)).item(), w0)
    assert rel_err(x.grad, fx) < 1e-3
    assert rel_err(w.grad, fw) < 1e-3


@pytest.mark.parametrize(
    "op",
    [
        lambda t: T.tsum(T.softplus(t)),
        lambda t: T.tsum(T.abs_pow(t, 1.5)),
        lambda t: T.tsum(T.div(t, T.add(T.mul(t, t), 1.0))),
        lambda t: T.tsum(T.mul(T.expand(T.reshape(T.tsum(t, axis=1), (3, 1)), (3, 4)), t)),
        lambda t: T.tsum(T.mul(T.concat([t, T.transpose(T.transpose(t))], axis=0), 2.0)),
        lambda t: T.tsum(T.mul(T.getitem(t, (slice(1, 3), 2)), 3.0)),
        lambda t: T.l2_norm(T.reshape(t, (12,))),
        lambda t: T.tsum(T.matmul(t, T.transpose(t))),
    ],
)
def test_elementary_op_gradients(op):
    x0 = np.random.default_rng(5).uniform(0.2, 2.0, size=(3, 4)) * np.array([1, -1, 1, -1])
    t = Tensor(x0, requires_grad=True)
    op(t).backward()
    fd = numeric_grad(lambda v: op(Tensor(v)).item(), x0)
    assert rel_err(t.grad, fd) < 1e-3


def test_scalar_getitem_backward():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.mul(T.getitem(x, 1), 4.0).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 4.0, 0.0])


def test_elementwise_shapes_must_match():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))
