import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskspot import tensor as T
from maskspot.tensor import ShapeError, UsageError

from fdcheck import OP_CASES, check_op

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 5))
    out = T.conv2d(T.tensor(x), T.tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_counts_overlap():
    out = T.conv2d(T.tensor(np.ones((1, 3, 3))), T.tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == out.data[0, 2, 2] == 4.0


def test_conv_output_shape_formula():
    x = T.tensor(np.zeros((2, 9, 7)))
    k = T.tensor(np.zeros((3, 2, 3, 3)))
    assert T.conv2d(x, k, stride=2, padding=1).shape == (3, 5, 4)
    assert T.conv2d(x, k, stride=1, padding=0).shape == (3, 7, 5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.tensor(np.zeros((2, 4, 4))), T.tensor(np.zeros((1, 3, 3, 3))))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(b), stride=2, padding=1, dilation=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref = b[o] + sum(xp[c, 2 * i + u, 2 * j + v] * k[o, c, u, v]
                                 for c in range(2) for u in range(3) for v in range(3))
                assert out[o, i, j] == pytest.approx(ref, abs=1e-12)


def test_conv_gradient_matches_finite_differences():
    make, fn = OP_CASES["conv2d_3x3"]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5))
    kern = rng.normal(size=(3, 2, 3, 3))
    assert check_op(lambda a, b: T.conv2d(a, b, padding=1), [x, kern], rng) < 1e-4


def test_matmul_examples():
    b = np.random.default_rng(1).normal(size=(3, 2))
    assert np.array_equal(T.matmul(T.tensor(np.eye(3)), T.tensor(b)).data, b)
    out = T.matmul(T.tensor([[1.0, 2.0], [3.0, 4.0]]), T.tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]
    with pytest.raises(ShapeError):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    assert check_op(T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], rng) < 1e-4


def test_elementwise_examples():
    assert T.elementwise("sigmoid", T.tensor(0.0)).item() == 0.5
    assert T.elementwise("relu", T.tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    x = T.parameter(0.0)
    T.backward(T.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(UsageError):
        T.elementwise("cosh", T.tensor(1.0))


def test_no_broadcast_beyond_scalar():
    with pytest.raises(ShapeError):
        T.add(T.tensor(np.zeros((3, 1))), T.tensor(np.zeros((3, 4))))
    out = T.mul(T.tensor(np.ones((2, 2))), T.tensor(3.0))
    assert out.data.tolist() == [[3.0, 3.0], [3.0, 3.0]]


def test_softmax_examples():
    assert np.allclose(T.softmax(T.tensor(np.zeros(4))).data, 0.25, atol=0)
    out = T.softmax(T.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0 and out[1] < 1e-300 + 1e-400


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(T.tensor(x), axis=1).data
    assert np.all(out > 0) or np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_sigmoid_in_open_unit_interval(x):
    out = T.sigmoid(T.tensor(x)).data
    assert np.all((out > 0) & (out < 1))


def test_softmax_jvp_finite_differences():
    rng = np.random.default_rng(5)
    assert check_op(lambda z: T.softmax(z), [rng.normal(size=5)], rng) < 1e-4


def test_backward_examples():
    x = T.parameter(np.random.default_rng(0).normal(size=(2, 3)))
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = T.parameter(np.random.default_rng(1).normal(size=(4,)))
    T.backward(T.tsum(y * y) * 0.5)
    assert np.allclose(y.grad, y.data, rtol=0, atol=1e-15)


def test_backward_on_untaped_tensor():
    with pytest.raises(UsageError):
        T.backward(T.tensor(1.0))
    with pytest.raises(UsageError):
        T.backward(T.parameter(1.0))


def test_backward_visits_each_op_once():
    x = T.parameter(2.0)
    y = x * x          # shared by two consumers
    z = y + y
    T.backward(z)
    assert x.grad == pytest.approx(8.0)


def test_grad_shapes_match_data():
    rng = np.random.default_rng(4)
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(4, 5)))
    T.backward(T.tsum(T.relu(T.matmul(a, b))))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def _graph(seed):
    rng = np.random.default_rng(seed)
    x = T.parameter(rng.normal(size=(2, 6, 6)))
    k = T.parameter(rng.normal(size=(3, 2, 3, 3)))
    w = T.parameter(rng.normal(size=(4, 3)))
    h = T.tanh(T.conv2d(x, k, padding=1))
    seq = T.reshape(h, (3, 36))
    loss = T.tsum(T.log_softmax(T.transpose(T.matmul(w, seq)), axis=1))
    T.backward(loss)
    return loss.data.copy(), x.grad, k.grad, w.grad


def test_determinism_bitwise():
    a, b = _graph(7), _graph(7)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_disjoint_graphs_on_threads():
    expected = _graph(11)
    results = [None] * 4

    def work(i):
        results[i] = _graph(11)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results:
        for u, v in zip(r, expected):
            assert u.tobytes() == v.tobytes()


def test_no_grad_disables_taping():
    x = T.parameter(1.0)
    with T.no_grad():
        y = x * 2.0
    assert not y.is_taped


def test_lstm_shapes_and_direction():
    rng = np.random.default_rng(0)
    x = T.tensor(rng.normal(size=(2, 5, 3)))
    wi, wr, b = (T.tensor(rng.normal(size=s)) for s in ((3, 8), (2, 8), (8,)))
    fwd = T.lstm(x, wi, wr, b)
    rev = T.lstm(x, wi, wr, b, reverse=True)
    flipped = T.lstm(T.tensor(x.data[:, ::-1]), wi, wr, b)
    assert fwd.shape == (2, 5, 2)
    assert np.allclose(rev.data, flipped.data[:, ::-1], atol=1e-14)


def test_check_finite_names_first_offender():
    assert T.check_finite({"a": np.ones(2), "b": np.array([np.nan]), "c": np.array([np.inf])}) == "b"
    assert T.check_finite({"a": np.ones(2)}) is None
