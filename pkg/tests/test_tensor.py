import math

import numpy as np
import pytest
from gradcheck import check_points, kink_signature

from aeae import tensor as T
from aeae.tensor import ShapeError, Tape, Tensor


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# conv2d


def test_conv2d_zero_input_gives_zero_output():
    kernel = t(np.random.default_rng(0).normal(size=(4, 1, 3, 3)))
    out = T.conv2d(t(np.zeros((1, 1, 3, 3))), kernel, 1, 1)
    assert out.shape == (1, 4, 3, 3)
    assert np.all(out.data == 0)


def test_conv2d_one_by_one_kernel():
    out = T.conv2d(t([[[[1, 2], [3, 4]]]]), t([[[[2]]]]), 1, 0)
    np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(t(x), t(k), 2, 1, t(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    arrays = {"x": rng.normal(size=(2, 2, 5, 5)), "k": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
    w = rng.normal(size=T.conv2d(t(arrays["x"]), t(arrays["k"]), stride, padding).shape)

    def loss(p):
        return (T.conv2d(p["x"], p["k"], stride, padding, p["b"]) * Tensor(w)).sum()

    for *_, err in check_points(loss, arrays, 30, rng):
        assert err < 1e-4


def test_conv2d_shape_errors():
    x = t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(x, t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 2, 3, 3))))


# maxpool / upsample


def test_maxpool_value():
    assert T.maxpool2d(t([[[[1, 2], [3, 4]]]]), 2).data.item() == 4


def test_maxpool_ties_route_to_first_element():
    x = t(np.full((1, 1, 4, 4), 0.7), grad=True)
    out = T.maxpool2d(x, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.7))
    T.backward(out.sum())
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_gradient_at_untied_points():
    rng = np.random.default_rng(3)
    x = rng.permutation(64).reshape(1, 1, 8, 8) / 10.0  # gaps of 0.1 >> h
    w = rng.normal(size=(1, 1, 4, 4))
    res = check_points(lambda p: (T.maxpool2d(p["x"], 2) * Tensor(w)).sum(), {"x": x}, 20, rng)
    assert max(r[-1] for r in res) < 1e-4


def test_maxpool_indivisible_dims():
    with pytest.raises(ShapeError):
        T.maxpool2d(t(np.zeros((1, 1, 3, 4))), 2)


def test_upsample():
    np.testing.assert_array_equal(T.upsample2d(t([[[[5]]]]), 2).data[0, 0], [[5, 5], [5, 5]])
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(T.upsample2d(t(x), 1).data, x)
    const = t(np.full((1, 1, 2, 2), 0.3))
    np.testing.assert_array_equal(T.upsample2d(T.maxpool2d(const, 2), 2).data, const.data)
    with pytest.raises(ValueError):
        T.upsample2d(const, 0)


def test_upsample_gradient_sums_blocks():
    x = t(np.zeros((1, 1, 2, 2)), grad=True)
    g = np.arange(16.0).reshape(1, 1, 4, 4)
    T.backward((T.upsample2d(x, 2) * Tensor(g)).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])


# dense / activations


def test_dense_identity_and_value():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.dense(t(x), t(np.eye(4)), t(np.zeros(4))).data, x)
    assert T.dense(t([[1, 1]]), t([[3], [4]]), t([0])).data.item() == 7


def test_dense_gradients_and_errors():
    rng = np.random.default_rng(4)
    arrays = {"x": rng.normal(size=(3, 5)), "w": rng.normal(size=(5, 2)), "b": rng.normal(size=2)}
    res = check_points(lambda p: T.square(T.dense(p["x"], p["w"], p["b"])).sum(), arrays, 20, rng)
    assert max(r[-1] for r in res) < 1e-4
    with pytest.raises(ShapeError):
        T.dense(t(np.zeros((1, 3))), t(np.zeros((4, 2))), t(np.zeros(2)))


def test_activation_values():
    np.testing.assert_array_equal(T.relu(t([-1.0, 2.0])).data, [0.0, 2.0])
    assert T.sigmoid(t([0.0])).data.item() == 0.5
    s = T.sigmoid(t(np.linspace(-30, 30, 101))).data
    assert np.all((s > 0) & (s < 1))


@pytest.mark.parametrize("fn", [T.relu, T.sigmoid, T.tanh, T.square])
def test_activation_gradients(fn):
    rng = np.random.default_rng(5)
    x = rng.uniform(0.2, 2.0, size=12) * rng.choice([-1, 1], size=12)  # away from relu's kink
    w = rng.normal(size=12)
    res = check_points(lambda p: (fn(p["x"]) * Tensor(w)).sum(), {"x": x}, 12, rng)
    assert max(r[-1] for r in res) < 1e-4


# softmax / cross-entropy / mse


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(t([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(t([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(T.softmax(t([1.0, 2.0, 3.0])).data, [v / sum(e) for v in e], atol=1e-9)


def test_softmax_shift_invariance_and_sum():
    z = np.random.default_rng(6).uniform(-10, 10, size=(20, 7))
    p = T.softmax(t(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax(t(z + 3.7)).data, p, atol=1e-9)


def test_softmax_and_log_softmax_gradients():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    for fn in (T.softmax, T.log_softmax):
        res = check_points(lambda p: (fn(p["z"]) * Tensor(w)).sum(), {"z": z}, 12, rng)
        assert max(r[-1] for r in res) < 1e-4


def test_cross_entropy_values():
    for k in (2, 5, 10):
        assert T.cross_entropy(t(np.zeros((1, k))), [0]).item() == pytest.approx(math.log(k), abs=1e-12)
    assert T.cross_entropy(t([[50.0, 0.0, 0.0]]), [0]).item() < 1e-20
    with pytest.raises(ValueError):
        T.cross_entropy(t(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.random.default_rng(8).normal(size=(1, 5))
    zt = t(z, grad=True)
    T.backward(T.cross_entropy(zt, [2]))
    onehot = np.eye(5)[2]
    np.testing.assert_allclose(zt.grad[0], T.softmax_array(z)[0] - onehot, atol=1e-12)
    num = T.finite_diff_grad(lambda v: T.cross_entropy(v, [2]), z)
    np.testing.assert_allclose(zt.grad, num, rtol=1e-6, atol=1e-9)


def test_mse_values_and_gradient():
    a = t([1.0, 1.0, 0.0, 0.0], grad=True)
    b = t([0.5, 0.5, 0.5, 0.5])
    assert T.mse(a, a).item() == 0.0
    loss = T.mse(a, b)
    assert loss.item() == pytest.approx(0.25)
    T.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * (a.data - b.data) / 4)
    with pytest.raises(ShapeError):
        T.mse(a, t([1.0, 2.0]))


# backward / tape / finite differences


def test_backward_of_sum_is_ones():
    x = t(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_rejects_non_scalar():
    x = t(np.ones(3), grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_backward_is_deterministic_and_fresh():
    rng = np.random.default_rng(9)
    x = t(rng.normal(size=(2, 3)), grad=True)
    loss = T.square(x).sum()
    T.backward(loss)
    g1 = x.grad.copy()
    T.backward(loss)  # no accumulation across calls
    np.testing.assert_array_equal(x.grad, g1)


def test_tape_is_topological_and_unique():
    x = t(np.ones((2, 2)), grad=True)
    y = T.relu(x) * x
    loss = (y + T.square(y)).sum()
    nodes = Tape.record(loss).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    assert len(pos) == len(nodes)
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert nodes[-1] is loss


def test_finite_diff_grad():
    x = np.random.default_rng(0).normal(size=5)
    for h in (1e-2, 1e-4, 1e-6):
        np.testing.assert_allclose(T.finite_diff_grad(lambda v: v.sum(), x, h), 1.0, atol=1e-8)
    assert T.finite_diff_grad(lambda v: T.square(v).sum(), np.array([3.0]), 1e-4)[0] == pytest.approx(6.0, abs=1e-6)
    with pytest.raises(ValueError):
        T.finite_diff_grad(lambda v: v.sum(), x, 0.0)


def test_no_nan_for_bounded_inputs():
    x = t(np.linspace(-10, 10, 64).reshape(1, 1, 8, 8), grad=True)
    k = t(np.random.default_rng(0).normal(size=(2, 1, 3, 3)), grad=True)
    h = T.conv2d(x, k, 1, 1)
    z = T.dense(T.sigmoid(T.maxpool2d(T.relu(h), 2)).reshape(1, -1), t(np.ones((32, 3))), t(np.zeros(3)))
    loss = T.cross_entropy(z, [1]) + T.tanh(h).sum()
    T.backward(loss)
    for arr in (loss.data, x.grad, k.grad):
        assert np.all(np.isfinite(arr))


def test_kink_signature_detects_relu_crossing():
    x = t([0.5, -0.5], grad=True)
    base = kink_signature(T.relu(x).sum())
    moved = kink_signature(T.relu(t([0.5, 0.1], grad=True)).sum())
    assert not np.array_equal(base[0], moved[0])


def test_item_and_shape_helpers():
    assert t([[3.0]]).item() == 3.0
    with pytest.raises(ShapeError):
        t([1.0, 2.0]).item()
