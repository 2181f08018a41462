import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpn import autodiff as ad
from dpn.autodiff import Tensor

from fdcheck import assert_grads_close, check_fd, numeric_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# -- oracles ----------------------------------------------------------------

def conv_oracle(x, k, b, stride):
    """Direct nested-loop 5x5 convolution with zero padding 2."""
    C, H, W = x.shape
    cout = k.shape[0]
    Ho, Wo = math.ceil(H / stride), math.ceil(W / stride)
    xp = np.zeros((C, H + 4, W + 4))
    xp[:, 2:2 + H, 2:2 + W] = x
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for u in range(5):
                        for v in range(5):
                            acc += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def soft_argmax_oracle(f, temperature=1.0):
    C, H, W = f.shape
    out = []
    for c in range(C):
        m = max(f[c, i, j] for i in range(H) for j in range(W))
        z = 0.0
        ex = ey = 0.0
        for i in range(H):
            for j in range(W):
                w = math.exp((f[c, i, j] - m) / temperature)
                z += w
                ex += w * (-1 + 2 * j / (W - 1))
                ey += w * (-1 + 2 * i / (H - 1))
        out += [ex / z, ey / z]
    return np.array(out)


# -- elementwise ------------------------------------------------------------

def test_exp_zero_and_relu_definition():
    assert ad.exp(Tensor([0.0])).data.tolist() == [1.0]
    assert ad.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]


def test_softplus_derivative_at_zero():
    x = ad.parameter([0.0])
    (g,) = ad.grad(ad.softplus(x).sum(), [x])
    fd = (np.logaddexp(0, 1e-5) - np.logaddexp(0, -1e-5)) / 2e-5
    assert g.item() == pytest.approx(0.5, abs=1e-12)
    assert g.item() == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "neg", "exp", "log", "tanh",
                                "relu", "softplus", "square", "sigmoid"])
def test_elementwise_gradients_match_finite_differences(op, rng):
    a = ad.parameter(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    b = ad.parameter(rng.uniform(0.5, 2.0, (3, 4)))
    if op == "log":
        a.data[:] = np.abs(a.data)
    binary = op in ("add", "sub", "mul", "div")
    fn = getattr(ad, op)

    def f():
        out = fn(a, b) if binary else fn(a)
        return (out * Tensor(np.arange(12.0).reshape(3, 4))).sum()

    check_fd(f, [a, b] if binary else [a])


def test_scalar_broadcasting_gradients(rng):
    a = ad.parameter(rng.normal(size=(2, 3)))
    s = ad.parameter(1.7)
    check_fd(lambda: (a * s + s).sum(), [a, s])


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_forward_ops_are_finite_and_deterministic(x):
    t = Tensor(x)
    for fn in (ad.exp, ad.tanh, ad.relu, ad.softplus, ad.square, ad.sigmoid):
        a, b = fn(t).data, fn(t).data
        assert np.array_equal(a, b)
        assert np.all(np.isfinite(a))


# -- matmul -----------------------------------------------------------------

def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    assert (Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [5.0]])).data.tolist() == [[0.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_gradient_and_errors(rng):
    a, b = ad.parameter(rng.normal(size=(3, 4))), ad.parameter(rng.normal(size=(4, 2)))
    check_fd(lambda: ad.tanh(a @ b).sum(), [a, b])
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- convolution ------------------------------------------------------------

def test_conv_zero_input_and_identity_kernel(rng):
    k = np.zeros((1, 1, 5, 5))
    k[0, 0, 2, 2] = 1.0
    x = rng.normal(size=(1, 7, 7))
    assert np.array_equal(ad.conv2d(Tensor(x), Tensor(k)).data, x)
    assert not ad.conv2d(Tensor(np.zeros((1, 7, 7))), Tensor(rng.normal(size=(2, 1, 5, 5)))).data.any()


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_nested_loop_oracle(stride, rng):
    x, k, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 5, 5)), rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
    assert out.shape == (3, math.ceil(8 / stride), math.ceil(8 / stride))
    np.testing.assert_allclose(out, conv_oracle(x, k, b, stride), rtol=0, atol=1e-10)


def test_conv_batched_equals_per_item(rng):
    x, k = rng.normal(size=(3, 2, 6, 7)), Tensor(rng.normal(size=(4, 2, 5, 5)))
    batched = ad.conv2d(Tensor(x), k, stride=2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], ad.conv2d(Tensor(x[i]), k, stride=2).data,
                                   atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride, rng):
    x = ad.parameter(rng.normal(size=(2, 6, 6)))
    k = ad.parameter(rng.normal(size=(2, 2, 5, 5)) * 0.3)
    b = ad.parameter(rng.normal(size=2))
    w = Tensor(rng.normal(size=(2, math.ceil(6 / stride), math.ceil(6 / stride))))
    check_fd(lambda: (ad.tanh(ad.conv2d(x, k, b, stride)) * w).sum(), [x, k, b])


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_transpose(y)> with the same kernel
    for stride in (1, 2):
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 5, 5))
        y = rng.normal(size=(3, math.ceil(7 / stride), math.ceil(6 / stride)))
        lhs = float((ad.conv2d(Tensor(x), Tensor(k), stride=stride).data * y).sum())
        back = ad.conv_transpose2d(Tensor(y), Tensor(k), stride=stride, out_hw=(7, 6)).data
        assert lhs == pytest.approx(float((x * back).sum()), rel=1e-10)


def test_conv_transpose_gradients(rng):
    x = ad.parameter(rng.normal(size=(2, 3, 3)))
    k = ad.parameter(rng.normal(size=(2, 1, 5, 5)) * 0.3)
    check_fd(lambda: ad.square(ad.conv_transpose2d(x, k, stride=2)).sum(), [x, k])


def test_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((2, 6, 6))), Tensor(np.ones((1, 3, 5, 5))))


# -- spatial soft-argmax ----------------------------------------------------

def test_soft_argmax_limits():
    f = np.full((2, 5, 6), -1e3)
    f[:, 0, 0] = 1e3
    np.testing.assert_allclose(ad.spatial_soft_argmax(Tensor(f)).data, [-1, -1, -1, -1], atol=1e-12)
    np.testing.assert_allclose(ad.spatial_soft_argmax(Tensor(np.zeros((3, 4, 4)))).data,
                               np.zeros(6), atol=1e-15)


def test_soft_argmax_matches_scalar_loop(rng):
    f = rng.normal(size=(1, 4, 4))
    np.testing.assert_allclose(ad.spatial_soft_argmax(Tensor(f)).data, soft_argmax_oracle(f),
                               rtol=0, atol=1e-10)
    f = rng.normal(size=(3, 5, 4))
    np.testing.assert_allclose(ad.spatial_soft_argmax(Tensor(f), 0.3).data,
                               soft_argmax_oracle(f, 0.3), rtol=0, atol=1e-10)


def test_soft_argmax_gradient(rng):
    f = ad.parameter(rng.normal(size=(2, 4, 5)))
    w = Tensor(rng.normal(size=4))
    check_fd(lambda: (ad.spatial_soft_argmax(f, 0.7) * w).sum(), [f])


@settings(max_examples=50)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e6, 1e6)))
def test_soft_argmax_range(f):
    out = ad.spatial_soft_argmax(Tensor(f)).data
    assert np.all(out >= -1.0) and np.all(out <= 1.0)


# -- huber ------------------------------------------------------------------

def test_huber_values():
    assert ad.huber(Tensor(0.0), 0.85).item() == 0.0
    assert ad.huber(Tensor(2.0), 0.85).item() == pytest.approx(1.33875, abs=1e-15)
    x = ad.parameter(0.3)
    (g,) = ad.grad(ad.huber(x, 0.85), [x])
    assert g.item() == pytest.approx(0.3, abs=1e-15)
    num = numeric_grad(lambda: ad.huber(x, 0.85).item(), [x])[0]
    assert g.item() == pytest.approx(float(num), rel=1e-8)


def test_huber_kink_uses_quadratic_branch():
    x = ad.parameter([0.85, -0.85])
    (g,) = ad.grad(ad.huber(x, 0.85).sum(), [x])
    np.testing.assert_array_equal(g.data, [0.85, -0.85])


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(0.01, 10))
def test_huber_nonnegative_and_quadratic_inside(x, delta):
    h = ad.huber(Tensor(x), delta).data
    assert np.all(h >= 0)
    inside = np.abs(x) <= delta
    np.testing.assert_array_equal(h[inside], 0.5 * x[inside] * x[inside])


# -- grad -------------------------------------------------------------------

def test_grad_of_sum_is_ones(rng):
    x = ad.parameter(rng.normal(size=(2, 3)))
    (g,) = ad.grad(x.sum(), [x])
    assert np.array_equal(g.data, np.ones((2, 3)))


def test_second_derivative_of_cube():
    x = ad.parameter(2.0)
    (g,) = ad.grad(x * x * x, [x])
    assert g.item() == 12.0
    (gg,) = ad.grad(g, [x])
    assert gg.item() == 12.0


def test_unreachable_gets_zero_and_non_scalar_rejected(rng):
    x, y = ad.parameter(rng.normal(size=3)), ad.parameter(rng.normal(size=(2, 2)))
    gx, gy = ad.grad((x * 2).sum(), [x, y])
    assert np.array_equal(gy.data, np.zeros((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.grad(x * 2, [x])


def test_grad_of_grad_matches_finite_differences(rng):
    # d/dw of ||d/dx f(x, w)||^2 mixes first- and second-order paths
    x = ad.parameter(rng.normal(size=3))
    w = ad.parameter(rng.normal(size=(3, 3)) * 0.5)

    def inner():
        return ad.tanh(ad.matmul(x.reshape(1, 3), w)).sum()

    def outer():
        (gx,) = ad.grad(inner(), [x])
        return ad.square(gx).sum() + ad.softplus(gx).sum()

    check_fd(outer, [w, x])


def test_hessian_vector_product_of_quadratic(rng):
    a = rng.normal(size=(4, 4))
    A = a @ a.T
    x = ad.parameter(rng.normal(size=(4, 1)))
    v = rng.normal(size=(4, 1))
    f = 0.5 * (ad.swapaxes(x, 0, 1) @ Tensor(A) @ x).sum()
    (g,) = ad.grad(f, [x])
    (hv,) = ad.grad((g * Tensor(v)).sum(), [x])
    np.testing.assert_allclose(hv.data, A @ v, atol=1e-12)


def test_create_graph_false_returns_constants(rng):
    x = ad.parameter(rng.normal(size=3))
    (g,) = ad.grad(ad.square(x).sum(), [x], create_graph=False)
    assert not g.requires_grad


def test_no_grad_builds_no_graph(rng):
    x = ad.parameter(rng.normal(size=3))
    with ad.no_grad():
        y = ad.exp(x) * 2
    assert not y.requires_grad and y._parents == ()


def test_grad_mode_is_thread_local():
    seen = {}

    def worker():
        seen["enabled"] = ad.is_grad_enabled()

    with ad.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not ad.is_grad_enabled()
    assert seen["enabled"]


def test_shape_ops_gradients(rng):
    x = ad.parameter(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 6)))

    def f():
        y = ad.transpose(x, (2, 0, 1)).reshape(4, 6) * w
        z1 = ad.concat([y[:, :2], y[:, 3:]], axis=1)
        z2 = ad.stack([y[0], y[2]], axis=1)
        return (ad.square(z1).sum() + (z2 * z2 * z2).sum() + x[1, :, 2].sum()
                + ad.square(x.mean(axis=(0, 2))).sum())

    check_fd(f, [x])


def test_broadcast_sum_to_gradients(rng):
    a = ad.parameter(rng.normal(size=(3, 1)))
    b = ad.parameter(rng.normal(size=(1, 4)))
    check_fd(lambda: ad.tanh(a * b + a).sum(), [a, b])
    m = ad.parameter(rng.normal(size=(2, 3, 4)))
    v = ad.parameter(rng.normal(size=(4, 2)))
    check_fd(lambda: ad.square(m @ v).sum(), [m, v])


def test_softmax_rows_sum_to_one_and_gradient(rng):
    x = ad.parameter(rng.normal(size=(3, 5)) * 10)
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), np.ones(3))
    w = Tensor(rng.normal(size=(3, 5)))
    check_fd(lambda: (ad.softmax(x) * w).sum(), [x])


def test_fd_helper_detects_wrong_gradient():
    analytic = [np.array([1.0])]
    with pytest.raises(AssertionError):
        assert_grads_close(analytic, [np.array([1.1])])
