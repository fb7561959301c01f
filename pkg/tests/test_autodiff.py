import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdl_lambda import autodiff as ad
from helpers import away_from, gradcheck

TOL = 1e-4


# -- per-op gradients --------------------------------------------------------------


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("add", ad.add, [(3, 4), (3, 4)]),
        ("add_broadcast", ad.add, [(2, 3, 4), (3, 1)]),
        ("sub", ad.sub, [(3, 4), (4,)]),
        ("mul", ad.mul, [(3, 4), (3, 4)]),
        ("mul_scalar_tensor", ad.mul, [(), (2, 5)]),
        ("neg", ad.neg, [(5,)]),
        ("sum_all", lambda a: ad.sum(a), [(3, 4)]),
        ("sum_axis", lambda a: ad.sum(a, axis=1), [(3, 4, 2)]),
        ("mean", ad.mean, [(3, 4)]),
        ("softplus", ad.softplus, [(4, 5)]),
        ("avg_pool2", ad.avg_pool2, [(2, 3, 4, 6)]),
        ("upsample2", ad.upsample2, [(2, 3, 2, 3)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3, 4), (2, 1, 4)]),
        ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
        ("permute", lambda a: ad.permute(a, (2, 0, 1)), [(2, 3, 4)]),
        ("operator_methods", lambda a, b: (a * b - b) / (a * a + 2.0) + (-a), [(3, 3), (3, 3)]),
    ],
)
def test_smooth_op_gradients(name, fn, shapes, rng):
    arrays_ = [rng.standard_normal(s) for s in shapes]
    assert gradcheck(fn, arrays_, rng) < TOL, name


def test_div_gradient(rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
    assert gradcheck(ad.div, [a, b], rng) < TOL


@pytest.mark.parametrize("slope", [0.0, 0.01, 0.2])
def test_leaky_relu_gradient(slope, rng):
    x = away_from(rng.standard_normal((4, 5)), [0.0])
    assert gradcheck(lambda a: ad.leaky_relu(a, slope), [x], rng) < TOL


def test_relu_matches_zero_slope():
    x = np.array([-2.0, -0.1, 0.0, 0.3, 4.0])
    np.testing.assert_array_equal(ad.relu(x).data, [0, 0, 0, 0.3, 4.0])


@pytest.mark.parametrize("tau_shape", [(), (3, 1, 1), (3, 4, 5)])
def test_soft_threshold_gradient(tau_shape, rng):
    x = rng.standard_normal((3, 4, 5))
    tau = rng.uniform(0.1, 0.6, tau_shape)
    # resample entries that land within 1e-3 of the kink |x| = tau
    tb = np.broadcast_to(tau, x.shape)
    bad = np.abs(np.abs(x) - tb) < 1e-3
    x[bad] = tb[bad] + 0.05
    assert gradcheck(ad.soft_threshold, [x, tau], rng) < TOL


@pytest.mark.parametrize("padding", ["zero", "circular"])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_gradient(padding, k, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    err = gradcheck(lambda x, w, b: ad.conv2d(x, w, b, padding=padding), [x, w, b], rng, n_probe=25)
    assert err < TOL


def test_conv2d_chw_gradient(rng):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((1, 2, 3, 3))
    assert gradcheck(lambda x, w: ad.conv2d(x, w, padding="circular"), [x, w], rng) < TOL


def test_linear_map_gradient(rng):
    M = rng.standard_normal((5, 7))
    x = rng.standard_normal(7)
    assert gradcheck(lambda t: ad.linear_map(t, lambda v: M @ v, lambda g: M.T @ g), [x], rng) < TOL


def test_gradients_accumulate_over_reuse(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.Tape():
        loss = ad.sum(ad.add(ad.mul(x, x), x))
        ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-14)


# -- forward values ----------------------------------------------------------------


def test_softplus_reference_values():
    out = ad.softplus(np.array([0.0, 100.0, -5.0])).data
    assert out[0] == pytest.approx(math.log(2.0), rel=1e-15)
    assert out[1] == 100.0
    # log(1 + e^-5), 30-digit reference
    assert out[2] == pytest.approx(0.00671534848911806861641668773256, rel=1e-14)


def test_softplus_large_input_is_identity_and_finite():
    x = np.array([29.9, 30.1, 1e3, 1e300])
    out = ad.softplus(x).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out[1:], x[1:])
    assert out[0] == pytest.approx(math.log1p(math.exp(29.9)), rel=1e-15)


def _conv_dense(w2d, h, wd, circular):
    """Matrix of ``x -> w * x`` built entry by entry from the convolution sum."""
    k = w2d.shape[0]
    r = k // 2
    M = np.zeros((h * wd, h * wd))
    for y in range(h):
        for x in range(wd):
            for i in range(k):
                for j in range(k):
                    sy, sx = y - i + r, x - j + r
                    if circular:
                        sy, sx = sy % h, sx % wd
                    elif not (0 <= sy < h and 0 <= sx < wd):
                        continue
                    M[y * wd + x, sy * wd + sx] += w2d[i, j]
    return M


@pytest.mark.parametrize("padding", ["zero", "circular"])
def test_conv2d_matches_dense_matrix(padding, rng):
    h, wd = 6, 5
    w = rng.standard_normal((1, 1, 3, 3))
    x = rng.standard_normal((h, wd))
    M = _conv_dense(w[0, 0], h, wd, padding == "circular")
    out = ad.conv2d(x[None, None], w, padding=padding).data[0, 0]
    np.testing.assert_allclose(out.ravel(), M @ x.ravel(), atol=1e-13)


def test_conv2d_impulse_kernel_is_identity(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, w).data, x)


def test_conv2d_shape_errors_name_the_axis(rng):
    with pytest.raises(ad.ShapeError, match="channel axis"):
        ad.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match="odd"):
        ad.conv2d(rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 2, 2)))
    with pytest.raises(ad.ShapeError, match="bias"):
        ad.conv2d(rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ad.ShapeError, match="height"):
        ad.avg_pool2(rng.standard_normal((1, 3, 4)))
    with pytest.raises(ValueError):
        ad.conv2d(rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3)), padding="reflect")


@given(
    arrays(np.float64, (2, 6, 6), elements=st.floats(-10, 10)),
    arrays(np.float64, (2, 6, 6), elements=st.floats(-10, 10)),
    st.floats(-3, 3),
)
def test_conv2d_is_linear_in_input(x1, x2, a):
    w = np.random.default_rng(0).standard_normal((3, 2, 3, 3))
    lhs = ad.conv2d(a * x1 + x2, w, padding="circular").data
    rhs = a * ad.conv2d(x1, w, padding="circular").data + ad.conv2d(x2, w, padding="circular").data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@given(
    arrays(np.float64, 20, elements=st.floats(-50, 50)),
    arrays(np.float64, 20, elements=st.floats(-50, 50)),
    st.floats(0, 10),
)
def test_soft_threshold_shrinks_and_is_nonexpansive(x, y, tau):
    sx = ad.soft_threshold(x, tau).data
    sy = ad.soft_threshold(y, tau).data
    assert np.all(np.abs(sx) <= np.abs(x))
    assert np.all(sx * x >= 0)
    assert np.all(np.abs(sx - sy) <= np.abs(x - y) + 1e-12)


def test_soft_threshold_kink_uses_zero_subgradient():
    x = ad.Tensor(np.array([1.0, -1.0, 0.0]), requires_grad=True)
    tau = ad.Tensor(np.array([1.0, 1.0, 0.0]), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.sum(ad.soft_threshold(x, tau)))
    np.testing.assert_array_equal(x.grad, 0.0)
    np.testing.assert_array_equal(tau.grad, 0.0)


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ValueError):
        ad.soft_threshold(np.ones(3), -0.1)


# -- tape semantics ------------------------------------------------------------------


def test_backward_rejects_non_scalar_loss():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.mul(x, 2.0)
        with pytest.raises(ValueError):
            ad.backward(y)


def test_backward_rejects_value_not_on_tape():
    with pytest.raises(RuntimeError):
        ad.backward(ad.Tensor(1.0))


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            y = ad.sum(ad.mul(x, x))
        assert len(tape) == 0
        assert not y.requires_grad
        assert ad.grad_enabled()


def test_constants_are_not_recorded():
    with ad.Tape() as tape:
        ad.add(ad.Tensor(np.ones(2)), 1.0)
        assert len(tape) == 0


def test_zero_dim_tensor_stays_scalar():
    t = ad.Tensor(2.5)
    assert t.shape == ()
    assert t.item() == 2.5
