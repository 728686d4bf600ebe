import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segpref import autodiff as ad
from segpref.autodiff import Tape, Tensor, backward, finite_difference_check


def leaf(shape, rng, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_add_zero_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(ad.add(x, np.zeros_like(x.data)).data, x.data)


def test_conv_zero_kernel_annihilates():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out = ad.conv2d(x, np.zeros((5, 1, 3, 3)), np.zeros(5))
    assert out.shape == (1, 5, 4, 4)
    assert not out.data.any()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride in (1, 2):
        out = ad.conv2d(x, w, b, stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (6 - 1) // stride + 1, (5 - 1) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                ref[:, :, i, j] = np.einsum("ncab,ocab->no", patch, w) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "op, call",
    [
        ("conv2d", lambda: ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)))),
        ("conv2d", lambda: ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((3, 1, 3, 3)), stride=3)),
        ("linear", lambda: ad.linear(np.ones((2, 3)), np.ones((4, 5)))),
        ("add", lambda: ad.add(np.ones((2, 3)), np.ones((4, 3)))),
        ("mul", lambda: ad.mul(np.ones((2, 3)), np.ones((2, 4)))),
        ("matmul", lambda: ad.matmul(np.ones((2, 3)), np.ones((2, 3)))),
        ("upsample", lambda: ad.upsample2x(np.ones((2, 3)))),
    ],
)
def test_shape_errors_name_operator(op, call):
    with pytest.raises(ad.ShapeError, match=op):
        call()


def test_sum_gradient_is_ones():
    x = leaf((2, 3, 4), np.random.default_rng(0))
    with Tape() as tape:
        loss = ad.sum_(x)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_half_mean_square_gradient():
    x = Tensor(np.ones(8), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(x * x) * 0.5
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, np.full(8, 1 / 8), rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        backward(tape, y)
    with Tape() as other:
        z = ad.sum_(x)
    with pytest.raises(ValueError):
        backward(tape, z)
    with pytest.raises(ValueError):
        backward(other, Tensor(1.0))


def test_fan_out_accumulates():
    rng = np.random.default_rng(1)
    data = rng.normal(size=5)
    a = Tensor(data.copy(), requires_grad=True)
    b = Tensor(data.copy(), requires_grad=True)
    w = rng.normal(size=5)
    with Tape() as t1:
        l1 = ad.sum_((a + a) * w)
    with Tape() as t2:
        l2 = ad.sum_((b * 2.0) * w)
    backward(t1, l1)
    backward(t2, l2)
    np.testing.assert_array_equal(a.grad, b.grad)


def test_backward_visits_nodes_once_and_accumulates_across_calls():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x * x)
    backward(tape, loss)
    backward(tape, loss)
    assert x.grad[0] == pytest.approx(8.0)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.sum_(x * 3.0)
    with Tape() as tape:
        pass
    assert len(tape) == 0
    assert y.item() == 9.0


def test_clamp_gradient_zero_outside():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.clamp(x, 0.0, 1.0))
    backward(tape, loss)
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_log_rejects_non_positive():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_upsample_then_mean_gradient():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.upsample2x(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 1, 8, 8)))
        w1 = leaf((4, 1, 3, 3), rng)
        w2 = leaf((1, 4, 3, 3), rng)
        with Tape() as tape:
            h = ad.gelu(ad.conv2d(x, w1, stride=2))
            loss = ad.mean(ad.sigmoid(ad.conv2d(ad.upsample2x(h), w2)))
        backward(tape, loss)
        return loss.data.tobytes(), w1.grad.tobytes(), w2.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic():
    x = Tensor(np.array([3.0]), requires_grad=True)
    rep = finite_difference_check(lambda: ad.sum_(x * x), {"x": x}, step=1e-5, tolerance=1e-6)
    assert rep.passed
    assert x.grad[0] == 6.0


def test_fd_constant_function():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    rep = finite_difference_check(lambda: Tensor(4.0), {"x": x})
    assert rep.passed
    assert rep.blocks[0].max_abs_error <= 1e-8


def test_fd_reports_non_finite_as_failure():
    x = Tensor(np.array([1e-6]), requires_grad=True)
    rep = finite_difference_check(lambda: ad.sum_(ad.log(x)), {"x": x}, step=1e-5)
    assert not rep.passed
    assert rep.blocks[0].failures


def test_fd_flags_wrong_gradient():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)

    def f():
        # a deliberately wrong backward rule
        out = ad._emit("bad", np.sum(x.data**2), (x,), lambda g: (g * x.data,))
        return out

    assert not finite_difference_check(f, {"x": x}).passed


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_conv_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 1, 8, 8))
    params = {
        "w1": leaf((3, 1, 3, 3), rng, 0.5),
        "b1": leaf((3,), rng, 0.1),
        "w2": leaf((2, 3, 3, 3), rng, 0.5),
        "b2": leaf((2,), rng, 0.1),
        "lin": leaf((4, 2), rng, 0.5),
    }

    def f():
        h = ad.gelu(ad.conv2d(x, params["w1"], params["b1"], stride=2))
        h = ad.conv2d(ad.upsample2x(h), params["w2"], params["b2"])
        v = ad.mean(h, axis=(2, 3))
        z = ad.linear(v, params["lin"])
        p = ad.clamp(ad.sigmoid(z), 1e-6, 1 - 1e-6)
        return ad.mean(ad.log(p)) + ad.sum_(ad.softplus(z) * ad.pow_(p, 2.0)) * 0.1

    rep = finite_difference_check(f, params, step=1e-5, tolerance=1e-4)
    assert rep.passed, rep.summary()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0.5, 3.0))
def test_elementwise_gradients_property(values, power):
    x = Tensor(np.abs(np.array(values)) + 0.1, requires_grad=True)

    def f():
        return ad.sum_(ad.pow_(x, power) * ad.sigmoid(x) + ad.gelu(-x) + ad.log(x))

    assert finite_difference_check(f, {"x": x}).passed
