"""
Tests for the tensor, the differentiable primitives and the Adam optimiser.
"""
import numpy as np
import pytest

from topotta.autodiff import ops
from topotta.autodiff.gradcheck import grad_check
from topotta.autodiff.optim import Adam, Moments, adam_step
from topotta.autodiff.tensor import Tensor, backward, no_grad
from topotta.errors import (
    AdaptationDivergedError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalError,
)

GRAD_TOL = 1e-4


def conv_reference(x, weight, bias):
    """out(r) = sum_d w(d) x(r - d) + b, by explicit shifts of the padded input."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, weight.shape[0], h, w))
    for a in range(3):
        for b in range(3):
            dr, dc = a - 1, b - 1
            shifted = padded[:, :, 1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
            out += np.einsum("oc,nchw->nohw", weight[:, :, a, b], shifted)
    return out + bias[None, :, None, None]


def projected(op, shape, seed=0):
    """Scalar test function sum(op(x) * R) with a fixed random R."""
    weights = {}

    def f(x):
        out = op(x)
        if "R" not in weights:
            weights["R"] = np.random.default_rng(seed).normal(size=out.shape)
        return (out * weights["R"]).sum()

    return f


def random_points(shape, count=10, low=None, high=None):
    rng = np.random.default_rng(42)
    for _ in range(count):
        if low is None:
            yield rng.normal(size=shape)
        else:
            yield rng.uniform(low, high, size=shape)


class TestForward:
    def test_conv_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6))
        weight = np.zeros((1, 1, 3, 3))
        weight[0, 0, 1, 1] = 1.0
        out = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_conv_all_ones_kernel_on_constant_input(self):
        x = np.ones((1, 2, 6, 6))
        out = ops.conv3x3(Tensor(x), Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros(1)))
        assert np.allclose(out.data[0, 0, 1:-1, 1:-1], 18.0)
        assert out.data[0, 0, 0, 0] == pytest.approx(8.0)

    def test_conv_matches_shifted_sum(self, rng):
        x = rng.normal(size=(2, 3, 7, 5))
        weight = rng.normal(size=(4, 3, 3, 3))
        bias = rng.normal(size=4)
        out = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(bias))
        assert np.allclose(out.data, conv_reference(x, weight, bias), rtol=0, atol=1e-12)

    def test_conv_offset_direction(self):
        # a kernel tap at offset (0, 1) reads the left neighbour
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 0] = 1.0
        weight = np.zeros((1, 1, 3, 3))
        weight[0, 0, 1, 2] = 1.0
        out = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(1)))
        assert out.data[0, 0, 1, 1] == 1.0

    def test_conv_rejects_channel_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            ops.conv3x3(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_relu_and_sigmoid_values(self):
        assert np.all(ops.relu(Tensor(-np.arange(1.0, 5.0))).data == 0)
        out = ops.sigmoid(Tensor(np.zeros(3))).data
        assert np.allclose(out, 0.5)

    def test_maxpool_block_maxima(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = ops.maxpool2x2(Tensor(x)).data[0, 0]
        assert np.array_equal(out, [[5.0, 7.0], [13.0, 15.0]])

    def test_maxpool_rejects_odd_size(self):
        with pytest.raises(InvalidArgumentError):
            ops.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_batchnorm_checks(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            ops.batchnorm_inference(x, ones, zeros, np.zeros(2), np.ones(2), eps=0.0)
        with pytest.raises(InvalidStateError):
            ops.batchnorm_inference(x, ones, zeros, np.zeros(2), np.array([1.0, np.inf]))

    def test_bilinear_resize_keeps_constants(self):
        out = ops.resize_bilinear(Tensor(np.full((1, 1, 6, 4), 0.3)), 9, 5)
        assert np.allclose(out.data, 0.3)

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            ops.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2)))])

    def test_ndarray_on_the_left_yields_tensor(self):
        out = np.full(3, 2.0) * Tensor(np.ones(3), requires_grad=True)
        assert isinstance(out, Tensor)
        assert out.requires_grad

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert (x * 2.0).sum().requires_grad


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gradient_is_identity(self, rng):
        values = rng.normal(size=5)
        x = Tensor(values, requires_grad=True)
        backward((x * x).sum() * 0.5)
        assert np.allclose(x.grad, values, rtol=0, atol=1e-15)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        backward((y + y).sum())
        assert x.grad[0] == pytest.approx(12.0)

    def test_repeated_backward_is_bitwise_identical(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        weight = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        loss = ops.sigmoid(ops.conv3x3(x, weight, Tensor(np.zeros(3)))).sum()
        backward(loss)
        first = weight.grad.copy(), x.grad.copy()
        backward(loss)
        assert np.array_equal(weight.grad, first[0])
        assert np.array_equal(x.grad, first[1])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(InvalidArgumentError):
            backward(Tensor(np.ones(3), requires_grad=True) * 1.0)

    def test_non_finite_forward_raises(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NumericalError):
                ops.log(Tensor(np.array([0.0, 1.0])))


class TestGradCheck:
    def test_rejects_non_positive_step(self):
        with pytest.raises(InvalidArgumentError):
            grad_check(lambda x: x.sum(), np.ones(2), h=0.0)

    def test_quadratic(self):
        assert grad_check(lambda x: (x * x).sum() * 0.5, np.array([1.0, -2.0, 0.5])) < 1e-8

    @pytest.mark.parametrize(
        "name, op, shape, bounds",
        [
            ("relu", ops.relu, (1, 2, 4, 4), None),
            ("sigmoid", ops.sigmoid, (1, 2, 4, 4), None),
            ("log", ops.log, (3, 4), (0.5, 2.0)),
            ("clamp", lambda x: ops.clamp(x, -0.5, 0.5), (3, 4), None),
            ("maxpool", ops.maxpool2x2, (1, 2, 4, 4), None),
            ("upsample", ops.upsample_bilinear, (1, 1, 3, 4), None),
            ("resize", lambda x: ops.resize_bilinear(x, 7, 3), (1, 1, 4, 5), None),
            ("flip_h", ops.flip_h, (1, 1, 3, 4), None),
            ("flip_v", ops.flip_v, (1, 1, 3, 4), None),
            ("crop", lambda x: ops.crop(x, 2, 3), (1, 1, 4, 5), None),
            ("select", lambda x: ops.select(x, 1), (3, 2, 2), None),
            ("div", lambda x: ops.div(x, x * x + 1.0), (5,), None),
            ("mean", lambda x: ops.mean(x * x), (4, 3), None),
        ],
    )
    def test_unary_primitives(self, name, op, shape, bounds):
        low, high = bounds if bounds else (None, None)
        for point in random_points(shape, low=low, high=high):
            assert grad_check(projected(op, shape), point) < GRAD_TOL, name

    def test_conv3x3_all_arguments(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(2, 2, 5, 4))
        w0 = rng.normal(size=(3, 2, 3, 3))
        b0 = rng.normal(size=3)
        for point in random_points(x0.shape):
            assert grad_check(projected(lambda x: ops.conv3x3(x, w0, b0), x0.shape), point) < GRAD_TOL
        for point in random_points(w0.shape):
            assert grad_check(projected(lambda w: ops.conv3x3(x0, w, b0), w0.shape), point) < GRAD_TOL
        for point in random_points(b0.shape):
            assert grad_check(projected(lambda b: ops.conv3x3(x0, w0, b), b0.shape), point) < GRAD_TOL

    def test_conv1x1(self):
        x0 = np.random.default_rng(6).normal(size=(1, 3, 4, 4))
        bias = np.zeros(2)
        for point in random_points((2, 3, 1, 1)):
            assert grad_check(projected(lambda w: ops.conv1x1(x0, w, bias), (2, 3, 1, 1)), point) < GRAD_TOL

    def test_batchnorm_input_and_affine(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 3, 3, 3))
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        for point in random_points(x0.shape):
            f = projected(lambda x: ops.batchnorm_inference(x, gamma, beta, mean, var), x0.shape)
            assert grad_check(f, point) < GRAD_TOL
        for point in random_points((3,)):
            f = projected(lambda g: ops.batchnorm_inference(x0, g, beta, mean, var), (3,))
            assert grad_check(f, point) < GRAD_TOL
            f = projected(lambda b: ops.batchnorm_inference(x0, gamma, b, mean, var), (3,))
            assert grad_check(f, point) < GRAD_TOL

    def test_concat(self):
        other = np.random.default_rng(8).normal(size=(1, 2, 3, 3))
        for point in random_points((1, 1, 3, 3)):
            f = projected(lambda x: ops.concat_channels([x, other]), (1, 1, 3, 3))
            assert grad_check(f, point) < GRAD_TOL

    def test_conv_bn_relu_chain(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(1, 2, 6, 6))
        gamma, beta = np.ones(3), np.zeros(3)

        def f(w):
            h = ops.conv3x3(x0, w, np.zeros(3))
            h = ops.relu(ops.batchnorm_inference(h, gamma, beta, np.zeros(3), np.ones(3)))
            return ops.sigmoid(ops.maxpool2x2(h)).sum()

        assert grad_check(f, rng.normal(size=(3, 2, 3, 3))) < GRAD_TOL


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        param = np.array([1.5, -2.0])
        out = adam_step(param, np.zeros(2), Moments.zeros_like(param), lr=0.1, t=1)
        assert np.array_equal(out, param)

    def test_first_step_is_learning_rate(self):
        out = adam_step(np.array([0.0]), np.array([1.0]), Moments.zeros_like(np.zeros(1)), lr=0.01, t=1)
        assert out[0] == pytest.approx(-0.01 / (1.0 + 1e-8), abs=1e-15)

    def test_three_steps_on_square_match_hand_trace(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        trace = []
        for t in (1, 2, 3):
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            trace.append(x)

        param, moments = np.array([1.0]), Moments.zeros_like(np.zeros(1))
        for t, expected in zip((1, 2, 3), trace):
            param = adam_step(param, 2.0 * param, moments, lr, t, b1, b2, eps)
            assert param[0] == pytest.approx(expected, abs=1e-12)

    def test_rejects_bad_step_counter_and_shapes(self):
        moments = Moments.zeros_like(np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            adam_step(np.zeros(2), np.zeros(2), moments, 0.1, t=0)
        with pytest.raises(InvalidArgumentError):
            adam_step(np.zeros(2), np.zeros(3), moments, 0.1, t=1)

    def test_non_finite_gradient_diverges(self):
        with pytest.raises(AdaptationDivergedError):
            adam_step(np.zeros(2), np.array([np.nan, 0.0]), Moments.zeros_like(np.zeros(2)), 0.1, t=1)

    def test_optimizer_skips_tensors_without_gradient(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        optimizer = Adam([a, b], lr=0.1)
        backward((a * a).sum())
        optimizer.step()
        assert np.all(a.data < 1.0)
        assert np.array_equal(b.data, np.ones(2))
