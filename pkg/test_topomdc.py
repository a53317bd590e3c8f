"""
Tests for the directional difference convolutions and the encoder router.
"""
import numpy as np
import pytest

from topotta.autodiff import ops
from topotta.autodiff.gradcheck import grad_check
from topotta.autodiff.tensor import Tensor, backward, no_grad
from topotta.errors import InvalidArgumentError, InvalidStateError
from topotta.model.segnet import DEEP_SHAPE, ModelMeta, SegModel
from topotta.model.topomdc import (
    ALL_DIRECTIONS,
    CENTRAL,
    DIRECTIONS,
    RouterParams,
    attach_router,
    cdc_central,
    patch_edges,
    topomdc_direct,
    topomdc_fused,
    unwrap,
    wrap_encoder,
)

from conftest import SMALL_SIZE


def shift(x, offset):
    """x(r - offset) with zero fill, for [N, C, H, W] arrays."""
    dr, dc = offset
    h, w = x.shape[-2:]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return padded[:, :, 1 - dr:1 - dr + h, 1 - dc:1 - dc + w]


def literal_directional(x, weight, index):
    """C_i(r) = x(r) (S - S_i) + x(r - b_i) S_i, summed over input channels."""
    spec = DIRECTIONS[index]
    out = np.zeros((x.shape[0], weight.shape[0]) + x.shape[2:])
    for o in range(weight.shape[0]):
        for c in range(weight.shape[1]):
            total = weight[o, c].sum()
            partial = sum(weight[o, c, dr + 1, dc + 1] for dr, dc in spec.receptive)
            out[:, o] += x[:, c] * (total - partial) + shift(x, spec.extension)[:, c] * partial
    return out


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_direction_table_is_complete():
    assert sorted(DIRECTIONS) == list(ALL_DIRECTIONS)
    for spec in DIRECTIONS.values():
        assert len(spec.receptive) == 3
        assert spec.extension in spec.receptive


def test_directional_matches_literal_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=(1, 2, 5, 6))
        weight = rng.normal(size=(3, 2, 3, 3))
        for index in ALL_DIRECTIONS:
            out = topomdc_direct(Tensor(x), Tensor(weight), index).data
            assert relative_error(out, literal_directional(x, weight, index)) < 1e-12


def test_hot_pixel_direction_one():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    out = topomdc_direct(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), 1).data[0, 0]
    assert out[3, 3] == 6.0
    assert out[2, 2] == 3.0
    assert out[4, 4] == 0.0


def test_central_difference_scales_by_kernel_sum(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    weight = rng.normal(size=(1, 2, 3, 3))
    expected = np.einsum("c,nchw->nhw", weight[0].sum(axis=(1, 2)), x)[:, None]
    assert np.allclose(cdc_central(Tensor(x), Tensor(weight)).data, expected, rtol=0, atol=1e-12)


def test_zero_router_equals_plain_convolution(rng):
    x = rng.normal(size=(2, 2, 8, 8))
    weight, bias = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    fused = topomdc_fused(Tensor(x), Tensor(weight), Tensor(np.zeros((4, 8))), Tensor(bias))
    plain = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(bias))
    assert np.allclose(fused.data, plain.data, rtol=0, atol=1e-12)


def test_single_patch_unit_router_is_conv_minus_first_direction(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    weight = rng.normal(size=(2, 2, 3, 3))
    delta = np.zeros((1, 8))
    delta[0, 0] = 1.0
    fused = topomdc_fused(Tensor(x), Tensor(weight), Tensor(delta)).data
    expected = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(2))).data
    expected = expected - topomdc_direct(Tensor(x), Tensor(weight), 1).data
    assert relative_error(fused, expected) < 1e-10


def test_fused_matches_direct_evaluation():
    rng = np.random.default_rng(1)
    for trial in range(50):
        n = 1 + trial % 3
        size = 7 if trial % 2 else 6
        x = rng.normal(size=(1, 2, size, size))
        weight = rng.normal(size=(2, 2, 3, 3))
        delta = rng.normal(size=(n * n, 8))
        fused = topomdc_fused(Tensor(x), Tensor(weight), Tensor(delta)).data

        plain = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(2))).data
        directional = np.stack([topomdc_direct(Tensor(x), Tensor(weight), i).data for i in ALL_DIRECTIONS])
        rows, cols = patch_edges(size, n), patch_edges(size, n)
        expected = np.empty_like(plain)
        for pr in range(n):
            for pc in range(n):
                j = pr * n + pc
                window = (slice(None), slice(None), slice(rows[pr], rows[pr + 1]), slice(cols[pc], cols[pc + 1]))
                mixed = plain - np.tensordot(delta[j], directional, axes=1)
                expected[window] = mixed[window]
        assert relative_error(fused, expected) < 1e-10


def test_router_is_affine(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    weight = Tensor(rng.normal(size=(2, 2, 3, 3)))
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))

    def f(delta):
        return topomdc_fused(x, weight, Tensor(delta)).data

    assert np.allclose(f(a) + f(b) - f(np.zeros((4, 8))), f(a + b), rtol=0, atol=1e-10)


def test_patch_edges_give_remainder_to_last_patch():
    assert patch_edges(8, 4) == [0, 2, 4, 6, 8]
    assert patch_edges(7, 2) == [0, 3, 7]


class TestGradients:
    def test_router_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 6, 6))
        weight = rng.normal(size=(2, 2, 3, 3))
        readout = rng.normal(size=(1, 2, 6, 6))
        for _ in range(10):
            point = rng.normal(size=(4, 8)) * 0.1
            assert grad_check(lambda d: (topomdc_fused(x, weight, d) * readout).sum(), point) < 1e-4

    def test_input_and_weight_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(1, 2, 5, 5))
        w0 = rng.normal(size=(2, 2, 3, 3))
        delta = rng.normal(size=(4, 8))
        readout = rng.normal(size=(1, 2, 5, 5))
        assert grad_check(lambda x: (topomdc_fused(x, w0, delta) * readout).sum(), x0) < 1e-4
        assert grad_check(lambda w: (topomdc_fused(x0, w, delta) * readout).sum(), w0) < 1e-4

    def test_weight_gradient_matches_direct_path(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w0 = rng.normal(size=(2, 2, 3, 3))
        delta = rng.normal(size=(1, 8))
        readout = rng.normal(size=(1, 2, 6, 6))

        w_fused = Tensor(w0.copy(), requires_grad=True)
        backward((topomdc_fused(x, w_fused, delta) * readout).sum())

        w_direct = Tensor(w0.copy(), requires_grad=True)
        out = ops.conv3x3(x, w_direct, np.zeros(2))
        for k, index in enumerate(ALL_DIRECTIONS):
            out = out - float(delta[0, k]) * topomdc_direct(x, w_direct, index)
        backward((out * readout).sum())

        assert np.allclose(w_fused.grad, w_direct.grad, rtol=1e-10, atol=1e-10)

    def test_router_gradient_through_wrapped_encoder(self, small_model):
        model, router = wrap_encoder(small_model.copy(requires_grad=False), n=2)
        image = np.random.default_rng(4).uniform(size=(1, 1, 8, 8))
        base = router.delta.data.copy()

        def f(d):
            router.delta = d
            try:
                return model(image).sum()
            finally:
                router.delta = Tensor(base)

        point = base.copy()
        point[0] = np.random.default_rng(5).normal(size=point[0].shape) * 0.05
        assert grad_check(f, point) < 1e-4


class TestShapes:
    def test_router_shape_mismatch(self, rng):
        x, weight = Tensor(rng.normal(size=(1, 1, 4, 4))), Tensor(rng.normal(size=(1, 1, 3, 3)))
        with pytest.raises(InvalidArgumentError):
            topomdc_fused(x, weight, Tensor(np.zeros((4, 7))))
        with pytest.raises(InvalidArgumentError):
            topomdc_fused(x, weight, Tensor(np.zeros((3, 8))))

    def test_unknown_direction(self, rng):
        with pytest.raises(InvalidArgumentError):
            topomdc_direct(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), 9)

    def test_central_direction_in_router(self, rng):
        x, weight = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 3, 3))
        out = topomdc_fused(Tensor(x), Tensor(weight), Tensor(np.ones((1, 1))), directions=(CENTRAL,)).data
        expected = ops.conv3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(1))).data - cdc_central(x, weight).data
        assert relative_error(out, expected) < 1e-10


class TestWrapping:
    def test_default_router_count(self):
        model = SegModel.create(ModelMeta())
        _, router = wrap_encoder(model, n=4)
        assert len(router.layers) == 6
        assert router.count == 768

    def test_deep_shape_router_count(self):
        _, router = wrap_encoder(SegModel.create(DEEP_SHAPE), n=4)
        assert router.count == 1280

    def test_zero_router_keeps_predictions(self, small_model):
        wrapped, _ = wrap_encoder(small_model, n=4)
        rng = np.random.default_rng(6)
        with no_grad():
            for _ in range(10):
                image = rng.uniform(size=(1, 1, SMALL_SIZE, SMALL_SIZE))
                assert np.allclose(wrapped(image).data, small_model(image).data, rtol=0, atol=1e-12)

    def test_wrapped_model_shares_parameters(self, small_model):
        wrapped, _ = wrap_encoder(small_model, n=2)
        assert wrapped.params["enc0.conv1.weight"] is small_model.params["enc0.conv1.weight"]
        assert unwrap(wrapped).router is None

    def test_double_wrap_rejected(self, small_model):
        wrapped, router = wrap_encoder(small_model, n=2)
        with pytest.raises(InvalidStateError):
            wrap_encoder(wrapped, n=2)
        with pytest.raises(InvalidStateError):
            attach_router(wrapped, router)

    def test_attach_router_shares_values(self, small_model):
        student, router = wrap_encoder(small_model, n=2)
        teacher = attach_router(small_model.copy(), router)
        router.delta.data[...] = 0.1
        image = np.random.default_rng(7).uniform(size=(1, 1, SMALL_SIZE, SMALL_SIZE))
        with no_grad():
            assert np.allclose(student(image).data, teacher(image).data, rtol=0, atol=1e-12)

    def test_reset_to_zero(self):
        router = RouterParams.zeros(["a", "b"], n=2)
        router.delta.data[...] = 3.0
        router.delta.grad = np.ones_like(router.delta.data)
        router.reset_to_zero()
        assert not router.delta.data.any()
        assert router.delta.grad is None

    def test_router_grid_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            RouterParams.zeros(["a"], n=0)
