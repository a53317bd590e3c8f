"""
Directional meta difference convolutions and their patchwise router.

Direction ``i`` (1..8) reads the difference between the kernel centre and a
neighbour ``b_i`` over the kernel taps ``R_i``:

    C_i(r) = x(r) * (S - S_i) + x(r - b_i) * S_i

with ``S`` the sum of all taps and ``S_i`` the sum over ``R_i``. Direction 0
is the plain central difference ``C_c(r) = x(r) * S``. Offsets are
(row, column) pairs matching the kernel layout of ``topotta.autodiff.ops``.

Because every ``C_i`` is again a 3x3 convolution, the router-weighted sum

    out = conv(x; w) - sum_i delta_{j,i} C_i(x)    (pixel in patch j)

is evaluated as one convolution per patch with the fused kernel
``w - K_j(w, delta_j)``.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from topotta.autodiff import ops
from topotta.autodiff.tensor import Function, Tensor
from topotta.errors import InvalidArgumentError, InvalidStateError

logger = logging.getLogger(__name__)

Offset = Tuple[int, int]


@dataclass(frozen=True)
class DirectionSpec:
    """Receptive field ``R_i`` and extension offset ``b_i`` of one direction."""

    index: int
    receptive: Tuple[Offset, ...]
    extension: Offset

    def tap_mask(self) -> np.ndarray:
        mask = np.zeros((3, 3))
        for dr, dc in self.receptive:
            mask[dr + 1, dc + 1] = 1.0
        return mask

    @property
    def extension_tap(self) -> Offset:
        return self.extension[0] + 1, self.extension[1] + 1


DIRECTIONS: Dict[int, DirectionSpec] = {
    1: DirectionSpec(1, ((-1, -1), (-1, 0), (0, -1)), (-1, -1)),
    2: DirectionSpec(2, ((0, -1), (-1, -1), (1, -1)), (0, -1)),
    3: DirectionSpec(3, ((1, -1), (0, -1), (1, 0)), (1, -1)),
    4: DirectionSpec(4, ((-1, 0), (-1, -1), (-1, 1)), (-1, 0)),
    5: DirectionSpec(5, ((1, 0), (1, 1), (1, -1)), (1, 0)),
    6: DirectionSpec(6, ((-1, 1), (-1, 0), (0, 1)), (-1, 1)),
    7: DirectionSpec(7, ((0, 1), (1, 1), (-1, 1)), (0, 1)),
    8: DirectionSpec(8, ((1, 1), (0, 1), (1, 0)), (1, 1)),
}

CENTRAL = 0
ALL_DIRECTIONS = tuple(range(1, 9))


def _check_direction(index: int):
    if index != CENTRAL and index not in DIRECTIONS:
        raise InvalidArgumentError(f"direction must be 0 (central) or 1..8, got {index}")


def directional_kernel(weight: np.ndarray, index: int) -> np.ndarray:
    """Equivalent 3x3 kernel of ``C_index`` for the vanilla kernel ``weight``."""
    _check_direction(index)
    total = weight.sum(axis=(2, 3))
    kernel = np.zeros_like(weight)
    if index == CENTRAL:
        kernel[:, :, 1, 1] = total
        return kernel
    spec = DIRECTIONS[index]
    partial = (weight * spec.tap_mask()).sum(axis=(2, 3))
    kernel[:, :, 1, 1] = total - partial
    kernel[:, :, spec.extension_tap[0], spec.extension_tap[1]] += partial
    return kernel


def directional_kernel_adjoint(grad: np.ndarray, index: int) -> np.ndarray:
    """Pull a kernel gradient back through ``directional_kernel``."""
    centre = grad[:, :, 1, 1][:, :, None, None]
    if index == CENTRAL:
        return np.broadcast_to(centre, grad.shape).copy()
    spec = DIRECTIONS[index]
    extension = grad[:, :, spec.extension_tap[0], spec.extension_tap[1]][:, :, None, None]
    return centre + (extension - centre) * spec.tap_mask()


class DirectionalKernel(Function):
    def forward(self, weight, index):
        self.index = index
        return directional_kernel(weight, index)

    def backward(self, grad):
        return (directional_kernel_adjoint(grad, self.index),)


def _zero_bias(weight) -> Tensor:
    return Tensor(np.zeros(weight.shape[0]))


def cdc_central(x, weight) -> Tensor:
    """Central difference term ``C_c``: a 1x1 convolution with the summed kernel."""
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    return ops.conv3x3(x, DirectionalKernel.apply(weight, index=CENTRAL), _zero_bias(weight))


def topomdc_direct(x, weight, index: int) -> Tensor:
    """Evaluate a single directional convolution ``C_index``."""
    _check_direction(index)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    return ops.conv3x3(x, DirectionalKernel.apply(weight, index=index), _zero_bias(weight))


def patch_edges(size: int, n: int) -> List[int]:
    """Split ``size`` into ``n`` runs; the last run absorbs the remainder."""
    step = size // n
    return [k * step for k in range(n)] + [size]


def grid_size(delta_layer_shape) -> int:
    n = math.isqrt(delta_layer_shape[0])
    if n * n != delta_layer_shape[0]:
        raise InvalidArgumentError(f"router rows {delta_layer_shape[0]} do not form an n x n grid")
    return n


class TopoMDCConv(Function):
    def forward(self, x, weight, bias, delta, directions):
        ops._check_conv_shapes(x, weight, bias, 3)
        if delta.ndim != 2 or delta.shape[1] != len(directions):
            raise InvalidArgumentError(
                f"router must have shape [n*n, {len(directions)}], got {delta.shape}"
            )
        n = grid_size(delta.shape)
        self.x_shape, self.weight, self.delta, self.directions = x.shape, weight, delta, directions
        batch, channels, height, width = x.shape
        self.cols = ops.im2col(x, 3)
        self.kernels = np.stack([directional_kernel(weight, i) for i in directions])
        self.rows, self.columns = patch_edges(height, n), patch_edges(width, n)

        out = np.empty((weight.shape[0], batch, height, width))
        self.fused = []
        for j, (r0, r1, c0, c1) in enumerate(self._patches(n)):
            fused = weight - np.tensordot(delta[j], self.kernels, axes=1)
            self.fused.append(fused)
            if r1 == r0 or c1 == c0:
                continue
            block = self.cols[:, :, :, r0:r1, c0:c1].reshape(channels * 9, -1)
            out[:, :, r0:r1, c0:c1] = (fused.reshape(weight.shape[0], -1) @ block).reshape(
                -1, batch, r1 - r0, c1 - c0
            )
        out += bias[:, None, None, None]
        return out.transpose(1, 0, 2, 3)

    def _patches(self, n):
        for pr in range(n):
            for pc in range(n):
                yield self.rows[pr], self.rows[pr + 1], self.columns[pc], self.columns[pc + 1]

    def backward(self, grad):
        batch, channels, height, width = self.x_shape
        out_channels = self.weight.shape[0]
        n = grid_size(self.delta.shape)
        g = grad.transpose(1, 0, 2, 3)
        d_cols = np.zeros_like(self.cols)
        d_weight = np.zeros_like(self.weight)
        d_delta = np.zeros_like(self.delta)
        for j, (r0, r1, c0, c1) in enumerate(self._patches(n)):
            if r1 == r0 or c1 == c0:
                continue
            g_block = g[:, :, r0:r1, c0:c1].reshape(out_channels, -1)
            block = self.cols[:, :, :, r0:r1, c0:c1].reshape(channels * 9, -1)
            d_fused = (g_block @ block.T).reshape(self.weight.shape)
            d_cols[:, :, :, r0:r1, c0:c1] = (
                self.fused[j].reshape(out_channels, -1).T @ g_block
            ).reshape(channels, 9, batch, r1 - r0, c1 - c0)
            d_weight += d_fused
            for k, index in enumerate(self.directions):
                # fused = w - sum_k delta_k K_k(w)
                d_delta[j, k] = -np.sum(d_fused * self.kernels[k])
                d_weight -= self.delta[j, k] * directional_kernel_adjoint(d_fused, index)
        d_bias = g.sum(axis=(1, 2, 3))
        return ops.col2im(d_cols, 3, self.x_shape), d_weight, d_bias, d_delta


def topomdc_fused(
    x,
    weight,
    delta_layer,
    bias=None,
    directions: Sequence[int] = ALL_DIRECTIONS,
) -> Tensor:
    """Router-weighted combination of the vanilla and directional convolutions.

    Args:
        x (Tensor): Input [N, Cin, H, W].
        weight (Tensor): Vanilla 3x3 kernel [Cout, Cin, 3, 3].
        delta_layer (Tensor): Router values [n*n, len(directions)]; row ``j``
            applies to output pixels of patch ``j`` in row-major patch order.
        bias (Tensor, optional): Bias [Cout]; zero when omitted.
        directions (Sequence[int]): Direction indices, 0 for the central difference.

    Returns:
        Tensor: Output [N, Cout, H, W].

    Raises:
        InvalidArgumentError: On shape mismatches or unknown directions.
    """
    for index in directions:
        _check_direction(index)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    bias = _zero_bias(weight) if bias is None else bias
    return TopoMDCConv.apply(x, weight, bias, delta_layer, directions=tuple(directions))


@dataclass
class RouterParams:
    """Router values of every wrapped encoder convolution.

    Attributes:
        delta (Tensor): Values of shape [L, n*n, len(directions)].
        n (int): Patch grid side.
        layers (List[str]): Wrapped convolution names; position is the layer id.
        directions (Tuple[int, ...]): Directions mixed by the router.
    """

    delta: Tensor
    n: int
    layers: List[str]
    directions: Tuple[int, ...] = ALL_DIRECTIONS
    _index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {name: i for i, name in enumerate(self.layers)}

    @classmethod
    def zeros(cls, layers: Sequence[str], n: int, directions: Sequence[int] = ALL_DIRECTIONS):
        if n < 1:
            raise InvalidArgumentError(f"grid size must be >= 1, got {n}")
        for index in directions:
            _check_direction(index)
        delta = Tensor(np.zeros((len(layers), n * n, len(directions))), requires_grad=True)
        return cls(delta=delta, n=n, layers=list(layers), directions=tuple(directions))

    @property
    def count(self) -> int:
        return self.delta.size

    def reset_to_zero(self):
        self.delta.data[...] = 0.0
        self.delta.grad = None

    def layer_delta(self, name: str) -> Tensor:
        return ops.select(self.delta, self._index[name])

    def __contains__(self, name):
        return name in self._index


def wrap_encoder(model, n: int, directions: Sequence[int] = ALL_DIRECTIONS):
    """Route every encoder 3x3 convolution through ``topomdc_fused``.

    The wrapped model shares its parameter tensors with ``model``; with the
    router at zero its output equals the unwrapped output.

    Args:
        model (SegModel): Unwrapped segmentation model.
        n (int): Patch grid side.
        directions (Sequence[int]): Directions mixed by the router.

    Returns:
        Tuple[SegModel, RouterParams]: The wrapped model and its router.

    Raises:
        InvalidStateError: If ``model`` is already wrapped.
    """
    if model.router is not None:
        raise InvalidStateError("model encoder is already wrapped")
    router = RouterParams.zeros(model.encoder_conv_names(), n, directions)
    logger.debug("wrapped %d encoder convolutions, %d router values", len(router.layers), router.count)
    return model.with_router(router), router


def attach_router(model, router: RouterParams):
    """Wrap ``model`` with an existing router so two models share one set of values."""
    if model.router is not None:
        raise InvalidStateError("model encoder is already wrapped")
    if list(router.layers) != model.encoder_conv_names():
        raise InvalidStateError("router layers do not match the model encoder")
    return model.with_router(router)


def unwrap(model):
    """Return the vanilla model that shares ``model``'s parameters."""
    if model.router is None:
        raise InvalidStateError("model encoder is not wrapped")
    return model.with_router(None)
