"""
Differentiable primitives used by the segmentation network and both
adaptation stages.

3x3 kernels are indexed by offset: ``weight[o, c, a, b]`` holds
``w(o, c, (a - 1, b - 1))`` and a convolution computes
``out(r) = sum_{c, d} w(o, c, d) * x(c, r - d) + bias(o)`` with zero padding.
The first spatial offset component runs along rows, the second along columns.
"""
import functools
from typing import Sequence

import numpy as np
from scipy.special import expit

from topotta.autodiff.tensor import Function, Tensor, _unbroadcast
from topotta.errors import InvalidArgumentError, InvalidStateError


# elementwise arithmetic

class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.y, self.x.shape),
            _unbroadcast(grad * self.x, self.y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (
            _unbroadcast(grad / self.y, self.x.shape),
            _unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape),
        )


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean())

    def backward(self, grad):
        return (np.broadcast_to(grad / np.prod(self.shape), self.shape).copy(),)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Clamp(Function):
    def forward(self, x, low, high):
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.inside,)


class Relu(Function):
    def forward(self, x):
        self.positive = x > 0
        return x * self.positive

    def backward(self, grad):
        return (grad * self.positive,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def add(x, y) -> Tensor:
    return Add.apply(x, y)


def sub(x, y) -> Tensor:
    return Sub.apply(x, y)


def mul(x, y) -> Tensor:
    return Mul.apply(x, y)


def div(x, y) -> Tensor:
    return Div.apply(x, y)


def neg(x) -> Tensor:
    return Neg.apply(x)


def total(x) -> Tensor:
    return Sum.apply(x)


def mean(x) -> Tensor:
    return Mean.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def clamp(x, low: float, high: float) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


def relu(x) -> Tensor:
    return Relu.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


# convolution

def _check_conv_shapes(x, weight, bias, kernel):
    if x.ndim != 4:
        raise InvalidArgumentError(f"input must be [N, C, H, W], got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (kernel, kernel):
        raise InvalidArgumentError(f"weight must be [Cout, Cin, {kernel}, {kernel}], got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise InvalidArgumentError(
            f"weight expects {weight.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise InvalidArgumentError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise InvalidArgumentError(f"spatial size must be >= 1, got {x.shape[2:]}")


def im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """Gather ``x(r - d)`` for every tap ``d``: returns [Cin, k*k, N, H, W]."""
    n, c, h, w = x.shape
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kernel * kernel, n, h, w))
    for a in range(kernel):
        for b in range(kernel):
            top, left = 2 * pad - a, 2 * pad - b
            cols[:, a * kernel + b] = padded[:, :, top:top + h, left:left + w].transpose(1, 0, 2, 3)
    return cols


def col2im(cols: np.ndarray, kernel: int, shape) -> np.ndarray:
    """Adjoint of ``im2col``."""
    n, c, h, w = shape
    pad = kernel // 2
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for a in range(kernel):
        for b in range(kernel):
            top, left = 2 * pad - a, 2 * pad - b
            padded[:, :, top:top + h, left:left + w] += cols[:, a * kernel + b].transpose(1, 0, 2, 3)
    if pad:
        return padded[:, :, pad:-pad, pad:-pad]
    return padded


class Conv2d(Function):
    def forward(self, x, weight, bias, kernel):
        _check_conv_shapes(x, weight, bias, kernel)
        self.kernel = kernel
        self.x_shape = x.shape
        n, _, h, w = x.shape
        self.cols = im2col(x, kernel).reshape(-1, n * h * w)
        self.w_flat = weight.reshape(weight.shape[0], -1)
        out = self.w_flat @ self.cols + bias[:, None]
        return out.reshape(-1, n, h, w).transpose(1, 0, 2, 3)

    def backward(self, grad):
        n, c, h, w = self.x_shape
        g = grad.transpose(1, 0, 2, 3).reshape(grad.shape[1], -1)
        d_weight = (g @ self.cols.T).reshape(-1, c, self.kernel, self.kernel)
        d_bias = g.sum(axis=1)
        d_cols = (self.w_flat.T @ g).reshape(c, self.kernel * self.kernel, n, h, w)
        return col2im(d_cols, self.kernel, self.x_shape), d_weight, d_bias


def conv3x3(x, weight, bias) -> Tensor:
    """Zero-padded, same-size 3x3 convolution."""
    return Conv2d.apply(x, weight, bias, kernel=3)


def conv1x1(x, weight, bias) -> Tensor:
    return Conv2d.apply(x, weight, bias, kernel=1)


# normalization, pooling, resampling

class BatchNormInference(Function):
    def forward(self, x, gamma, beta, running_mean, running_var, eps):
        if eps <= 0:
            raise InvalidArgumentError(f"batchnorm eps must be > 0, got {eps}")
        if not np.all(np.isfinite(running_var)) or not np.all(np.isfinite(running_mean)):
            raise InvalidStateError("batchnorm running statistics are not finite")
        inv_std = 1.0 / np.sqrt(running_var + eps)
        self.xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.scale = (gamma * inv_std)[None, :, None, None]
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        d_gamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        d_beta = grad.sum(axis=(0, 2, 3))
        return grad * self.scale, d_gamma, d_beta


def batchnorm_inference(x, gamma, beta, running_mean, running_var, eps=1e-5) -> Tensor:
    """Batch normalization with frozen running statistics."""
    return BatchNormInference.apply(
        x,
        gamma,
        beta,
        running_mean=np.asarray(running_mean, dtype=np.float64),
        running_var=np.asarray(running_var, dtype=np.float64),
        eps=eps,
    )


class MaxPool2x2(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"maxpool2x2 needs even spatial size, got {(h, w)}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // 2, w // 2, 4
        )
        self.argmax = blocks.argmax(axis=-1)
        self.shape = x.shape
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.shape
        routed = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(routed, self.argmax[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)


def maxpool2x2(x) -> Tensor:
    return MaxPool2x2.apply(x)


@functools.lru_cache(maxsize=256)
def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear map [size_out, size_in] of half-pixel-centred bilinear resampling."""
    matrix = np.zeros((size_out, size_in))
    if size_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0, size_in - 1)
    low = np.floor(src).astype(int)
    high = np.minimum(low + 1, size_in - 1)
    frac = src - low
    rows = np.arange(size_out)
    np.add.at(matrix, (rows, low), 1.0 - frac)
    np.add.at(matrix, (rows, high), frac)
    matrix.setflags(write=False)
    return matrix


class ResizeBilinear(Function):
    def forward(self, x, height, width):
        if height < 1 or width < 1:
            raise InvalidArgumentError(f"target size must be >= 1, got {(height, width)}")
        self.rows = bilinear_matrix(x.shape[-2], height)
        self.cols = bilinear_matrix(x.shape[-1], width)
        return np.einsum("ih,...hw,jw->...ij", self.rows, x, self.cols)

    def backward(self, grad):
        return (np.einsum("ih,...ij,jw->...hw", self.rows, grad, self.cols),)


def resize_bilinear(x, height: int, width: int) -> Tensor:
    return ResizeBilinear.apply(x, height=int(height), width=int(width))


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return resize_bilinear(x, x.shape[-2] * factor, x.shape[-1] * factor)


# shape plumbing

class Concat(Function):
    def forward(self, *xs):
        heights = {x.shape[2:] for x in xs}
        if len(heights) != 1:
            raise InvalidArgumentError(f"concat needs equal spatial sizes, got {sorted(heights)}")
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*xs)


class Flip(Function):
    def forward(self, x, axis):
        self.axis = axis
        return np.flip(x, axis=axis).copy()

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis).copy(),)


def flip_h(x) -> Tensor:
    """Mirror left-right."""
    return Flip.apply(x, axis=-1)


def flip_v(x) -> Tensor:
    """Mirror top-bottom."""
    return Flip.apply(x, axis=-2)


class Crop(Function):
    def forward(self, x, height, width):
        self.shape = x.shape
        return x[..., :height, :width].copy()

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[..., : grad.shape[-2], : grad.shape[-1]] = grad
        return (out,)


def crop(x, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window."""
    return Crop.apply(x, height=int(height), width=int(width))


class Select(Function):
    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return x[index].copy()

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[self.index] = grad
        return (out,)


def select(x, index: int) -> Tensor:
    """Pick entry ``index`` along the first axis."""
    return Select.apply(x, index=int(index))

