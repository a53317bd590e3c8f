"""
Dense 64-bit tensors with reverse-mode differentiation.

Each differentiable operation is a ``Function`` subclass: ``forward`` works
on raw numpy arrays and saves what ``backward`` needs, ``backward`` maps the
output gradient to one gradient per parent. The graph is recorded only when
gradient mode is on and at least one input requires a gradient.
"""
import contextlib
from typing import Dict, List, Optional, Sequence

import numpy as np

from topotta.errors import InvalidArgumentError, NumericalError


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense real array with an optional gradient accumulator.

    Attributes:
        data (np.ndarray): Row-major float64 values.
        grad (np.ndarray): Gradient accumulator with the shape of ``data``, or None.
        requires_grad (bool): Whether gradients should be tracked for this tensor.
    """

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _ctx=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # arithmetic
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def sum(self):
        return ops.total(self)

    def mean(self):
        return ops.mean(self)

    def log(self):
        return ops.log(self)

    def clamp(self, low: float, high: float):
        return ops.clamp(self, low, high)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """A recorded operation: parents plus whatever ``forward`` saved."""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(t) for t in inputs]
        fn = cls(*tensors)
        out = fn.forward(*[t.data for t in tensors], **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{cls.__name__} produced non-finite values")
        track = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> List[Tensor]:
    """Compute d(loss)/d(leaf) for every leaf that requires a gradient.

    Leaf accumulators reached by the graph are zeroed before the pass, so the
    result does not depend on previous passes.

    Args:
        loss (Tensor): A scalar tensor.

    Returns:
        List[Tensor]: The leaves that received gradients, in graph order.

    Raises:
        InvalidArgumentError: If ``loss`` is not a scalar.
        NumericalError: If a gradient becomes non-finite.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []

    order = _topological_order(loss)
    leaves = [node for node in order if node.is_leaf]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad += grad
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NumericalError(f"{type(node._ctx).__name__} produced a non-finite gradient")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
    return leaves


# imported last: ops needs Function and Tensor from this module
from topotta.autodiff import ops  # noqa: E402
