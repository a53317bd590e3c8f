"""
Adam optimiser over leaf tensors.
"""
from dataclasses import dataclass
from typing import List, Sequence, Type

import numpy as np

from topotta.autodiff.tensor import Tensor
from topotta.errors import AdaptationDivergedError, InvalidArgumentError, NumericalError


@dataclass
class Moments:
    """First and second moment estimates of one tensor."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, array: np.ndarray) -> "Moments":
        return cls(np.zeros_like(array), np.zeros_like(array))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    moments: Moments,
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    error: Type[NumericalError] = AdaptationDivergedError,
) -> np.ndarray:
    """One bias-corrected Adam update.

    ``moments`` is updated in place; the new parameter values are returned.

    Args:
        param (np.ndarray): Current values.
        grad (np.ndarray): Gradient with the shape of ``param``.
        moments (Moments): Running moment estimates of this parameter.
        lr (float): Step size.
        t (int): 1-based step counter.
        error: Exception class raised on a non-finite gradient.

    Raises:
        InvalidArgumentError: On a shape mismatch or ``t < 1``.
        NumericalError: If ``grad`` holds NaN or Inf.
    """
    if t < 1:
        raise InvalidArgumentError(f"Adam step counter starts at 1, got {t}")
    if grad.shape != param.shape:
        raise InvalidArgumentError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise error("non-finite gradient in Adam update")
    moments.m = beta1 * moments.m + (1.0 - beta1) * grad
    moments.v = beta2 * moments.v + (1.0 - beta2) * grad * grad
    m_hat = moments.m / (1.0 - beta1 ** t)
    v_hat = moments.v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed list of tensors, updated in place.

    Tensors without a gradient after the backward pass are skipped and keep
    their moments.
    """

    def __init__(
        self,
        tensors: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        error: Type[NumericalError] = AdaptationDivergedError,
    ):
        self.tensors: List[Tensor] = list(tensors)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.error = error
        self.t = 0
        self.moments = [Moments.zeros_like(t.data) for t in self.tensors]

    def step(self):
        self.t += 1
        for tensor, moments in zip(self.tensors, self.moments):
            if tensor.grad is None:
                continue
            tensor.data[...] = adam_step(
                tensor.data, tensor.grad, moments, self.lr, self.t,
                self.beta1, self.beta2, self.eps, self.error,
            )

    def zero_grad(self):
        for tensor in self.tensors:
            tensor.grad = None
