"""
Central finite-difference checks of analytic gradients.
"""
from typing import Callable

import numpy as np

from topotta.autodiff.tensor import Tensor, backward, no_grad
from topotta.errors import InvalidArgumentError


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` with central differences.

    Args:
        f (Callable[[Tensor], Tensor]): Scalar-valued tensor function.
        point (array-like or Tensor): Where to evaluate the gradient.
        h (float): Finite-difference step.

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1, |analytic|).

    Raises:
        InvalidArgumentError: If ``h`` is not positive or ``f`` is not scalar.
    """
    if h <= 0:
        raise InvalidArgumentError(f"finite-difference step must be > 0, got {h}")

    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    backward(f(x))
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.empty_like(base)
    probe = base.copy()
    with no_grad():
        for index in np.ndindex(base.shape):
            probe[index] = base[index] + h
            upper = f(Tensor(probe.copy())).item()
            probe[index] = base[index] - h
            lower = f(Tensor(probe.copy())).item()
            probe[index] = base[index]
            numeric[index] = (upper - lower) / (2.0 * h)

    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
