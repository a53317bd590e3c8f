"""
Flip and scale augmentations with their inverse on probability maps.

The forward direction works on plain arrays (inputs carry no gradient);
the inverse runs through autodiff functions so the student's loss can be
computed in the frame of the original image.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from topotta.autodiff import ops
from topotta.autodiff.tensor import Tensor
from topotta.errors import InvalidArgumentError


@dataclass(frozen=True)
class Transform:
    flip_h: bool = False
    flip_v: bool = False
    scale: float = 1.0

    @classmethod
    def sample(cls, rng, scales: Sequence[float]) -> "Transform":
        flip_h = bool(rng.random() < 0.5)
        flip_v = bool(rng.random() < 0.5)
        scale = float(scales[rng.integers(len(scales))])
        return cls(flip_h, flip_v, scale)

    def scaled_size(self, height: int, width: int) -> Tuple[int, int]:
        return max(1, int(round(self.scale * height))), max(1, int(round(self.scale * width)))


IDENTITY = Transform()


@dataclass(frozen=True)
class Framed:
    """A transformed input together with what its inverse needs."""

    batch: np.ndarray
    transform: Transform
    scaled: Tuple[int, int]
    original: Tuple[int, int]


def padded_size(size: int, factor: int) -> int:
    return -(-size // factor) * factor


def apply(image: np.ndarray, transform: Transform, factor: int) -> Framed:
    """Flip, rescale (bilinear) and zero-pad ``image`` [H, W] to a multiple of ``factor``."""
    if image.ndim != 2:
        raise InvalidArgumentError(f"augmentation expects an [H, W] image, got shape {image.shape}")
    x = image
    if transform.flip_h:
        x = x[:, ::-1]
    if transform.flip_v:
        x = x[::-1, :]
    height, width = transform.scaled_size(*image.shape)
    if (height, width) != image.shape:
        x = ops.bilinear_matrix(image.shape[0], height) @ x @ ops.bilinear_matrix(image.shape[1], width).T
    padded = np.zeros((padded_size(height, factor), padded_size(width, factor)))
    padded[:height, :width] = x
    return Framed(padded[None, None], transform, (height, width), image.shape)


def invert(prob: Tensor, framed: Framed) -> Tensor:
    """Map a [1, 1, H', W'] output back onto the original image frame."""
    out = ops.crop(prob, *framed.scaled)
    if framed.scaled != framed.original:
        out = ops.resize_bilinear(out, *framed.original)
    if framed.transform.flip_v:
        out = ops.flip_v(out)
    if framed.transform.flip_h:
        out = ops.flip_h(out)
    return out


def run_framed(model, image: np.ndarray, transform: Transform = IDENTITY) -> Tensor:
    """Forward ``image`` through ``model`` under ``transform``; result in the image frame."""
    framed = apply(image, transform, 2 ** model.meta.levels)
    return invert(model(framed.batch), framed)
