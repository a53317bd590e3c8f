"""
Miniature UNet-style segmentation network.

Each encoder level runs two (3x3 conv, batch norm, relu) blocks with a 2x2
max pool between levels; each decoder level upsamples, concatenates the
matching encoder output and runs two more blocks. A 1x1 convolution and a
sigmoid produce the foreground probability map.
"""
import copy
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional

import numpy as np

from topotta.autodiff import ops
from topotta.autodiff.tensor import Tensor, no_grad
from topotta.errors import InvalidArgumentError, InvalidStateError
from topotta.model.topomdc import topomdc_fused

logger = logging.getLogger(__name__)

BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelMeta:
    """Architecture description stored alongside the parameters."""

    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self):
        return asdict(self)


# The encoder of this shape holds ten 3x3 convolutions: with a 4x4 grid and
# eight directions its router has 10 * 16 * 8 = 1280 values.
DEEP_SHAPE = ModelMeta(levels=5, base_channels=8)


def _block_names(prefix: str) -> List[str]:
    return [f"{prefix}.conv1", f"{prefix}.conv2"]


class SegModel:
    """Encoder-decoder segmentation network ``F(x; theta)``.

    Attributes:
        meta (ModelMeta): Architecture description.
        params (Dict[str, Tensor]): Named learnable tensors.
        buffers (Dict[str, np.ndarray]): Named batch-norm running statistics.
        router (RouterParams): Router of the wrapped encoder, or None.
    """

    def __init__(self, meta: ModelMeta, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray], router=None):
        self.meta = meta
        self.params = params
        self.buffers = buffers
        self.router = router

    @classmethod
    def create(cls, meta: ModelMeta = ModelMeta(), seed: int = 0) -> "SegModel":
        """Build a freshly initialised model (He-normal kernels, zero biases)."""
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}

        def add_conv(name, cin, cout, kernel):
            fan_in = cin * kernel * kernel
            params[f"{name}.weight"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel)), requires_grad=True
            )
            params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

        def add_bn(name, channels):
            params[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(channels)
            buffers[f"{name}.running_var"] = np.ones(channels)

        cin = meta.in_channels
        for level in range(meta.levels):
            cout = meta.channels(level)
            for conv in _block_names(f"enc{level}"):
                add_conv(conv, cin, cout, 3)
                add_bn(conv.replace("conv", "bn"), cout)
                cin = cout
        for level in reversed(range(meta.levels - 1)):
            cout = meta.channels(level)
            cin = meta.channels(level + 1) + cout
            for conv in _block_names(f"dec{level}"):
                add_conv(conv, cin, cout, 3)
                add_bn(conv.replace("conv", "bn"), cout)
                cin = cout
        add_conv("head", meta.channels(0), 1, 1)
        return cls(meta, params, buffers)

    def encoder_conv_names(self) -> List[str]:
        """Names of the replaceable encoder 3x3 convolutions, input side first."""
        return [name for level in range(self.meta.levels) for name in _block_names(f"enc{level}")]

    def with_router(self, router) -> "SegModel":
        return SegModel(self.meta, self.params, self.buffers, router)

    def copy(self, requires_grad: Optional[bool] = None) -> "SegModel":
        """Deep copy of parameters and statistics, detached from any router."""
        params = {}
        for name, tensor in self.params.items():
            flag = tensor.requires_grad if requires_grad is None else requires_grad
            params[name] = Tensor(tensor.data.copy(), requires_grad=flag)
        return SegModel(self.meta, params, copy.deepcopy(self.buffers))

    def set_requires_grad(self, flag: bool):
        for tensor in self.params.values():
            tensor.requires_grad = flag

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def _conv(self, name: str, x: Tensor) -> Tensor:
        weight, bias = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if self.router is not None and name in self.router:
            return topomdc_fused(x, weight, self.router.layer_delta(name), bias, self.router.directions)
        return ops.conv3x3(x, weight, bias)

    def _bn(self, name: str, x: Tensor) -> Tensor:
        return ops.batchnorm_inference(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            BN_EPS,
        )

    def _block(self, prefix: str, x: Tensor, calibrate: bool = False) -> Tensor:
        for conv in _block_names(prefix):
            x = self._conv(conv, x)
            bn = conv.replace("conv", "bn")
            if calibrate:
                self.buffers[f"{bn}.running_mean"] = x.data.mean(axis=(0, 2, 3))
                self.buffers[f"{bn}.running_var"] = x.data.var(axis=(0, 2, 3))
            x = ops.relu(self._bn(bn, x))
        return x

    def check_input(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.data.ndim != 4 or image.shape[1] != self.meta.in_channels:
            raise InvalidArgumentError(
                f"input must be [N, {self.meta.in_channels}, H, W], got shape {image.shape}"
            )
        factor = 2 ** self.meta.levels
        if image.shape[2] % factor or image.shape[3] % factor:
            raise InvalidArgumentError(
                f"spatial size {image.shape[2:]} is not divisible by 2**levels = {factor}"
            )
        return image

    def forward(self, image, calibrate: bool = False) -> Tensor:
        """Map images [N, 1, H, W] to foreground probabilities [N, 1, H, W].

        Raises:
            InvalidArgumentError: If the spatial size is not divisible by 2**levels.
        """
        x = self.check_input(image)
        skips = []
        for level in range(self.meta.levels):
            if level:
                x = ops.maxpool2x2(x)
            x = self._block(f"enc{level}", x, calibrate)
            skips.append(x)
        for level in reversed(range(self.meta.levels - 1)):
            x = ops.upsample_bilinear(x, 2)
            x = ops.concat_channels([x, skips[level]])
            x = self._block(f"dec{level}", x, calibrate)
        logits = ops.conv1x1(x, self.params["head.weight"], self.params["head.bias"])
        return ops.sigmoid(logits)

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Probability map of a single [H, W] image, without recording a graph."""
        with no_grad():
            return self.forward(image[None, None]).data[0, 0]

    def calibrate_bn(self, images: np.ndarray):
        """Set every running statistic from one batch, level by level.

        Each normalisation layer sees activations produced with the statistics
        already set upstream.
        """
        if self.router is not None:
            raise InvalidStateError("batch-norm calibration runs on the unwrapped model")
        with no_grad():
            self.forward(images, calibrate=True)
        logger.debug("batch-norm statistics set from %d images", len(images))

    def parameter_directory(self) -> Dict[str, tuple]:
        return {name: t.shape for name, t in self.params.items()}
