"""
Checkpoint save and load on top of the tensor blob format.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from topotta.autodiff.tensor import Tensor
from topotta.errors import InvalidStateError
from topotta.io.files import TensorBlob, read_blob, write_blob
from topotta.model.segnet import ModelMeta, SegModel

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


@dataclass
class Checkpoint:
    """Frozen copy of a model's parameters and running statistics.

    Attributes:
        meta (ModelMeta): Architecture the tensors belong to.
        params (Dict[str, np.ndarray]): Learnable tensors by name.
        buffers (Dict[str, np.ndarray]): Batch-norm statistics by name.
        seed (int): Seed the model was created and trained with.
        info (dict): Free-form training summary (best epoch, validation Dice).
    """

    meta: ModelMeta
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    seed: Optional[int] = None
    info: Optional[dict] = None

    @classmethod
    def from_model(cls, model: SegModel, seed: Optional[int] = None, info: Optional[dict] = None):
        if model.router is not None:
            raise InvalidStateError("checkpoints hold unwrapped models only")
        return cls(
            meta=model.meta,
            params={name: t.data.copy() for name, t in model.params.items()},
            buffers={name: b.copy() for name, b in model.buffers.items()},
            seed=seed,
            info=dict(info or {}),
        )

    def to_model(self, requires_grad: bool = True) -> SegModel:
        params = {name: Tensor(array.copy(), requires_grad=requires_grad) for name, array in self.params.items()}
        buffers = {name: array.copy() for name, array in self.buffers.items()}
        model = SegModel(self.meta, params, buffers)
        expected = SegModel.create(self.meta).parameter_directory()
        if model.parameter_directory() != expected:
            raise InvalidStateError("checkpoint tensors do not match its model meta")
        return model


def save_checkpoint(checkpoint: Checkpoint, path):
    blob = TensorBlob(
        kind=CHECKPOINT_KIND,
        meta={"model": checkpoint.meta.to_dict(), "info": checkpoint.info or {}},
        groups={"params": checkpoint.params, "buffers": checkpoint.buffers},
        seed=checkpoint.seed,
    )
    write_blob(path, blob)
    logger.info("saved checkpoint to %s", path)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        DataIOError: If the file is missing.
        InvalidStateError: If the file is not a checkpoint.
    """
    blob = read_blob(path)
    if blob.kind != CHECKPOINT_KIND:
        raise InvalidStateError(f"{path} holds a {blob.kind}, not a checkpoint")
    return Checkpoint(
        meta=ModelMeta(**blob.meta["model"]),
        params=blob.groups.get("params", {}),
        buffers=blob.groups.get("buffers", {}),
        seed=blob.seed,
        info=blob.meta.get("info") or {},
    )


def check_meta(checkpoint: Checkpoint, levels: int, base_channels: int):
    """Raise when a checkpoint does not match the configured architecture."""
    meta = checkpoint.meta
    if (meta.levels, meta.base_channels) != (levels, base_channels):
        raise InvalidStateError(
            f"checkpoint model (levels={meta.levels}, base_channels={meta.base_channels}) "
            f"does not match the configuration (levels={levels}, base_channels={base_channels})"
        )
