"""
Source-domain training of the segmentation network.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from topotta.autodiff.optim import Adam
from topotta.autodiff.tensor import Tensor, backward
from topotta.config import TrainConfig
from topotta.errors import InvalidArgumentError, NumericalError, TrainingDivergedError
from topotta.metrics.topology import dice
from topotta.model.checkpoint import Checkpoint
from topotta.model.segnet import SegModel

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-7
CALIBRATION_IMAGES = 16


def dice_bce_loss(pred: Tensor, label, eps: float = LOSS_EPS) -> Tensor:
    """Soft Dice loss plus binary cross entropy.

    Args:
        pred (Tensor): Probabilities in (0, 1).
        label (array-like or Tensor): Targets of the same shape.
        eps (float): Clamp for the probabilities and smoothing of the Dice ratio.

    Returns:
        Tensor: ``(1 - soft_dice) + bce`` as a scalar.

    Raises:
        InvalidArgumentError: If the shapes differ.
    """
    label = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise InvalidArgumentError(f"prediction shape {pred.shape} does not match label {label.shape}")
    p = pred.clamp(eps, 1.0 - eps)
    soft_dice = (2.0 * (p * label).sum() + eps) / (p.sum() + float(label.sum()) + eps)
    bce = -(label * p.log() + (1.0 - label) * (1.0 - p).log()).mean()
    return (1.0 - soft_dice) + bce


def _split(count: int, val_fraction: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_val = max(1, int(round(val_fraction * count)))
    if count - n_val < 1:
        return order, order
    return order[n_val:], order[:n_val]


def _batch(images, labels, indices, rng, augment=True):
    xs, ys = [], []
    for i in indices:
        x, y = images[i], labels[i]
        if augment and rng.random() < 0.5:
            x, y = x[:, ::-1], y[:, ::-1]
        if augment and rng.random() < 0.5:
            x, y = x[::-1, :], y[::-1, :]
        xs.append(x)
        ys.append(y)
    return np.stack(xs)[:, None].copy(), np.stack(ys)[:, None].astype(np.float64)


def calibrate(model: SegModel, images: Sequence[np.ndarray], indices: np.ndarray, rng):
    """Refresh the batch-norm statistics from a random subset of ``indices``."""
    chosen = rng.choice(indices, size=min(CALIBRATION_IMAGES, len(indices)), replace=False)
    model.calibrate_bn(np.stack([images[i] for i in sorted(chosen)])[:, None])


def train_epoch(
    model: SegModel,
    optimizer: Adam,
    images: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    indices: np.ndarray,
    batch_size: int,
    rng,
    augment: bool = True,
) -> List[float]:
    """Run one pass over ``indices`` in shuffled batches; returns the step losses.

    Raises:
        TrainingDivergedError: If a loss or gradient is not finite.
    """
    losses = []
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        x, y = _batch(images, labels, order[start:start + batch_size], rng, augment)
        try:
            loss = dice_bce_loss(model(x), y)
            backward(loss)
            optimizer.step()
        except NumericalError as e:
            raise TrainingDivergedError(f"training diverged: {e.message}")
        losses.append(loss.item())
    return losses


def validation_dice(model: SegModel, images, labels, indices, threshold: float = 0.5) -> float:
    scores = [dice(model.predict(images[i]) > threshold, labels[i] > 0.5) for i in indices]
    return float(np.mean(scores))


def train_source(
    model: SegModel,
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    progress: bool = False,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Train ``model`` with Adam on Dice + BCE and keep the best validation epoch.

    A held-out ``cfg.val_fraction`` of the images selects the epoch; batch
    norm statistics are recalibrated from training images at the start of
    every epoch and frozen within it.

    Args:
        model (SegModel): Unwrapped model, trained in place.
        dataset (Sequence[Tuple[np.ndarray, np.ndarray]]): (image, binary label) pairs.
        cfg (TrainConfig): Epochs, batch size, learning rate, validation split.
        seed (int): Seed of the split, shuffling and flips.
        progress (bool): Show a tqdm progress bar over epochs.
        on_epoch (Callable[[dict], None], optional): Receives one record per epoch.

    Returns:
        Checkpoint: Parameters of the epoch with the best validation Dice.

    Raises:
        InvalidArgumentError: If the dataset is empty.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidArgumentError("source dataset is empty")
    images = [np.asarray(x, dtype=np.float64) for x, _ in dataset]
    labels = [np.asarray(y, dtype=np.float64) for _, y in dataset]
    for y in labels:
        if not np.all((y == 0) | (y == 1)):
            raise InvalidArgumentError("source labels must be binary")

    rng = np.random.default_rng(seed)
    train_idx, val_idx = _split(len(images), cfg.val_fraction, rng)
    model.set_requires_grad(True)
    optimizer = Adam(list(model.params.values()), lr=cfg.lr_source, error=TrainingDivergedError)
    logger.info(
        "training on %d images (%d validation), lr %g, batch %d, %d epochs",
        len(train_idx), len(val_idx), cfg.lr_source, cfg.batch_size, cfg.epochs,
    )

    best, best_dice = None, -1.0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress):
        calibrate(model, images, train_idx, rng)
        losses = train_epoch(model, optimizer, images, labels, train_idx, cfg.batch_size, rng)
        score = validation_dice(model, images, labels, val_idx)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_dice": score}
        logger.debug("epoch %d loss %.5f val dice %.4f", epoch, record["loss"], score)
        if on_epoch is not None:
            on_epoch(record)
        if score > best_dice:
            best_dice = score
            best = Checkpoint.from_model(
                model, seed=seed, info={"best_epoch": epoch, "val_dice": score}
            )
    logger.info("best validation Dice %.4f at epoch %d", best_dice, best.info["best_epoch"])
    return best
