"""
Overlap and topology metrics for binary segmentation masks.

Betti numbers count 8-connected foreground components (beta0) and
4-connected background components enclosed by foreground (beta1).
"""
import functools
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _skeletonize

from topotta.errors import InvalidArgumentError


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidArgumentError(f"masks must be 2-D, got shape {mask.shape}")
    return mask.astype(bool)


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_mask(pred), _as_mask(gt)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """2|P and Y| / (|P| + |Y|); 1 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def skeletonize(mask) -> np.ndarray:
    """One-pixel-wide skeleton by two-subcycle thinning."""
    mask = _as_mask(mask)
    if not mask.any():
        return np.zeros_like(mask)
    return _skeletonize(mask)


def cldice(pred, gt) -> Optional[float]:
    """Centerline Dice, or None when either skeleton is empty."""
    pred, gt = _pair(pred, gt)
    skel_pred, skel_gt = skeletonize(pred), skeletonize(gt)
    if not skel_pred.any() or not skel_gt.any():
        return None
    t_prec = np.logical_and(skel_pred, gt).sum() / skel_pred.sum()
    t_sens = np.logical_and(skel_gt, pred).sum() / skel_gt.sum()
    if t_prec + t_sens == 0:
        return 0.0
    return float(2.0 * t_prec * t_sens / (t_prec + t_sens))


def betti_numbers(mask) -> Tuple[int, int]:
    mask = _as_mask(mask)
    _, b0 = ndimage.label(mask, structure=EIGHT_CONNECTED)
    # a background ring joins every border-touching region into one component
    background = np.pad(~mask, 1, constant_values=True)
    _, regions = ndimage.label(background, structure=FOUR_CONNECTED)
    return int(b0), int(regions - 1)


def _tiles(size: int, patch: int) -> List[int]:
    count = max(1, size // patch)
    return [k * patch for k in range(count)] + [size]


def betti_error(pred, gt, patch: Optional[int] = None):
    """|b0_pred - b0_gt| + |b1_pred - b1_gt|.

    With ``patch`` set the error is averaged over non-overlapping
    ``patch`` x ``patch`` tiles, the last row and column of tiles absorbing
    the remainder.
    """
    pred, gt = _pair(pred, gt)
    if patch is None:
        (p0, p1), (g0, g1) = betti_numbers(pred), betti_numbers(gt)
        return abs(p0 - g0) + abs(p1 - g1)
    if patch < 1:
        raise InvalidArgumentError(f"betti patch must be >= 1, got {patch}")
    rows, cols = _tiles(pred.shape[0], patch), _tiles(pred.shape[1], patch)
    errors = [
        betti_error(pred[r0:r1, c0:c1], gt[r0:r1, c0:c1])
        for r0, r1 in zip(rows, rows[1:])
        for c0, c1 in zip(cols, cols[1:])
    ]
    return float(np.mean(errors))


def betti_convention(patch: Optional[int] = None) -> str:
    scope = "whole-image" if patch is None else f"{patch}x{patch} patch average"
    return f"8-connected foreground / 4-connected holes, {scope}"


@functools.lru_cache(maxsize=64)
def area_matrix(size_in: int, size_out: int) -> np.ndarray:
    """[size_out, size_in] box-filter weights: each output averages the source span it covers."""
    scale = size_in / size_out
    matrix = np.zeros((size_out, size_in))
    for i in range(size_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(size_in, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 1e-9:
                matrix[i, j] = overlap / scale
    matrix.setflags(write=False)
    return matrix


def resize_area(values: np.ndarray, height: int, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return area_matrix(values.shape[0], height) @ values @ area_matrix(values.shape[1], width).T


def resize_nearest(mask, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source index floor(i * src / dst)."""
    mask = _as_mask(mask)
    rows = np.arange(height) * mask.shape[0] // height
    cols = np.arange(width) * mask.shape[1] // width
    return mask[np.ix_(rows, cols)]


def resize_label(mask, height: int, width: int) -> np.ndarray:
    """Resize a binary label without breaking thin structures.

    The area-interpolated mask thresholded at 0.5 is OR-ed with the skeleton
    of the same interpolation thresholded at 0.
    """
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"target size must be >= 1, got {(height, width)}")
    area = resize_area(_as_mask(mask), height, width)
    coarse = area > 0.5
    covered = area > 1e-12
    return np.logical_or(coarse, skeletonize(covered))


@dataclass
class TopologyReport:
    """Metrics of one prediction against its ground truth.

    ``cldice`` is None when a skeleton is empty.
    """

    name: str
    dice: float
    cldice: Optional[float]
    betti_error: float
    betti_pred: Tuple[int, int]
    betti_gt: Tuple[int, int]

    @property
    def cldice_defined(self) -> bool:
        return self.cldice is not None

    def to_dict(self) -> Dict:
        record = asdict(self)
        record["betti_pred"] = list(self.betti_pred)
        record["betti_gt"] = list(self.betti_gt)
        return record


def evaluate(pred_prob, gt, threshold: float = 0.5, patch: Optional[int] = None, name: str = "") -> TopologyReport:
    """Binarize a probability map and score it against ``gt``."""
    pred = np.asarray(pred_prob) > threshold
    pred, gt = _pair(pred, gt)
    return TopologyReport(
        name=name,
        dice=dice(pred, gt),
        cldice=cldice(pred, gt),
        betti_error=betti_error(pred, gt, patch),
        betti_pred=betti_numbers(pred),
        betti_gt=betti_numbers(gt),
    )


def aggregate(reports: Sequence[TopologyReport]) -> Dict:
    """Means over a report list; undefined clDice values are excluded and counted."""
    defined = [r.cldice for r in reports if r.cldice is not None]
    return {
        "count": len(reports),
        "mean_dice": float(np.mean([r.dice for r in reports])) if reports else None,
        "mean_cldice": float(np.mean(defined)) if defined else None,
        "cldice_undefined": len(reports) - len(defined),
        "mean_betti_error": float(np.mean([r.betti_error for r in reports])) if reports else None,
    }
