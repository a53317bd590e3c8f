"""
Pseudo-break hard sample generation.

Confident foreground keypoints are drawn from the teacher's pseudo-label;
for each one an s x s foreground window is paired with a background window
and its low-frequency content is replaced by the background's, blended
back in through the soft pseudo-label. The edited windows look broken to
the model while keeping their high-frequency evidence, and the pixels
under them get a higher weight in the consistency loss.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from topotta.config import BACKGROUND_STRATEGIES, HG_VARIANTS, HgConfig
from topotta.errors import InvalidArgumentError, NumericalError

logger = logging.getLogger(__name__)

HARD_WEIGHT = 10.0
FOREGROUND_LEVEL = 0.5
IMAG_TOLERANCE = 1e-9

Point = Tuple[int, int]


@dataclass(frozen=True)
class Window:
    """Square window given by its top-left corner and side."""

    top: int
    left: int
    size: int

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.top, self.top + self.size), slice(self.left, self.left + self.size)

    def inside(self, shape) -> bool:
        return (
            self.top >= 0
            and self.left >= 0
            and self.top + self.size <= shape[0]
            and self.left + self.size <= shape[1]
        )

    def overlaps(self, other: "Window") -> bool:
        return (
            self.top < other.top + other.size
            and other.top < self.top + self.size
            and self.left < other.left + other.size
            and other.left < self.left + self.size
        )

    def to_list(self) -> List[int]:
        return [self.top, self.left, self.size]


def centred_window(point: Point, size: int) -> Window:
    return Window(point[0] - size // 2, point[1] - size // 2, size)


def select_keypoints(pred: np.ndarray, cfg: HgConfig, rng) -> List[Point]:
    """Draw ceil(k * |P|) points of P = {pred > tau} without replacement.

    Points come back in row-major order.
    """
    confident = np.argwhere(pred > cfg.tau)
    if len(confident) == 0:
        return []
    count = min(len(confident), math.ceil(cfg.k * len(confident)))
    chosen = np.sort(rng.choice(len(confident), size=count, replace=False))
    return [(int(u), int(v)) for u, v in confident[chosen]]


def foreground_ratio(pred: np.ndarray, window: Window) -> float:
    return float(np.mean(pred[window.slices] > FOREGROUND_LEVEL))


@dataclass
class SearchResult:
    """Outcome of the background search for one keypoint.

    ``background`` is None when the keypoint is rejected; ``reason`` then
    names the rejection: "border", "overlap", "no-candidate" or "foreground".
    """

    keypoint: Point
    foreground: Window
    background: Optional[Window] = None
    reason: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.background is not None


def neighbor_windows(fg: Window, shape) -> List[Window]:
    """In-bounds windows tiled around ``fg`` at offsets of one side, in (row, col) order."""
    candidates = [
        Window(fg.top + dr * fg.size, fg.left + dc * fg.size, fg.size)
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
        if (dr, dc) != (0, 0)
    ]
    return sorted((w for w in candidates if w.inside(shape)), key=lambda w: (w.top, w.left))


def grid_windows(shape, size: int) -> List[Window]:
    return [
        Window(top, left, size)
        for top in range(0, shape[0] - size + 1, size)
        for left in range(0, shape[1] - size + 1, size)
    ]


def _similarity(image: np.ndarray, fg: Window, bg: Window) -> float:
    return -float(np.mean((image[bg.slices] - image[fg.slices]) ** 2))


def select_background(
    image: np.ndarray, pred: np.ndarray, fg: Window, cfg: HgConfig
) -> Tuple[Optional[Window], Optional[str]]:
    """Pick the background window for ``fg`` with ``cfg.background_strategy``.

    Returns:
        Tuple[Optional[Window], Optional[str]]: The window, or None with a rejection reason.
    """
    strategy = cfg.background_strategy
    if strategy not in BACKGROUND_STRATEGIES:
        raise InvalidArgumentError(f"unknown background strategy {strategy!r}")

    if strategy == "neighbor":
        candidates = neighbor_windows(fg, pred.shape)
        if not candidates:
            return None, "no-candidate"
        best = candidates[0]
        best_sum = float(pred[best.slices].sum())
        for window in candidates[1:]:
            total = float(pred[window.slices].sum())
            if total < best_sum:
                best, best_sum = window, total
        if foreground_ratio(pred, best) > cfg.tau_bg:
            return None, "foreground"
        return best, None

    candidates = [
        w for w in grid_windows(pred.shape, fg.size)
        if not w.overlaps(fg) and foreground_ratio(pred, w) <= cfg.tau_bg
    ]
    if not candidates:
        return None, "no-candidate"
    ranked = sorted(candidates, key=lambda w: (_similarity(image, fg, w), w.top, w.left))
    if strategy == "least-similar":
        return ranked[0], None
    if strategy == "most-similar":
        top_score = _similarity(image, fg, ranked[-1])
        return next(w for w in ranked if _similarity(image, fg, w) == top_score), None
    return ranked[(len(ranked) - 1) // 2], None


def sliding_search(
    image: np.ndarray,
    pred: np.ndarray,
    keypoint: Point,
    cfg: HgConfig,
    accepted: Sequence[Window] = (),
) -> SearchResult:
    """Pair the foreground window of ``keypoint`` with a background window.

    The keypoint is rejected when its window leaves the image, overlaps an
    already accepted window, has no in-bounds candidate, or when the chosen
    candidate's foreground-pixel ratio exceeds ``cfg.tau_bg``.
    """
    fg = centred_window(keypoint, cfg.window)
    if not fg.inside(pred.shape):
        return SearchResult(keypoint, fg, reason="border")
    if any(fg.overlaps(other) for other in accepted):
        return SearchResult(keypoint, fg, reason="overlap")
    background, reason = select_background(image, pred, fg, cfg)
    return SearchResult(keypoint, fg, background, reason)


def low_freq_mask(size: int, ratio: float) -> np.ndarray:
    """Centred square of the shifted spectrum, side about ``ratio * size``.

    The square spans ``b`` bins either side of the zero frequency with
    ``b = (max(1, round(ratio * size)) - 1) // 2``, so its side is always odd.
    When ``round(ratio * size)`` is even the square is one bin narrower than
    that value (ratio 0.2 with size 30 swaps 5 bins, not 6); the odd side
    keeps the mask symmetric under negated frequencies, which keeps the
    swapped patch real. The mask is returned in unshifted (numpy.fft) layout.
    """
    side = max(1, int(round(ratio * size)))
    b = (side - 1) // 2
    centre = size // 2
    shifted = np.zeros((size, size), dtype=bool)
    shifted[centre - b:centre + b + 1, centre - b:centre + b + 1] = True
    return np.fft.ifftshift(shifted)


def low_freq_swap(
    x_fg: np.ndarray, x_bg: np.ndarray, ratio: float = 0.3, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Replace the low-frequency spectrum of ``x_fg`` with that of ``x_bg``.

    Args:
        x_fg (np.ndarray): Square foreground patch.
        x_bg (np.ndarray): Background patch of the same shape.
        ratio (float): Side of the swapped square relative to the patch side.
        mask (np.ndarray, optional): Boolean mask in numpy.fft layout that
            overrides the square.

    Raises:
        InvalidArgumentError: If the patches are not equal squares.
        NumericalError: If the inverse transform leaves an imaginary part,
            as it does for a mask that is not symmetric under negated
            frequencies.
    """
    if x_fg.ndim != 2 or x_fg.shape[0] != x_fg.shape[1] or x_bg.shape != x_fg.shape:
        raise InvalidArgumentError(
            f"frequency swap needs equal square patches, got {x_fg.shape} and {x_bg.shape}"
        )
    m_low = low_freq_mask(x_fg.shape[0], ratio) if mask is None else np.asarray(mask, dtype=bool)
    f_fg, f_bg = np.fft.fft2(x_fg), np.fft.fft2(x_bg)
    swapped = np.fft.ifft2(np.where(m_low, f_bg, f_fg))
    residue = np.abs(swapped.imag).max()
    if not residue < IMAG_TOLERANCE:
        raise NumericalError(f"imaginary residue {residue:.3g} after inverse frequency transform")
    return swapped.real


def compose_pseudobreak(x_fg: np.ndarray, x_swap: np.ndarray, pred_patch: np.ndarray) -> np.ndarray:
    """Blend ``x_swap`` into ``x_fg`` where the soft pseudo-label is high."""
    if not (x_fg.shape == x_swap.shape == pred_patch.shape):
        raise InvalidArgumentError(
            f"composition needs equal shapes, got {x_fg.shape}, {x_swap.shape}, {pred_patch.shape}"
        )
    if np.any(pred_patch < 0) or np.any(pred_patch > 1):
        raise InvalidArgumentError("pseudo-label values must lie in [0, 1]")
    return x_swap * pred_patch + x_fg * (1.0 - pred_patch)


def variant_augment(
    x_fg: np.ndarray,
    variant: str,
    rng,
    x_bg: Optional[np.ndarray] = None,
    cfg: HgConfig = HgConfig(),
    dynamic_range: float = 1.0,
) -> np.ndarray:
    """Content blended into the foreground window by ``compose_pseudobreak``."""
    if variant not in HG_VARIANTS:
        raise InvalidArgumentError(f"unknown augmentation variant {variant!r}")
    if variant == "frequency-swap":
        return low_freq_swap(x_fg, x_bg, cfg.low_freq_ratio)
    if variant == "blur":
        # truncate=1.0 with sigma 2 keeps a 5x5 support
        return ndimage.gaussian_filter(x_fg, sigma=cfg.blur_sigma, truncate=1.0, mode="nearest")
    if variant == "noise":
        return x_fg + rng.normal(0.0, cfg.noise_sigma * dynamic_range, size=x_fg.shape)
    if x_bg is None:
        raise InvalidArgumentError("image-swap needs a background patch")
    return x_bg.copy()


@dataclass
class PseudoBreakPlan:
    """Edited image and loss weights of one hard sample.

    Attributes:
        keypoints (List[Point]): Accepted keypoints.
        fg_windows (List[Window]): Foreground windows, one per accepted keypoint.
        bg_windows (List[Window]): Background windows paired with them.
        hard_image (np.ndarray): The edited image x'.
        weight_map (np.ndarray): 10 on edited foreground pixels, 1 elsewhere.
        rejected_count (int): Keypoints that were drawn but not used.
        candidate_count (int): Keypoints drawn.
        rejections (Dict[str, int]): Rejected keypoints by reason.
        patches (List[Tuple[np.ndarray, np.ndarray]]): (before, after) per accepted window.
    """

    keypoints: List[Point]
    fg_windows: List[Window]
    bg_windows: List[Window]
    hard_image: np.ndarray
    weight_map: np.ndarray
    rejected_count: int = 0
    candidate_count: int = 0
    rejections: Dict[str, int] = field(default_factory=dict)
    patches: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def summary(self) -> Dict:
        return {
            "keypoints": len(self.keypoints),
            "candidates": self.candidate_count,
            "rejected": self.rejected_count,
            "rejections": dict(self.rejections),
        }


def build_plan(image: np.ndarray, pred: np.ndarray, cfg: HgConfig, rng) -> PseudoBreakPlan:
    """Select, search, swap and compose every keypoint of one image.

    Args:
        image (np.ndarray): Input image [H, W].
        pred (np.ndarray): Teacher pseudo-label [H, W] in [0, 1].
        cfg (HgConfig): Generator settings.
        rng (np.random.Generator): Source of keypoint draws and noise.

    Returns:
        PseudoBreakPlan: The plan; without accepted keypoints ``hard_image``
        equals ``image`` and ``weight_map`` is all ones.
    """
    if image.shape != pred.shape:
        raise InvalidArgumentError(f"image shape {image.shape} does not match pseudo-label {pred.shape}")
    candidates = select_keypoints(pred, cfg, rng)
    hard = image.copy()
    weights = np.ones(image.shape)
    plan = PseudoBreakPlan([], [], [], hard, weights, candidate_count=len(candidates))
    dynamic_range = float(image.max() - image.min())

    for keypoint in candidates:
        found = sliding_search(image, pred, keypoint, cfg, plan.fg_windows)
        if not found.accepted:
            plan.rejected_count += 1
            plan.rejections[found.reason] = plan.rejections.get(found.reason, 0) + 1
            continue
        fg, bg = found.foreground, found.background
        x_fg, pred_patch = image[fg.slices], np.clip(pred[fg.slices], 0.0, 1.0)
        content = variant_augment(x_fg, cfg.variant, rng, image[bg.slices], cfg, dynamic_range)
        edited = compose_pseudobreak(x_fg, content, pred_patch)
        hard[fg.slices] = edited
        weights[fg.slices][pred[fg.slices] > FOREGROUND_LEVEL] = HARD_WEIGHT
        plan.keypoints.append(keypoint)
        plan.fg_windows.append(fg)
        plan.bg_windows.append(bg)
        plan.patches.append((x_fg.copy(), edited))

    logger.debug(
        "pseudo-break plan: %d of %d keypoints accepted", len(plan.keypoints), len(candidates)
    )
    return plan
