"""
Two-stage test-time adaptation of a wrapped segmentation model.

Stage 1 resets the router to zero and tunes it alone by entropy
minimisation. Stage 2 keeps the router fixed and trains the student on
pseudo-break hard samples against an augmentation-averaged EMA teacher;
both models share the router of the current sample.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from topotta.adapt import augment
from topotta.adapt.augment import IDENTITY, Transform
from topotta.autodiff.optim import Adam
from topotta.autodiff.tensor import Tensor, backward, no_grad
from topotta.config import AdaptConfig, HgConfig
from topotta.errors import (
    AdaptationDivergedError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalError,
)
from topotta.hardgen.topohg import HARD_WEIGHT, build_plan
from topotta.model.checkpoint import Checkpoint
from topotta.model.segnet import SegModel
from topotta.model.topomdc import RouterParams, attach_router, wrap_encoder

logger = logging.getLogger(__name__)


def _clip(values: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(values, eps, 1.0 - eps)


def entropy_loss(pred: Tensor, log_eps: float = 1e-7) -> Tensor:
    """Binary entropy of the two channels (p, 1 - p), summed over pixels."""
    p = pred.clamp(log_eps, 1.0 - log_eps)
    return -(p * p.log() + (1.0 - p) * (1.0 - p).log()).sum()


def weighted_consistency_loss(teacher_pred, student_pred: Tensor, weights, log_eps: float = 1e-7) -> Tensor:
    """Weighted symmetric cross entropy between teacher and student maps.

    The teacher map is a constant: gradients reach the student only.

    Raises:
        InvalidArgumentError: If the three maps differ in shape.
    """
    t = teacher_pred.data if isinstance(teacher_pred, Tensor) else np.asarray(teacher_pred, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (t.shape == student_pred.shape == weights.shape):
        raise InvalidArgumentError(
            f"consistency loss needs equal shapes, got {t.shape}, {student_pred.shape}, {weights.shape}"
        )
    t = _clip(t, log_eps)
    s = student_pred.clamp(log_eps, 1.0 - log_eps)
    log_t, log_1t = np.log(t), np.log(1.0 - t)
    per_pixel = t * s.log() + (1.0 - t) * (1.0 - s).log() + s * log_t + (1.0 - s) * log_1t
    return -(weights * per_pixel).sum()


def ema_update(teacher: SegModel, student: SegModel, rate: float) -> SegModel:
    """Blend student parameters into the teacher in place; statistics are copied."""
    if teacher.parameter_directory() != student.parameter_directory() or set(teacher.buffers) != set(
        student.buffers
    ):
        raise InvalidStateError("teacher and student parameter directories differ")
    for name, tensor in teacher.params.items():
        tensor.data[...] = rate * tensor.data + (1.0 - rate) * student.params[name].data
    for name, buffer in student.buffers.items():
        teacher.buffers[name] = buffer.copy()
    return teacher


def _fresh_models(source: Checkpoint, cfg: AdaptConfig):
    student, router = wrap_encoder(source.to_model(requires_grad=True), cfg.grid_n, cfg.directions)
    teacher = attach_router(source.to_model(requires_grad=False), router)
    optimizer = Adam(
        list(student.params.values()), cfg.lr_stage2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    return student, teacher, router, optimizer


@dataclass
class AdaptState:
    """Everything that persists along one adaptation stream.

    Attributes:
        student (SegModel): Wrapped model trained by gradients.
        teacher (SegModel): Wrapped model updated only by EMA.
        router (RouterParams): Router shared by student and teacher.
        theta_optimizer (Adam): Stage 2 optimiser; its moments persist across samples.
        rng (np.random.Generator): Source of augmentation and keypoint draws.
        sample_count (int): Samples processed so far.
    """

    source: Checkpoint
    cfg: AdaptConfig
    student: SegModel
    teacher: SegModel
    router: RouterParams
    theta_optimizer: Adam
    rng: np.random.Generator
    sample_count: int = 0

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, cfg: AdaptConfig, seed: int = 0) -> "AdaptState":
        return cls(checkpoint, cfg, *_fresh_models(checkpoint, cfg), rng=np.random.default_rng(seed))

    def reset_to_source(self):
        """Restore student, teacher and optimiser moments from the source checkpoint."""
        self.student, self.teacher, self.router, self.theta_optimizer = _fresh_models(self.source, self.cfg)


@dataclass
class StageRecord:
    losses: List[float] = field(default_factory=list)
    skipped: bool = False
    extra: Dict = field(default_factory=dict)


def _diverged(stage: str, e: NumericalError) -> AdaptationDivergedError:
    return AdaptationDivergedError(f"{stage} diverged: {e.message}")


def student_prediction(state: AdaptState, image: np.ndarray) -> Tensor:
    return augment.run_framed(state.student, image, IDENTITY)


def stage1(state: AdaptState, image: np.ndarray, cfg: AdaptConfig) -> StageRecord:
    """Reset the router and take ``cfg.steps_per_stage`` entropy-minimisation steps.

    With ``stage1_scope == "router"`` only the router moves; with ``"all"``
    the student parameters are stepped too, at ``lr_stage2``.

    Raises:
        AdaptationDivergedError: If a loss or gradient is not finite.
    """
    state.router.reset_to_zero()
    record = StageRecord()
    if not cfg.stage1_enabled:
        record.skipped = True
        return record

    joint = cfg.stage1_scope == "all"
    state.router.delta.requires_grad = True
    state.student.set_requires_grad(joint)
    router_optimizer = Adam([state.router.delta], cfg.lr_stage1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    try:
        for _ in range(cfg.steps_per_stage):
            loss = entropy_loss(student_prediction(state, image), cfg.log_eps)
            backward(loss)
            router_optimizer.step()
            if joint:
                state.theta_optimizer.step()
            record.losses.append(loss.item())
        with no_grad():
            record.extra["em_after"] = entropy_loss(student_prediction(state, image), cfg.log_eps).item()
    except NumericalError as e:
        raise _diverged("stage 1", e)
    finally:
        state.router.delta.grad = None
        state.student.zero_grad()
    return record


def teacher_pseudolabel(
    state: AdaptState,
    image: np.ndarray,
    cfg: AdaptConfig,
    rng,
    transforms: Optional[Sequence[Transform]] = None,
) -> np.ndarray:
    """Average of the teacher's predictions over augmented rounds, in the image frame.

    Args:
        transforms (Sequence[Transform], optional): Explicit rounds; when
            omitted ``cfg.teacher_rounds`` transforms are drawn from ``rng``.
    """
    if transforms is None:
        transforms = [Transform.sample(rng, cfg.scales) for _ in range(cfg.teacher_rounds)]
    total = np.zeros(image.shape)
    with no_grad():
        for transform in transforms:
            total += augment.run_framed(state.teacher, image, transform).data[0, 0]
    return total / len(transforms)


def stage2(
    state: AdaptState,
    image: np.ndarray,
    cfg: AdaptConfig,
    rng,
    hg: HgConfig = HgConfig(),
) -> StageRecord:
    """Train the student on pseudo-break samples against the teacher, then EMA.

    Raises:
        AdaptationDivergedError: If a loss or gradient is not finite.
    """
    record = StageRecord(extra={"keypoints": [], "rejected": [], "hard_gap": []})
    if not cfg.stage2_enabled:
        record.skipped = True
        return record

    state.router.delta.requires_grad = False
    state.student.set_requires_grad(True)
    try:
        for _ in range(cfg.steps_per_stage):
            target = teacher_pseudolabel(state, image, cfg, rng)
            plan = build_plan(image, target, hg, rng)
            rounds = [Transform.sample(rng, cfg.scales) for _ in range(cfg.student_rounds)]
            pred = augment.run_framed(state.student, plan.hard_image, rounds[0])
            for transform in rounds[1:]:
                pred = pred + augment.run_framed(state.student, plan.hard_image, transform)
            if len(rounds) > 1:
                pred = pred * (1.0 / len(rounds))
            loss = weighted_consistency_loss(target[None, None], pred, plan.weight_map[None, None], cfg.log_eps)
            hard = plan.weight_map == HARD_WEIGHT
            gap = float(np.abs(pred.data[0, 0] - target)[hard].mean()) if hard.any() else None
            backward(loss)
            state.theta_optimizer.step()
            ema_update(state.teacher, state.student, cfg.ema_rate)
            record.losses.append(loss.item())
            record.extra["keypoints"].append(len(plan.keypoints))
            record.extra["rejected"].append(plan.rejected_count)
            record.extra["hard_gap"].append(gap)
    except NumericalError as e:
        raise _diverged("stage 2", e)
    finally:
        state.student.zero_grad()
    return record


@dataclass
class SampleResult:
    prob: np.ndarray
    record: Dict


def adapt_sample(
    state: AdaptState,
    image: np.ndarray,
    cfg: AdaptConfig,
    rng=None,
    hg: HgConfig = HgConfig(),
    name: str = "",
) -> SampleResult:
    """Adapt to one image and return the student's prediction for it.

    Episodic runs (``cfg.continual`` false) restart every sample from the
    source checkpoint; continual runs carry student, teacher and optimiser
    moments over. The router is reset for every sample either way.
    """
    rng = state.rng if rng is None else rng
    if not cfg.continual and state.sample_count:
        state.reset_to_source()

    first = stage1(state, image, cfg)
    second = stage2(state, image, cfg, rng, hg)
    with no_grad():
        prob = student_prediction(state, image).data[0, 0]

    record = {
        "sample": state.sample_count,
        "name": name,
        "stage_steps": [
            0 if first.skipped else cfg.steps_per_stage,
            0 if second.skipped else cfg.steps_per_stage,
        ],
        "em": first.losses,
        "em_after": first.extra.get("em_after"),
        "ce": second.losses,
        "keypoints": second.extra["keypoints"],
        "rejected": second.extra["rejected"],
        "hard_gap": second.extra["hard_gap"],
    }
    state.sample_count += 1
    logger.debug("sample %d adapted: em %s ce %s", record["sample"], record["em"], record["ce"])
    return SampleResult(prob, record)
