"""
Online adaptation over an image stream and the ablation harness.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from topotta.adapt import augment
from topotta.adapt.adapter import AdaptState, adapt_sample
from topotta.autodiff.tensor import no_grad
from topotta.config import RunConfig, build_run_config
from topotta.errors import InvalidArgumentError
from topotta.metrics.topology import TopologyReport, aggregate, evaluate
from topotta.model.checkpoint import Checkpoint

logger = logging.getLogger(__name__)

# (name, image, label or None)
Sample = Tuple[str, np.ndarray, Optional[np.ndarray]]


@dataclass
class StreamResult:
    predictions: Dict[str, np.ndarray] = field(default_factory=dict)
    records: List[Dict] = field(default_factory=list)
    reports: List[TopologyReport] = field(default_factory=list)

    def summary(self) -> Dict:
        summary = aggregate(self.reports)
        em = [(r["em"][0], r["em_after"]) for r in self.records if r.get("em")]
        if em:
            summary["em_descent_fraction"] = float(np.mean([after < before for before, after in em]))
        return summary


def run_stream(
    checkpoint: Checkpoint,
    stream: Iterable[Sample],
    cfg: RunConfig,
    no_adapt: bool = False,
    progress: bool = False,
    on_sample: Optional[Callable[[Dict], None]] = None,
) -> StreamResult:
    """Process a stream strictly in order, adapting to every sample.

    With ``no_adapt`` the source model predicts every image unchanged.

    Args:
        checkpoint (Checkpoint): Source model.
        stream (Iterable[Sample]): (name, image, label) triples; label may be None.
        cfg (RunConfig): Run configuration.
        no_adapt (bool): Produce the source-only baseline.
        progress (bool): Show a tqdm bar over samples.
        on_sample (Callable[[Dict], None], optional): Receives each sample's log record.

    Returns:
        StreamResult: Probability maps, log records and reports for labelled samples.
    """
    result = StreamResult()
    source_model = checkpoint.to_model(requires_grad=False) if no_adapt else None
    state = None if no_adapt else AdaptState.from_checkpoint(checkpoint, cfg.adapt, cfg.seed)

    for name, image, label in tqdm(stream, desc="adapt", disable=not progress):
        if no_adapt:
            with no_grad():
                prob = augment.run_framed(source_model, image).data[0, 0]
            record = {"sample": len(result.records), "name": name, "stage_steps": [0, 0]}
        else:
            sample = adapt_sample(state, image, cfg.adapt, hg=cfg.hg, name=name)
            prob, record = sample.prob, sample.record
        result.predictions[name] = prob
        if label is not None:
            report = evaluate(prob, label, cfg.adapt.binarize_threshold, cfg.betti_patch, name)
            result.reports.append(report)
            record["report"] = report.to_dict()
        result.records.append(record)
        if on_sample is not None:
            on_sample(record)
    return result


# variant name -> (configuration overrides, source-only flag)
ABLATION_VARIANTS: Dict[str, Tuple[Dict, bool]] = {
    "source-only": ({}, True),
    "stage1-only": ({"stage2_enabled": False}, False),
    "stage2-only": ({"stage1_enabled": False}, False),
    "full": ({}, False),
    "hg-blur": ({"variant": "blur"}, False),
    "hg-noise": ({"variant": "noise"}, False),
    "hg-image-swap": ({"variant": "image-swap"}, False),
    "directions-central": ({"direction_set": "central"}, False),
    "directions-orthogonal": ({"direction_set": "orthogonal"}, False),
    "directions-diagonal": ({"direction_set": "diagonal"}, False),
}


def run_ablation(
    checkpoint: Checkpoint,
    samples: Sequence[Sample],
    cfg: RunConfig,
    variants: Optional[Sequence[str]] = None,
    progress: bool = False,
) -> List[Tuple[str, Dict]]:
    """Run every named variant over the same samples and summarise each.

    Raises:
        InvalidArgumentError: If a variant name is unknown.
    """
    names = list(ABLATION_VARIANTS) if variants is None else list(variants)
    unknown = [name for name in names if name not in ABLATION_VARIANTS]
    if unknown:
        raise InvalidArgumentError(f"unknown ablation variant(s): {', '.join(unknown)}")
    summaries = []
    for name in names:
        overrides, source_only = ABLATION_VARIANTS[name]
        variant_cfg = build_run_config({**cfg.to_flat(), **overrides})
        logger.info("ablation variant %s", name)
        result = run_stream(checkpoint, samples, variant_cfg, no_adapt=source_only, progress=progress)
        summaries.append((name, result.summary()))
    return summaries
