"""
Evaluation modes.

    dual         text + visual condition (the full pipeline)
    visual_only  text withheld, E_con = E_vis*
    memory       inside each sequence the first usable frame is prompted with
                 its true query mask; every later frame is prompted with the
                 previous frame's target image and predicted target mask

Anything with a ``predict_logits(sample, use_text) -> (H, W) array`` method
can be evaluated, which keeps oracle and stub predictors trivial.

A sample without a usable query prompt is never shown to the predictor. It
is scored as an empty prediction: it counts toward VA and ``n_samples`` but
not toward IoU, LE or CA.
"""

import logging
from dataclasses import replace
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from tqdm import tqdm

from function.compute_data.dataset import Dataset, orientations_for
from function.compute_data.synthgen import PairSample
from function.compute_mask.masks import BinaryMask
from function.compute_mask.metrics import (
    DEFAULT_TOLERANCE_PX, DEFAULT_VISIBILITY_THRESHOLD, MetricsAccumulator, MetricsReport,
)
from function.compute_model.model import logits_to_mask
from function.errors import ConfigError

logger = logging.getLogger(__name__)

EVAL_MODES = ("dual", "visual_only", "memory")


class Predictor(Protocol):
    def predict_logits(self, sample: PairSample, use_text: bool = True) -> np.ndarray:
        ...


def _add_unprompted(sample: PairSample, acc: MetricsAccumulator) -> None:
    w, h = sample.target_mask.width, sample.target_mask.height
    acc.add(BinaryMask.empty(w, h), sample.target_mask, visible_query=False)


def _add_pairs(predictor: Predictor, samples: Sequence[PairSample], acc: MetricsAccumulator,
               use_text: bool, show_progress: bool) -> int:
    unprompted = 0
    for sample in tqdm(samples, desc="eval", disable=not show_progress, leave=False):
        if not sample.visible_query:
            _add_unprompted(sample, acc)
            unprompted += 1
            continue
        pred = logits_to_mask(predictor.predict_logits(sample, use_text=use_text))
        acc.add(pred, sample.target_mask, visible_query=True)
    return unprompted


def _add_memory_sequence(predictor: Predictor, sequence: List[PairSample], acc: MetricsAccumulator) -> int:
    start = next((i for i, s in enumerate(sequence) if s.visible_query), len(sequence))
    for sample in sequence[:start]:
        _add_unprompted(sample, acc)
    if start == len(sequence):
        return start

    first = sequence[start]
    prompt_image, prompt_mask = first.query_image, first.query_mask
    for t, sample in enumerate(sequence[start:]):
        query = sample if t == 0 else replace(
            sample, query_image=prompt_image, query_mask=prompt_mask,
            text_category=first.text_category, visible_query=True)
        pred = logits_to_mask(predictor.predict_logits(query, use_text=True))
        acc.add(pred, sample.target_mask, visible_query=True)
        if pred.is_empty():
            logger.warning(f"memory: empty prediction at sequence {sample.sequence_id} frame "
                           f"{sample.frame_id}; keeping the previous prompt")
            continue
        prompt_image, prompt_mask = sample.target_image, pred
    return start


def evaluate_samples(predictor: Predictor, samples: Sequence[PairSample], mode: str = "dual",
                     tolerance_px: int = DEFAULT_TOLERANCE_PX,
                     visibility_threshold: int = DEFAULT_VISIBILITY_THRESHOLD,
                     show_progress: bool = False) -> MetricsReport:
    """Frame-level evaluation of an explicit sample list (dual or visual_only)."""
    if mode not in ("dual", "visual_only"):
        raise ConfigError(f"evaluate_samples supports dual and visual_only, got {mode!r}")
    acc = MetricsAccumulator(tolerance_px, visibility_threshold)
    unprompted = _add_pairs(predictor, samples, acc, mode == "dual", show_progress)
    if unprompted:
        logger.info(f"{unprompted} samples without a visible query were scored as empty predictions")
    return acc.report()


def evaluate(predictor: Predictor, dataset: Dataset, mode: str = "dual", split: str = "val",
             orientations: Optional[Sequence[str]] = None,
             tolerance_px: int = DEFAULT_TOLERANCE_PX,
             visibility_threshold: int = DEFAULT_VISIBILITY_THRESHOLD,
             show_progress: bool = False) -> MetricsReport:
    """Pooled metrics over the requested orientations (default: the dataset's)."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")
    orientations = list(orientations or dataset.orientations())
    for orientation in orientations:
        orientations_for(orientation)

    acc = MetricsAccumulator(tolerance_px, visibility_threshold)
    unprompted = 0
    for orientation in orientations:
        if mode == "memory":
            for sequence in dataset.sequence_pairs(split, orientation):
                unprompted += _add_memory_sequence(predictor, sequence, acc)
        else:
            unprompted += _add_pairs(predictor, dataset.pairs(split, orientation), acc,
                                  use_text=(mode == "dual"), show_progress=show_progress)
    if unprompted:
        logger.info(f"{mode}: {unprompted} samples without a usable query prompt were scored as empty predictions")
    report = acc.report()
    logger.info(f"{mode} {'+'.join(orientations)} on {split}: IoU {report.iou:.4f}, LE {report.le:.4f}, "
                f"CA {report.ca:.4f}, VA {report.va:.2f} over {report.n_samples} samples")
    return report


def evaluate_by_orientation(predictor: Predictor, dataset: Dataset, direction: str, mode: str = "dual",
                            split: str = "val", **kwargs) -> Dict[str, MetricsReport]:
    """One report per orientation of ``direction``; joint also gets a pooled ``joint`` entry."""
    reports = {o: evaluate(predictor, dataset, mode, split, [o], **kwargs) for o in orientations_for(direction)}
    if direction == "joint":
        reports["joint"] = evaluate(predictor, dataset, mode, split, orientations_for(direction), **kwargs)
    return reports
