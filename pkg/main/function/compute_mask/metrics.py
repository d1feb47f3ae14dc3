#!/usr/bin/env python3
"""
Cross-View Correspondence Metrics
=================================

Key Features:
1. IoU - intersection over union, 1.0 when both masks are empty
2. Location Error (LE) - centroid distance over the image diagonal, in [0, 1]
3. Contour Accuracy (CA) - boundary F-measure after centroid alignment,
   4-connected boundaries matched within a Chebyshev tolerance
4. Visibility Accuracy (VA) - percentage of matching visibility decisions

LE and CA are undefined when either mask is empty; ``MetricsAccumulator``
leaves those samples out of the respective means and counts them.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Sequence

import numpy as np
from scipy import ndimage

from function.compute_mask.masks import BinaryMask, boundary, translate
from function.errors import DimensionError, UndefinedMetricError

logger = logging.getLogger(__name__)

LE_NORMALIZER = "diagonal"
DEFAULT_TOLERANCE_PX = 1
DEFAULT_VISIBILITY_THRESHOLD = 1


def _check_same_shape(pred: BinaryMask, gt: BinaryMask) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"mask dimensions differ: {pred.shape} vs {gt.shape}")


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    _check_same_shape(pred, gt)
    union = int(np.logical_or(pred.bits, gt.bits).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred.bits, gt.bits).sum()) / union


def location_error(pred: BinaryMask, gt: BinaryMask) -> float:
    _check_same_shape(pred, gt)
    if pred.is_empty() or gt.is_empty():
        raise UndefinedMetricError("location error needs two nonempty masks")
    px, py = pred.centroid()
    gx, gy = gt.centroid()
    return math.hypot(px - gx, py - gy) / math.hypot(gt.width, gt.height)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def align_centroids(pred: BinaryMask, gt: BinaryMask) -> BinaryMask:
    """Translate ``pred`` so its centroid lands on the nearest-integer offset to gt's."""
    px, py = pred.centroid()
    gx, gy = gt.centroid()
    return translate(pred, _round_half_up(gy - py), _round_half_up(gx - px))


def boundary_match_counts(pred: BinaryMask, gt: BinaryMask,
                          tolerance_px: int = DEFAULT_TOLERANCE_PX) -> Dict[str, int]:
    """Matched/total boundary pixel counts for both masks (no alignment applied)."""
    _check_same_shape(pred, gt)
    pred_b = boundary(pred)
    gt_b = boundary(gt)
    window = np.ones((2 * tolerance_px + 1, 2 * tolerance_px + 1), dtype=bool)
    gt_zone = ndimage.binary_dilation(gt_b, structure=window) if gt_b.any() else gt_b
    pred_zone = ndimage.binary_dilation(pred_b, structure=window) if pred_b.any() else pred_b
    return {
        "pred_boundary": int(pred_b.sum()),
        "gt_boundary": int(gt_b.sum()),
        "pred_matched": int((pred_b & gt_zone).sum()),
        "gt_matched": int((gt_b & pred_zone).sum()),
    }


def contour_accuracy(pred: BinaryMask, gt: BinaryMask,
                     tolerance_px: int = DEFAULT_TOLERANCE_PX) -> float:
    _check_same_shape(pred, gt)
    if pred.is_empty() or gt.is_empty():
        raise UndefinedMetricError("contour accuracy needs two nonempty masks")
    counts = boundary_match_counts(align_centroids(pred, gt), gt, tolerance_px)
    if counts["pred_boundary"] == 0 and counts["gt_boundary"] == 0:
        return 1.0
    if counts["pred_boundary"] == 0 or counts["gt_boundary"] == 0:
        return 0.0
    precision = counts["pred_matched"] / counts["pred_boundary"]
    recall = counts["gt_matched"] / counts["gt_boundary"]
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def visibility_accuracy(pred_visible: Sequence[bool], gt_visible: Sequence[bool]) -> float:
    if len(pred_visible) != len(gt_visible):
        raise DimensionError(
            f"visibility lists differ in length: {len(pred_visible)} vs {len(gt_visible)}")
    if len(gt_visible) == 0:
        raise ValueError("visibility accuracy needs at least one sample")
    matches = sum(bool(p) == bool(g) for p, g in zip(pred_visible, gt_visible))
    return 100.0 * matches / len(gt_visible)


def predicted_visible(pred: BinaryMask, threshold: int = DEFAULT_VISIBILITY_THRESHOLD) -> bool:
    return pred.area() >= threshold


@dataclass
class MetricsReport:
    iou: float
    le: float
    ca: float
    va: float
    n_samples: int
    n_visible_pairs: int
    n_le_undefined: int = 0
    n_ca_undefined: int = 0
    le_normalizer: str = LE_NORMALIZER

    def to_dict(self) -> Dict[str, Any]:
        # schema keys first, in this order
        return {
            "iou": self.iou,
            "le": self.le,
            "ca": self.ca,
            "va": self.va,
            "n_samples": self.n_samples,
            "n_visible_pairs": self.n_visible_pairs,
            "n_le_undefined": self.n_le_undefined,
            "n_ca_undefined": self.n_ca_undefined,
            "le_normalizer": self.le_normalizer,
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "MetricsReport":
        return cls(**{k: record[k] for k in cls.__dataclass_fields__ if k in record})


class MetricsAccumulator:
    """
    Sum-then-divide aggregation over evaluation samples.

    IoU and CA/LE are averaged over pairs visible in both views; VA covers
    every added sample.
    """

    def __init__(self, tolerance_px: int = DEFAULT_TOLERANCE_PX,
                 visibility_threshold: int = DEFAULT_VISIBILITY_THRESHOLD):
        self.tolerance_px = tolerance_px
        self.visibility_threshold = visibility_threshold
        self.iou_sum = 0.0
        self.le_sum = 0.0
        self.ca_sum = 0.0
        self.n_le = 0
        self.n_ca = 0
        self.n_visible_pairs = 0
        self.n_le_undefined = 0
        self.n_ca_undefined = 0
        self.pred_visible = []
        self.gt_visible = []

    def add(self, pred: BinaryMask, gt: BinaryMask, visible_query: bool = True) -> None:
        _check_same_shape(pred, gt)
        gt_vis = not gt.is_empty()
        self.pred_visible.append(predicted_visible(pred, self.visibility_threshold))
        self.gt_visible.append(gt_vis)
        if not (visible_query and gt_vis):
            return
        self.n_visible_pairs += 1
        self.iou_sum += iou(pred, gt)
        try:
            self.le_sum += location_error(pred, gt)
            self.n_le += 1
        except UndefinedMetricError:
            self.n_le_undefined += 1
        try:
            self.ca_sum += contour_accuracy(pred, gt, self.tolerance_px)
            self.n_ca += 1
        except UndefinedMetricError:
            self.n_ca_undefined += 1

    def report(self) -> MetricsReport:
        n = len(self.gt_visible)
        if n == 0:
            logger.warning("metrics requested for an empty evaluation set")
            return MetricsReport(float("nan"), float("nan"), float("nan"), float("nan"), 0, 0)
        pairs = self.n_visible_pairs
        return MetricsReport(
            iou=self.iou_sum / pairs if pairs else float("nan"),
            le=self.le_sum / self.n_le if self.n_le else float("nan"),
            ca=self.ca_sum / self.n_ca if self.n_ca else float("nan"),
            va=visibility_accuracy(self.pred_visible, self.gt_visible),
            n_samples=n,
            n_visible_pairs=pairs,
            n_le_undefined=self.n_le_undefined,
            n_ca_undefined=self.n_ca_undefined,
        )
