"""
Side-by-side overlay images for inspecting predictions.

Layout (height = image size, width = 2 x image size):
    left   target view; predicted mask filled with red (255, 0, 0) at 50%
           alpha, then the ground-truth boundary drawn in green (0, 255, 0)
    right  query view with the query-mask boundary drawn in yellow (255, 255, 0)

Blending is integer arithmetic on the 8-bit image, ``(pixel + colour) // 2``,
so the output bytes are fully determined by the inputs.
"""

import io
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from function.compute_data.dataset import quantize_image
from function.compute_data.synthgen import PairSample
from function.compute_mask.masks import BinaryMask, boundary
from function.errors import DimensionError
from function.io_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

PREDICTION_FILL = np.array([255, 0, 0], dtype=np.uint16)
GT_CONTOUR = np.array([0, 255, 0], dtype=np.uint8)
QUERY_CONTOUR = np.array([255, 255, 0], dtype=np.uint8)


def overlay_array(sample: PairSample, predicted: BinaryMask) -> np.ndarray:
    """(H, 2W, 3) uint8 overlay."""
    target = quantize_image(sample.target_image)
    query = quantize_image(sample.query_image)
    h, w = target.shape[:2]
    if predicted.shape != (h, w):
        raise DimensionError(f"predicted mask {predicted.shape} does not match target image {(h, w)}")
    if sample.target_mask.shape != (h, w) or sample.query_mask.shape != query.shape[:2]:
        raise DimensionError("sample masks do not match their images")

    left = target.copy()
    fill = predicted.bits
    left[fill] = ((left[fill].astype(np.uint16) + PREDICTION_FILL) // 2).astype(np.uint8)
    left[boundary(sample.target_mask)] = GT_CONTOUR

    right = query.copy()
    right[boundary(sample.query_mask)] = QUERY_CONTOUR
    return np.concatenate([left, right], axis=1)


def render_overlay(sample: PairSample, predicted: BinaryMask, out_path=None) -> np.ndarray:
    """Build the overlay and, when ``out_path`` is given, write it as binary PPM."""
    canvas = overlay_array(sample, predicted)
    if out_path is not None:
        buffer = io.BytesIO()
        Image.fromarray(canvas, mode="RGB").save(buffer, format="PPM")
        atomic_write_bytes(out_path, buffer.getvalue())
        logger.info(f"Overlay written to {Path(out_path)}")
    return canvas
