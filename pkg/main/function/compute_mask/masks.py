"""
Binary masks and their run-length form.

RLE convention: runs alternate background/foreground over the row-major
pixel order and always start with a background run, which may be 0 long.
On disk a mask is the JSON object ``{"w": int, "h": int, "runs": [...]}``.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy import ndimage

from function.errors import DimensionError, FormatError

# 4-connectivity structuring element used for boundary extraction
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel object mask; ``bits`` is a (height, width) boolean array."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise DimensionError(
                f"mask bits {bits.shape} do not match height x width {(self.height, self.width)}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, array) -> "BinaryMask":
        arr = np.asarray(array, dtype=bool)
        if arr.ndim != 2:
            raise DimensionError(f"mask array must be 2-D, got {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], bits=arr)

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width=width, height=height, bits=np.zeros((height, width), dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def centroid(self) -> Tuple[float, float]:
        """(x, y) mean foreground pixel coordinate."""
        ys, xs = np.nonzero(self.bits)
        if xs.size == 0:
            raise ValueError("centroid of an empty mask")
        return float(xs.mean()), float(ys.mean())

    def complement(self) -> "BinaryMask":
        return BinaryMask(self.width, self.height, ~self.bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.width, self.height, self.bits.tobytes()))


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    runs: Tuple[int, ...]

    def validate(self) -> None:
        if any(r < 0 for r in self.runs):
            raise FormatError("negative run length")
        if sum(self.runs) != self.width * self.height:
            raise FormatError(
                f"runs sum to {sum(self.runs)}, expected {self.width * self.height}")
        if any(r == 0 for r in self.runs[1:]):
            raise FormatError("only the leading run may be zero-length")

    def to_json(self) -> Dict[str, Any]:
        return {"w": int(self.width), "h": int(self.height), "runs": [int(r) for r in self.runs]}

    @classmethod
    def from_json(cls, record: Dict[str, Any]) -> "RleMask":
        try:
            rle = cls(width=int(record["w"]), height=int(record["h"]),
                      runs=tuple(int(r) for r in record["runs"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed RLE record: {exc}") from exc
        rle.validate()
        return rle


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.bits.reshape(-1)
    if flat.size == 0:
        return RleMask(mask.width, mask.height, (0,))
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs: List[int] = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(mask.width, mask.height, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    rle.validate()
    values = np.zeros(len(rle.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.runs)
    return BinaryMask(rle.width, rle.height, flat.reshape(rle.height, rle.width))


def boundary(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (the frame counts as outside)."""
    interior = ndimage.binary_erosion(mask.bits, structure=CROSS, border_value=0)
    return mask.bits & ~interior


def translate(mask: BinaryMask, dy: int, dx: int) -> BinaryMask:
    """Shift by an integer offset; pixels leaving the frame are dropped."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    if src_y0 < src_y1 and src_x0 < src_x1:
        out[src_y0 + dy:src_y1 + dy, src_x0 + dx:src_x1 + dx] = mask.bits[src_y0:src_y1, src_x0:src_x1]
    return BinaryMask(w, h, out)
