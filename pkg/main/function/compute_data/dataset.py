"""
Dataset building, on-disk layout and loading.

Layout under the output directory::

    manifest.json
    seq_0000/scene.json                  per-frame scene + view records
    seq_0000/frame_00_ego.ppm            binary PPM (P6, maxval 255)
    seq_0000/frame_00_ego_mask.json      RLE-JSON
    seq_0000/frame_00_exo.ppm
    seq_0000/frame_00_exo_mask.json

Each sequence draws from its own RNG stream seeded by (seed, sequence_id), so
the thread pool used for generation never changes the bytes written.
"""

import io
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from function.compute_data.synthgen import (
    EgoExoFrame, PairSample, generate_sequence, resolve_generator_config,
)
from function.compute_mask.masks import BinaryMask, RleMask, rle_decode, rle_encode
from function.errors import ConfigError, FormatError
from function.io_utils import atomic_write_bytes, atomic_write_json, canonical_json, read_json, \
    resolve_thread_count

logger = logging.getLogger(__name__)

DIRECTIONS = ("ego2exo", "exo2ego", "joint")
MANIFEST_VERSION = 1


def orientations_for(direction: str) -> List[str]:
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    return ["ego2exo", "exo2ego"] if direction == "joint" else [direction]


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(quantize_image(image), mode="RGB").save(buffer, format="PPM")
    return buffer.getvalue()


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.format != "PPM":
            raise FormatError(f"{path} is not a PPM image")
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask: BinaryMask) -> None:
    atomic_write_json(path, rle_encode(mask).to_json())


def read_mask(path) -> BinaryMask:
    return rle_decode(RleMask.from_json(read_json(path)))


class Dataset:
    """Frames grouped into sequences per split, with oriented pair views."""

    def __init__(self, direction: str, sequences: Dict[str, List[List[EgoExoFrame]]],
                 manifest: Optional[Dict[str, Any]] = None, root: Optional[Path] = None):
        orientations_for(direction)
        self.direction = direction
        self._sequences = sequences
        self.manifest = manifest or {}
        self.root = root

    def sequences(self, split: str) -> List[List[EgoExoFrame]]:
        return self._sequences.get(split, [])

    def frames(self, split: str) -> List[EgoExoFrame]:
        return [frame for seq in self.sequences(split) for frame in seq]

    def size(self, split: str) -> int:
        return sum(len(seq) for seq in self.sequences(split))

    def orientations(self) -> List[str]:
        return orientations_for(self.direction)

    def pairs(self, split: str, orientation: str) -> List[PairSample]:
        return [frame.as_pair(orientation) for frame in self.frames(split)]

    def sequence_pairs(self, split: str, orientation: str) -> List[List[PairSample]]:
        return [[frame.as_pair(orientation) for frame in seq] for seq in self.sequences(split)]


def _split_plan(n_train: int, n_val: int, length: int) -> List[Tuple[int, str, int]]:
    """(sequence_id, split, n_frames) for every sequence, train first."""
    plan = []
    seq_id = 0
    for split, total in (("train", n_train), ("val", n_val)):
        remaining = total
        for _ in range(math.ceil(total / length)):
            n = min(length, remaining)
            plan.append((seq_id, split, n))
            remaining -= n
            seq_id += 1
    return plan


def _quantized(frame: EgoExoFrame) -> EgoExoFrame:
    return replace(frame,
                   ego_image=quantize_image(frame.ego_image) / 255.0,
                   exo_image=quantize_image(frame.exo_image) / 255.0)


def _generate_all(seed: int, plan, config: Dict[str, Any]):
    def work(entry):
        seq_id, split, n = entry
        frames, records = generate_sequence(seed, seq_id, n, config)
        return [_quantized(f) for f in frames], records

    workers = min(resolve_thread_count(), max(1, len(plan)))
    if workers == 1:
        return [work(entry) for entry in plan]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, plan))


def generate_dataset(seed: int, n_train: int, n_val: int, direction: str = "ego2exo",
                     config: Optional[Dict[str, Any]] = None) -> Dataset:
    """In-memory dataset with exactly the frames ``build_dataset`` would write."""
    if n_train < 1 or n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")
    orientations_for(direction)
    config = resolve_generator_config(config)
    plan = _split_plan(n_train, n_val, config['sequence_length'])
    results = _generate_all(seed, plan, config)
    sequences: Dict[str, List[List[EgoExoFrame]]] = {"train": [], "val": []}
    for (seq_id, split, _), (frames, _) in zip(plan, results):
        sequences[split].append(frames)
    return Dataset(direction, sequences)


def _frame_entry(seq_dir: str, frame: EgoExoFrame, direction: str) -> Dict[str, Any]:
    stem = f"{seq_dir}/frame_{frame.frame_id:02d}"
    ego = {"image": f"{stem}_ego.ppm", "mask": f"{stem}_ego_mask.json", "visible": frame.ego_mask.area() >= 1}
    exo = {"image": f"{stem}_exo.ppm", "mask": f"{stem}_exo_mask.json", "visible": frame.exo_mask.area() >= 1}
    query, target = (exo, ego) if direction == "exo2ego" else (ego, exo)
    return {
        "frame_id": frame.frame_id,
        "image_path": target["image"],
        "query_image_path": query["image"],
        "query_mask_path": query["mask"],
        "target_mask_path": target["mask"],
        "category": frame.category,
        "text_category": frame.text_category,
        "visible_query": query["visible"],
        "visible_target": target["visible"],
        "ego_image_path": ego["image"],
        "exo_image_path": exo["image"],
        "ego_mask_path": ego["mask"],
        "exo_mask_path": exo["mask"],
        "orientations": orientations_for(direction),
    }


def build_dataset(out_dir, seed: int, n_train: int, n_val: int, direction: str = "ego2exo",
                  config: Optional[Dict[str, Any]] = None,
                  run_config: Optional[Dict[str, Any]] = None) -> Tuple[Dict[str, Any], Dataset]:
    """
    Generate and write a dataset directory; returns (manifest, dataset).

    The tree is assembled in a sibling temporary directory and moved into
    place only once complete.
    """
    if n_train < 1 or n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")
    orientations_for(direction)
    config = resolve_generator_config(config)
    out_dir = Path(out_dir)
    plan = _split_plan(n_train, n_val, config['sequence_length'])
    results = _generate_all(seed, plan, config)

    try:
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=str(out_dir.parent)))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc

    try:
        manifest = {
            "format_version": MANIFEST_VERSION,
            "seed": int(seed),
            "config": {"generator": config, **({"run": run_config} if run_config else {})},
            "direction": direction,
            "n_train": int(n_train),
            "n_val": int(n_val),
            "sequences": [],
        }
        sequences: Dict[str, List[List[EgoExoFrame]]] = {"train": [], "val": []}
        for (seq_id, split, _), (frames, records) in zip(plan, results):
            seq_dir = f"seq_{seq_id:04d}"
            (staging / seq_dir).mkdir()
            atomic_write_json(staging / seq_dir / "scene.json", {"sequence_id": seq_id, "frames": records})
            entries = []
            for frame in frames:
                entry = _frame_entry(seq_dir, frame, direction)
                atomic_write_bytes(staging / entry["ego_image_path"], ppm_bytes(frame.ego_image))
                atomic_write_bytes(staging / entry["exo_image_path"], ppm_bytes(frame.exo_image))
                write_mask(staging / entry["ego_mask_path"], frame.ego_mask)
                write_mask(staging / entry["exo_mask_path"], frame.exo_mask)
                entries.append(entry)
            manifest["sequences"].append({"id": seq_id, "split": split,
                                          "scene_path": f"{seq_dir}/scene.json", "frames": entries})
            sequences[split].append(frames)
        atomic_write_bytes(staging / "manifest.json", canonical_json(manifest).encode("utf-8"))

        if out_dir.exists():
            logger.warning(f"Replacing existing dataset directory {out_dir}")
            shutil.rmtree(out_dir)
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    logger.info(f"Dataset written to {out_dir}: {n_train} train / {n_val} val frames, "
                f"{len(manifest['sequences'])} sequences")
    return manifest, Dataset(direction, sequences, manifest, out_dir)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('format_version')!r}")
    sequences: Dict[str, List[List[EgoExoFrame]]] = {"train": [], "val": []}
    for seq in manifest["sequences"]:
        frames = []
        for entry in seq["frames"]:
            frames.append(EgoExoFrame(
                ego_image=read_ppm(root / entry["ego_image_path"]),
                ego_mask=read_mask(root / entry["ego_mask_path"]),
                exo_image=read_ppm(root / entry["exo_image_path"]),
                exo_mask=read_mask(root / entry["exo_mask_path"]),
                category=int(entry["category"]),
                text_category=int(entry["text_category"]),
                frame_id=int(entry["frame_id"]),
                sequence_id=int(seq["id"]),
            ))
        sequences.setdefault(seq["split"], []).append(frames)
    return Dataset(manifest["direction"], sequences, manifest, root)
