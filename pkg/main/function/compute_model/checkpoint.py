"""
Checkpoint save/load.

A checkpoint is one canonical JSON document: every named parameter, the
AdamW moments and step counter, the fusion/alignment settings, the trainer
RNG state, the last completed stage and the resolved run config with its
fingerprint. Floats are written with their shortest round-trip repr, so a
load restores every value bit for bit.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from function.compute_model.fusion import AlignConfig, FusionConfig
from function.compute_model.model import ModelConfig, ObjectRelatorModel
from function.errors import FormatError
from function.io_utils import atomic_write_text, canonical_json, fingerprint, read_json

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGES = (None, "s1", "s2")


@dataclass
class CheckpointState:
    completed_stage: Optional[str] = None
    rng_state: Optional[Dict[str, Any]] = None
    align: AlignConfig = field(default_factory=AlignConfig)
    config: Dict[str, Any] = field(default_factory=dict)
    config_fingerprint: str = ""


def _encode(array: np.ndarray) -> Dict[str, Any]:
    return {"shape": list(array.shape), "data": [float(x) for x in array.reshape(-1)]}


def _decode(record: Dict[str, Any]) -> np.ndarray:
    try:
        return np.array(record["data"], dtype=np.float64).reshape(record["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed tensor record: {exc}") from exc


def checkpoint_record(model: ObjectRelatorModel, state: CheckpointState) -> Dict[str, Any]:
    if state.completed_stage not in STAGES:
        raise FormatError(f"unknown stage {state.completed_stage!r}")
    params = model.params
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "fusion": model.fusion.to_dict(),
        "mcfuse_enabled": model.mcfuse_enabled,
        "align": state.align.to_dict(),
        "completed_stage": state.completed_stage,
        "rng_state": state.rng_state,
        "config": state.config,
        "config_fingerprint": state.config_fingerprint or fingerprint(state.config),
        "params": {name: _encode(t.data) for name, t in params.entries.items()},
        "optimizer": {
            "step_count": params.step_count,
            "moment1": {name: _encode(m) for name, m in params.moment1.items()},
            "moment2": {name: _encode(v) for name, v in params.moment2.items()},
        },
    }


def save_checkpoint(path, model: ObjectRelatorModel, state: Optional[CheckpointState] = None) -> Path:
    state = state or CheckpointState()
    out = atomic_write_text(path, canonical_json(checkpoint_record(model, state)))
    logger.info(f"Checkpoint written to {out} (stage {state.completed_stage})")
    return out


def restore_checkpoint(record: Dict[str, Any]) -> Tuple[ObjectRelatorModel, CheckpointState]:
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {record.get('format_version')!r}")
    try:
        model = ObjectRelatorModel(ModelConfig(**record["model"]), FusionConfig(**record["fusion"]),
                                   mcfuse_enabled=record["mcfuse_enabled"])
        names = set(record["params"])
        if names != set(model.params.names()):
            raise FormatError(f"parameter set mismatch: {sorted(names ^ set(model.params.names()))}")
        model.params.load_arrays({name: _decode(rec) for name, rec in record["params"].items()})
        optimizer = record["optimizer"]
        model.params.step_count = int(optimizer["step_count"])
        for name in model.params.names():
            model.params.moment1[name] = _decode(optimizer["moment1"][name])
            model.params.moment2[name] = _decode(optimizer["moment2"][name])
        state = CheckpointState(
            completed_stage=record["completed_stage"],
            rng_state=record["rng_state"],
            align=AlignConfig(**record["align"]),
            config=record["config"],
            config_fingerprint=record["config_fingerprint"],
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing {exc}") from exc
    return model, state


def load_checkpoint(path) -> Tuple[ObjectRelatorModel, CheckpointState]:
    model, state = restore_checkpoint(read_json(path))
    logger.info(f"Loaded checkpoint {path} (stage {state.completed_stage}, "
                f"{model.parameter_count()} parameters)")
    return model, state
