#!/usr/bin/env python3
"""
Two-Stage Trainer
=================

Stage 1 initialises MCFuse alone on a small leading slice of the training
set with the mask loss. Stage 2 trains everything but the patch encoder with
the full loss (mask loss plus weighted XObjAlign).

Key Features:
1. Freezing by parameter name; frozen tensors stay bitwise unchanged
2. Gradient accumulation over a batch, one AdamW step per batch
3. Cosine learning-rate decay over each stage's optimizer steps
4. Joint direction: batches are built from whole frames (both orientations),
   so every batch mixes ego2exo and exo2ego 1:1; a frame with an unusable
   view is dropped from both orientations
5. Resumable: the shuffling RNG state is part of the checkpoint
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from function.compute_data.dataset import Dataset, orientations_for
from function.compute_data.synthgen import PairSample
from function.compute_model.checkpoint import CheckpointState
from function.compute_model.fusion import AlignConfig, FusionConfig, fusion_params
from function.compute_model.model import ENCODER_PREFIX, MCFUSE_PREFIX, ModelConfig, ObjectRelatorModel
from function.compute_tensor.optimizer import ParamStore, adamw_step, cosine_lr
from function.compute_tensor.tensor_core import scale
from function.errors import ConfigError, StateError
from function.io_utils import fingerprint

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("cosine", "constant")


@dataclass
class TrainConfig:
    direction: str = "ego2exo"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 42
    lr_s1: float = 2e-4
    lr_s2: float = 2e-4
    epochs_s1: int = 4
    epochs_s2: int = 4
    s1_fraction: float = 1.0 / 20.0
    batch_size: int = 12
    freeze_encoder_s2: bool = True
    xobjalign_enabled: bool = True
    mcfuse_enabled: bool = True
    two_stage: bool = True
    lr_schedule: str = "cosine"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    show_progress: bool = False

    def __post_init__(self):
        orientations_for(self.direction)
        if not 0.0 < self.s1_fraction <= 1.0:
            raise ConfigError(f"s1_fraction must be in (0, 1], got {self.s1_fraction}")
        if self.epochs_s1 < 0 or self.epochs_s2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_s1 < 0 or self.lr_s2 < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(record) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        values = dict(record)
        nested = {"fusion": FusionConfig, "align": AlignConfig, "model": ModelConfig}
        for key, kind in nested.items():
            if key in values and isinstance(values[key], dict):
                sub_known = {f.name for f in fields(kind)}
                bad = sorted(set(values[key]) - sub_known)
                if bad:
                    raise ConfigError(f"unknown {key} config keys: {bad}")
                values[key] = kind(**values[key])
        return cls(**values)


@dataclass
class RunReport:
    config: Dict[str, Any]
    losses: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    metrics: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    completed_stage: Optional[str] = None
    k_lea: Optional[float] = None
    parameter_count: int = 0
    alignment_gap: Optional[float] = None
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        record = {
            "config": self.config,
            "config_fingerprint": fingerprint(self.config),
            "losses": self.losses,
            "metrics": self.metrics,
            "completed_stage": self.completed_stage,
            "k_lea": self.k_lea,
            "parameter_count": self.parameter_count,
            "alignment_gap": self.alignment_gap,
        }
        if include_timing:
            record["wall_clock_s"] = self.wall_clock_s
        return record


def build_model(config: TrainConfig) -> ObjectRelatorModel:
    return ObjectRelatorModel(config.model, config.fusion, mcfuse_enabled=config.mcfuse_enabled,
                              seed=config.seed)


def training_groups(dataset: Dataset, direction: str, split: str = "train") -> List[List[PairSample]]:
    """Per-frame groups of oriented pairs in manifest order (two per frame for joint)."""
    orientations = orientations_for(direction)
    return [[frame.as_pair(o) for o in orientations] for frame in dataset.frames(split)]


def usable_groups(groups: List[List[PairSample]]) -> List[List[PairSample]]:
    """Frames whose every oriented pair has a visible query; a joint frame is kept or dropped whole."""
    return [g for g in groups if g and all(s.visible_query for s in g)]


def stage1_subset(samples: List[PairSample], fraction: float) -> List[PairSample]:
    """The first ceil(fraction * n) samples with a visible query, n counting every sample."""
    count = math.ceil(fraction * len(samples))
    if count < 1:
        raise ConfigError("stage-1 subset is empty")
    usable = [s for s in samples if s.visible_query]
    if len(usable) < count:
        raise ConfigError(f"stage-1 subset needs {count} samples with a visible query, "
                          f"only {len(usable)} exist")
    return usable[:count]


def stage1_groups(groups: List[List[PairSample]], fraction: float) -> List[List[PairSample]]:
    """
    The stage-1 subset regrouped by frame.

    Whole usable frames are taken in manifest order; when the sample count is
    odd for a joint run, the last frame contributes its first orientation only.
    """
    flat = [s for g in groups for s in g]
    count = len(stage1_subset(flat, fraction))
    picked, taken = [], 0
    for group in usable_groups(groups):
        if taken >= count:
            break
        part = group[:count - taken]
        picked.append(part)
        taken += len(part)
    if taken < count:
        raise ConfigError(f"stage-1 subset needs {count} samples from whole usable frames, only {taken} exist")
    return picked


def epoch_batches(groups: List[List[PairSample]], order: Iterable[int], batch_size: int) -> List[List[PairSample]]:
    """Batches of whole groups; a joint batch holds ``batch_size // 2`` frames (at least one)."""
    order = list(order)
    per_batch = max(1, batch_size // max(len(g) for g in groups))
    return [[s for i in order[k:k + per_batch] for s in groups[i]] for k in range(0, len(order), per_batch)]


def stage1_names(model: ObjectRelatorModel) -> List[str]:
    if not model.mcfuse_enabled:
        return []
    return fusion_params(model.fusion)


def stage2_names(model: ObjectRelatorModel, freeze_encoder: bool) -> List[str]:
    unused_fusion = set(model.params.names(MCFUSE_PREFIX)) - set(stage1_names(model))
    names = []
    for name in model.params.names():
        if name in unused_fusion:
            continue
        if freeze_encoder and name.startswith(ENCODER_PREFIX):
            continue
        names.append(name)
    return names


@contextmanager
def trainable_only(params: ParamStore, names: Iterable[str]):
    """Record gradients for ``names`` only; everything else is treated as a constant."""
    selected = set(names)
    for name, tensor in params.entries.items():
        tensor.requires_grad = name in selected
    try:
        yield
    finally:
        for tensor in params.entries.values():
            tensor.requires_grad = True


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset, model: Optional[ObjectRelatorModel] = None,
                 rng_state: Optional[Dict[str, Any]] = None, completed_stage: Optional[str] = None):
        self.config = config
        self.dataset = dataset
        self.model = model or build_model(config)
        self._check_compatible()
        self.rng = np.random.default_rng([int(config.seed), 1])
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.completed_stage = completed_stage
        self.stage_samples: Dict[str, int] = {}
        self.losses: Dict[str, Dict[str, List[float]]] = {
            "s1": {"l_mask": []},
            "s2": {"l_mask": [], "l_xobj": [], "total": []},
        }

    def _check_compatible(self) -> None:
        frames = self.dataset.frames("train")
        if not frames:
            raise ConfigError("training split is empty")
        cfg = self.model.config
        s = cfg.image_size
        if frames[0].ego_image.shape != (s, s, 3):
            raise ConfigError(f"dataset images {frames[0].ego_image.shape} do not fit a {s}x{s} model")
        top = max(f.text_category for f in frames)
        if top >= cfg.num_categories:
            raise ConfigError(f"dataset text category {top} exceeds model K={cfg.num_categories}")

    # ---------------------------------------------------------------- stages
    def _run_stage(self, stage: str, groups: List[List[PairSample]], names: List[str], lr: float,
                   epochs: int, use_alignment: bool) -> None:
        cfg = self.config
        params = self.model.params
        params.reset_optimizer()

        groups = [g for g in groups if g]
        n_samples = sum(len(g) for g in groups)
        if n_samples == 0:
            raise ConfigError(f"stage {stage}: no training sample has a visible query")
        self.stage_samples[stage] = n_samples
        steps_per_epoch = len(epoch_batches(groups, range(len(groups)), cfg.batch_size))
        total_steps = steps_per_epoch * epochs
        logger.info(f"Stage {stage}: {n_samples} samples, {len(names)} trainable tensors, "
                    f"{epochs} epochs x {steps_per_epoch} steps, lr {lr:g}")

        step = 0
        with trainable_only(params, names):
            for epoch in range(epochs):
                order = self.rng.permutation(len(groups))
                sums = {"l_mask": 0.0, "l_xobj": 0.0, "total": 0.0}
                n_xobj = 0
                for batch in tqdm(epoch_batches(groups, order, cfg.batch_size),
                                  desc=f"{stage} epoch {epoch + 1}/{epochs}",
                                  disable=not cfg.show_progress, leave=False):
                    params.zero_grad()
                    for sample in batch:
                        result = self.model.forward(sample, cfg.align, use_alignment=use_alignment)
                        loss = result.total if use_alignment else result.l_mask
                        scale(loss, 1.0 / len(batch)).backward()
                        sums["l_mask"] += result.l_mask.item()
                        sums["total"] += loss.item()
                        if result.l_xobj is not None:
                            sums["l_xobj"] += result.l_xobj.item()
                            n_xobj += 1
                    step_lr = cosine_lr(lr, step, total_steps) if cfg.lr_schedule == "cosine" else lr
                    adamw_step(params, step_lr, betas=(cfg.beta1, cfg.beta2),
                               weight_decay=cfg.weight_decay, eps=cfg.adam_eps, names=names)
                    step += 1

                history = self.losses[stage]
                history["l_mask"].append(sums["l_mask"] / n_samples)
                if stage == "s2":
                    history["l_xobj"].append(sums["l_xobj"] / n_xobj if n_xobj else float("nan"))
                    history["total"].append(sums["total"] / n_samples)
                logger.info(f"Stage {stage} epoch {epoch + 1}/{epochs}: "
                            f"L_mask {history['l_mask'][-1]:.4f}"
                            + (f", L_xobj {history['l_xobj'][-1]:.4f}" if stage == "s2" and n_xobj else ""))

    def stage1(self) -> ObjectRelatorModel:
        cfg = self.config
        if not cfg.mcfuse_enabled:
            raise StateError("stage 1 only exists when MCFuse is enabled")
        names = stage1_names(self.model)
        subset = stage1_groups(training_groups(self.dataset, cfg.direction), cfg.s1_fraction)
        if names:
            self._run_stage("s1", subset, names, cfg.lr_s1, cfg.epochs_s1, use_alignment=False)
            logger.info(f"Stage s1 done on {self.stage_samples['s1']} samples; k_lea = {self.model.k_lea():.4f}")
        else:
            logger.info(f"Fusion variant {cfg.fusion.variant} has no parameters; stage s1 is a no-op")
        self.completed_stage = "s1"
        return self.model

    def stage2(self) -> ObjectRelatorModel:
        cfg = self.config
        if self.needs_stage1() and self.completed_stage is None:
            raise StateError("stage 2 requires a completed stage 1")
        names = stage2_names(self.model, cfg.freeze_encoder_s2)
        groups = training_groups(self.dataset, cfg.direction)
        usable = usable_groups(groups)
        if len(usable) < len(groups):
            logger.warning(f"Stage s2: {len(groups) - len(usable)} of {len(groups)} training frames "
                           f"lack a visible query and are left out")
        self._run_stage("s2", usable, names, cfg.lr_s2, cfg.epochs_s2, use_alignment=cfg.xobjalign_enabled)
        self.completed_stage = "s2"
        return self.model

    def needs_stage1(self) -> bool:
        return self.config.mcfuse_enabled and self.config.two_stage

    def run(self) -> ObjectRelatorModel:
        if self.needs_stage1() and self.completed_stage is None:
            self.stage1()
        if self.completed_stage != "s2":
            self.stage2()
        return self.model

    def checkpoint_state(self, config_tree: Optional[Dict[str, Any]] = None) -> CheckpointState:
        tree = config_tree if config_tree is not None else {"train": self.config.to_dict()}
        return CheckpointState(
            completed_stage=self.completed_stage,
            rng_state=self.rng.bit_generator.state,
            align=self.config.align,
            config=tree,
            config_fingerprint=fingerprint(tree),
        )


def train_stage1(config: TrainConfig, dataset: Dataset, model: ObjectRelatorModel) -> ObjectRelatorModel:
    return Trainer(config, dataset, model).stage1()


def train_stage2(config: TrainConfig, dataset: Dataset, model: ObjectRelatorModel,
                 stage1_done: bool = True) -> ObjectRelatorModel:
    return Trainer(config, dataset, model, completed_stage="s1" if stage1_done else None).stage2()


def train(config: TrainConfig, dataset: Dataset,
          model: Optional[ObjectRelatorModel] = None) -> Tuple[ObjectRelatorModel, Trainer, float]:
    """Full schedule; returns the model, the trainer (losses, RNG) and wall-clock seconds."""
    started = time.perf_counter()
    trainer = Trainer(config, dataset, model)
    trainer.run()
    return trainer.model, trainer, time.perf_counter() - started
