#!/usr/bin/env python3
"""
Ablation Runner
===============

Trains and evaluates one run per grid cell and tabulates the results.

Grid file forms:
    {"cells": [{"mcfuse_enabled": false, "xobjalign_enabled": false}, ...]}
    {"axes": {"fusion.variant": ["add", "ca_plain"], "align.lambda_xobj": [0.2, 1.0]}}

Cell keys are TrainConfig fields; nested fields use dotted paths
(``fusion.fixed_k_value``) or nested objects. Cells run on a thread pool
capped by XVIEW_THREADS; rows always come back in grid order, and a failing
cell becomes a row of NaN metrics with its error recorded.
"""

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from copy import deepcopy
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from function.compute_data.dataset import Dataset, orientations_for
from function.compute_model.model import ObjectRelatorModel
from function.compute_train.evaluator import evaluate_by_orientation
from function.compute_train.trainer import RunReport, TrainConfig, Trainer, train
from function.errors import ConfigError
from function.io_utils import resolve_thread_count

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("run_id", "direction", "fusion", "align_metric", "lambda", "mcfuse", "xobjalign",
                 "iou", "le", "ca", "va", "n_samples")


@dataclass
class AblationRow:
    run_id: int
    overrides: Dict[str, Any]
    config: TrainConfig
    report: Optional[RunReport] = None
    error: Optional[str] = None

    def table_row(self) -> Dict[str, Any]:
        """Table cells; metrics come from the first evaluation mode the run was asked for."""
        cfg = self.config
        metrics = {"iou": math.nan, "le": math.nan, "ca": math.nan, "va": math.nan, "n_samples": 0}
        if self.report is not None and self.report.metrics:
            key = "joint" if cfg.direction == "joint" else cfg.direction
            first_mode = next(iter(self.report.metrics))
            chosen = self.report.metrics[first_mode].get(key)
            if chosen:
                metrics = {name: chosen[name] for name in metrics}
        return {
            "run_id": self.run_id,
            "direction": cfg.direction,
            "fusion": cfg.fusion.label(),
            "align_metric": cfg.align.metric,
            "lambda": cfg.align.lambda_xobj,
            "mcfuse": cfg.mcfuse_enabled,
            "xobjalign": cfg.xobjalign_enabled,
            **metrics,
        }


def expand_grid(grid: Union[Dict[str, Any], List[Dict[str, Any]]]) -> List[Dict[str, Any]]:
    if isinstance(grid, list):
        cells = grid
    elif isinstance(grid, dict) and "cells" in grid:
        cells = grid["cells"]
    elif isinstance(grid, dict) and "axes" in grid:
        axes = grid["axes"]
        keys = list(axes)
        cells = [dict(zip(keys, values)) for values in itertools.product(*(axes[k] for k in keys))]
    else:
        raise ConfigError("ablation grid needs a 'cells' list or an 'axes' mapping")
    if not cells:
        raise ConfigError("ablation grid is empty")
    if not all(isinstance(cell, dict) for cell in cells):
        raise ConfigError("every ablation cell must be an object of overrides")
    return [dict(cell) for cell in cells]


def _set_path(record: Dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node = record
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown override path {path!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown override path {path!r}")
    if isinstance(node[parts[-1]], dict) and isinstance(value, dict):
        for key, sub in value.items():
            _set_path(node[parts[-1]], key, sub)
    else:
        node[parts[-1]] = value


def apply_overrides(base: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    record = deepcopy(base.to_dict())
    for path, value in overrides.items():
        _set_path(record, path, value)
    return TrainConfig.from_dict(record)


def run_experiment(config: TrainConfig, dataset: Dataset, eval_modes: Sequence[str] = ("dual",),
                   split: str = "val", config_tree: Optional[Dict[str, Any]] = None,
                   trainer: Optional[Trainer] = None) -> Tuple[ObjectRelatorModel, Trainer, RunReport]:
    """Train one configuration (or finish ``trainer``'s schedule) and evaluate it in every requested mode."""
    if trainer is None:
        model, trainer, seconds = train(config, dataset)
    else:
        started = time.perf_counter()
        model = trainer.run()
        seconds = time.perf_counter() - started
    metrics = {}
    for mode in eval_modes:
        reports = evaluate_by_orientation(model, dataset, config.direction, mode, split)
        metrics[mode] = {name: report.to_dict() for name, report in reports.items()}
    val_pairs = [pair for o in orientations_for(config.direction) for pair in dataset.pairs(split, o)]
    report = RunReport(
        config=config_tree if config_tree is not None else {"train": config.to_dict()},
        losses=trainer.losses,
        metrics=metrics,
        completed_stage=trainer.completed_stage,
        k_lea=model.k_lea() if config.mcfuse_enabled and config.fusion.variant == "learnable_residual" else None,
        parameter_count=model.parameter_count(),
        alignment_gap=model.embedding_gap(val_pairs),
        wall_clock_s=seconds,
    )
    return model, trainer, report


def _run_cell(run_id: int, overrides: Dict[str, Any], base: TrainConfig, dataset: Dataset,
              eval_modes: Sequence[str]) -> AblationRow:
    try:
        config = apply_overrides(base, overrides)
    except (ConfigError, TypeError) as exc:
        logger.error(f"Ablation cell {run_id}: invalid overrides {overrides}: {exc}")
        return AblationRow(run_id, overrides, base, error=f"{type(exc).__name__}: {exc}")
    try:
        logger.info(f"Ablation cell {run_id}: {overrides}")
        _, _, report = run_experiment(config, dataset, eval_modes)
        return AblationRow(run_id, overrides, config, report=report)
    except Exception as exc:
        logger.error(f"Ablation cell {run_id} failed: {type(exc).__name__}: {exc}")
        return AblationRow(run_id, overrides, config, error=f"{type(exc).__name__}: {exc}")


def run_ablation(grid, base_config: TrainConfig, dataset: Dataset, eval_modes: Sequence[str] = ("dual",),
                 threads: Optional[int] = None) -> List[AblationRow]:
    cells = expand_grid(grid)
    workers = max(1, min(threads or resolve_thread_count(), len(cells)))
    started = time.perf_counter()
    logger.info(f"Running {len(cells)} ablation cells on {workers} worker(s)")

    def work(entry):
        run_id, overrides = entry
        return _run_cell(run_id, overrides, base_config, dataset, eval_modes)

    if workers == 1:
        rows = [work(entry) for entry in enumerate(cells)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(work, enumerate(cells)))
    failed = sum(row.error is not None for row in rows)
    logger.info(f"Ablation finished in {time.perf_counter() - started:.1f}s; {failed} failed cell(s)")
    return rows


def table_csv(rows: Sequence[AblationRow]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(TABLE_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.table_row())
    return buffer.getvalue()


def table_json(rows: Sequence[AblationRow], config_tree: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "config": config_tree,
        "columns": list(TABLE_COLUMNS),
        "rows": [row.table_row() for row in rows],
        "runs": [
            {
                "run_id": row.run_id,
                "overrides": row.overrides,
                "error": row.error,
                "report": row.report.to_dict() if row.report is not None else None,
            }
            for row in rows
        ],
    }
