#!/usr/bin/env python3
"""
Cross-View Object Relator command line
======================================

Subcommands:
    gen-data  --config c.json --out data/                 write a synthetic dataset
    train     --config c.json [--data data/] --out run/   two-stage training + evaluation
    eval      --checkpoint run/checkpoint.json --mode dual --out r.json
    ablate    --config grid.json --out table.csv          one run per grid cell
    infer     --checkpoint ... --out masks/               predicted masks (RLE-JSON) + index
    render    --checkpoint ... --index 3 --out o.ppm      side-by-side overlay

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Without ``--data`` the dataset is regenerated in memory from the config seed.
"""

import argparse
import logging
import sys
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from icecream import ic

from function.compute_data.dataset import Dataset, build_dataset, generate_dataset, load_dataset, \
    orientations_for, write_mask
from function.compute_data.synthgen import DEFAULT_GENERATOR_CONFIG, resolve_generator_config
from function.compute_mask.masks import BinaryMask
from function.compute_model.checkpoint import load_checkpoint, save_checkpoint
from function.compute_model.model import ModelConfig
from function.compute_render.curves import plot_loss_curves
from function.compute_render.overlay import render_overlay
from function.compute_train.ablation import run_ablation, run_experiment, table_csv, table_json
from function.compute_train.evaluator import EVAL_MODES, evaluate, evaluate_by_orientation
from function.compute_train.trainer import TrainConfig, Trainer
from function.errors import ConfigError, XViewError
from function.io_utils import atomic_write_json, atomic_write_text, read_json

logger = logging.getLogger("xview")

_TRAIN_DEFAULTS = {k: v for k, v in TrainConfig().to_dict().items() if k not in ("model", "seed", "direction")}

DEFAULT_CLI_CONFIG: Dict[str, Any] = {
    "seed": 42,
    "generator": dict(DEFAULT_GENERATOR_CONFIG),
    "dataset": {"n_train": 2000, "n_val": 500, "direction": "ego2exo"},
    "model": ModelConfig().to_dict(),
    "train": _TRAIN_DEFAULTS,
    "eval": {"mode": "dual", "split": "val", "tolerance_px": 1, "visibility_threshold": 1},
    "outputs": {"plot_curves": False},
    "grid": None,
}


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\nerror: {message}\n")
        raise UsageError(message)


# =============================================================================
# Configuration
# =============================================================================

def _merge(defaults: Dict[str, Any], overrides: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    merged = deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(merged[key], dict) and isinstance(value, dict) and key not in ("grid",):
            merged[key] = _merge(merged[key], value, f"{where}.")
        else:
            merged[key] = value
    return merged


def resolve_config(user: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """Defaults with the user's tree merged over them; every field validated."""
    if user is not None and not isinstance(user, dict):
        raise ConfigError("config file must hold a JSON object")
    tree = _merge(DEFAULT_CLI_CONFIG, user or {})
    if seed is not None:
        tree["seed"] = int(seed)
    tree["generator"] = resolve_generator_config(tree["generator"])
    orientations_for(tree["dataset"]["direction"])
    if tree["eval"]["mode"] not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {tree['eval']['mode']!r}")
    if tree["model"]["num_categories"] < tree["generator"]["num_categories"]:
        raise ConfigError("model num_categories is smaller than the generator's")
    train_config(tree)
    return tree


def load_config(path: Optional[str], seed: Optional[int] = None) -> Dict[str, Any]:
    if path is None:
        return resolve_config(None, seed)
    try:
        user = read_json(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return resolve_config(user, seed)


def train_config(tree: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**tree["train"], "model": tree["model"], "seed": tree["seed"],
                                      "direction": tree["dataset"]["direction"]})
    except TypeError as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def _dataset(args, tree: Dict[str, Any]) -> Dataset:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    ds = tree["dataset"]
    logger.info(f"No --data given; generating {ds['n_train']}/{ds['n_val']} frames in memory")
    return generate_dataset(tree["seed"], ds["n_train"], ds["n_val"], ds["direction"], tree["generator"])


# =============================================================================
# Commands
# =============================================================================

def cmd_gen_data(args, tree) -> None:
    ds = tree["dataset"]
    build_dataset(args.out, tree["seed"], ds["n_train"], ds["n_val"], ds["direction"],
                  tree["generator"], run_config=tree)


def cmd_train(args, tree) -> None:
    config = train_config(tree)
    dataset = _dataset(args, tree)
    trainer = None
    if args.checkpoint:
        model, state = load_checkpoint(args.checkpoint)
        trainer = Trainer(config, dataset, model, rng_state=state.rng_state,
                          completed_stage=state.completed_stage)
    _, trainer, report = run_experiment(config, dataset, eval_modes=(tree["eval"]["mode"],),
                                        split=tree["eval"]["split"], config_tree=tree, trainer=trainer)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint.json", trainer.model, trainer.checkpoint_state(tree))
    atomic_write_json(out / "report.json", report.to_dict())
    atomic_write_json(out / "timing.json", {"wall_clock_s": report.wall_clock_s})
    if tree["outputs"]["plot_curves"]:
        plot_loss_curves(report.losses, out / "loss_curves.png")
    ic(report.metrics)


def _load_model(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(args.checkpoint)
    return model


def cmd_eval(args, tree) -> None:
    model = _load_model(args)
    mode = args.mode or tree["eval"]["mode"]
    ev = tree["eval"]
    dataset = _dataset(args, tree)
    direction = tree["dataset"]["direction"]
    kwargs = {"tolerance_px": ev["tolerance_px"], "visibility_threshold": ev["visibility_threshold"]}
    pooled = evaluate(model, dataset, mode, ev["split"], orientations_for(direction), **kwargs)
    by_orientation = evaluate_by_orientation(model, dataset, direction, mode, ev["split"], **kwargs)
    record = pooled.to_dict()
    record.update({
        "mode": mode,
        "split": ev["split"],
        "direction": direction,
        "by_orientation": {name: rep.to_dict() for name, rep in by_orientation.items()},
        "config": tree,
    })
    atomic_write_json(args.out, record)
    ic(record["iou"], record["va"])


def cmd_ablate(args, tree) -> None:
    if not tree["grid"]:
        raise ConfigError("ablate needs a 'grid' entry ({'cells': [...]} or {'axes': {...}}) in the config")
    dataset = _dataset(args, tree)
    rows = run_ablation(tree["grid"], train_config(tree), dataset, eval_modes=(tree["eval"]["mode"],))
    out = Path(args.out)
    atomic_write_text(out, table_csv(rows))
    atomic_write_json(out.with_suffix(".json"), table_json(rows, tree))
    atomic_write_json(out.with_name(out.stem + ".config.json"), tree)


def cmd_infer(args, tree) -> None:
    model = _load_model(args)
    mode = args.mode or tree["eval"]["mode"]
    if mode == "memory":
        raise ConfigError("infer writes frame-level predictions; use dual or visual_only")
    dataset = _dataset(args, tree)
    split = tree["eval"]["split"]
    out = Path(args.out)
    index: List[Dict[str, Any]] = []
    for orientation in orientations_for(tree["dataset"]["direction"]):
        for sample in dataset.pairs(split, orientation):
            size = sample.target_mask.shape
            if sample.visible_query:
                pred = model.predict(sample, use_text=(mode == "dual"))
            else:
                pred = BinaryMask.empty(size[1], size[0])
            rel = f"{orientation}/seq_{sample.sequence_id:04d}_frame_{sample.frame_id:02d}.json"
            write_mask(out / rel, pred)
            index.append({"orientation": orientation, "sequence_id": sample.sequence_id,
                          "frame_id": sample.frame_id, "mask_path": rel, "area": pred.area(),
                          "visible_query": sample.visible_query})
    atomic_write_json(out / "index.json", {"mode": mode, "split": split, "config": tree, "masks": index})
    logger.info(f"Wrote {len(index)} predicted masks under {out}")


def cmd_render(args, tree) -> None:
    model = _load_model(args)
    dataset = _dataset(args, tree)
    orientation = orientations_for(tree["dataset"]["direction"])[0]
    pairs = dataset.pairs(tree["eval"]["split"], orientation)
    if not 0 <= args.index < len(pairs):
        raise UsageError(f"--index must be in [0, {len(pairs)})")
    sample = pairs[args.index]
    if sample.visible_query:
        pred = model.predict(sample, use_text=(args.mode or tree["eval"]["mode"]) != "visual_only")
    else:
        pred = BinaryMask.empty(sample.target_mask.width, sample.target_mask.height)
    out = Path(args.out)
    render_overlay(sample, pred, out)
    atomic_write_json(out.with_name(out.name + ".config.json"),
                      {"index": args.index, "orientation": orientation, "config": tree})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="xview", description="Cross-view object relator toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging and icecream dumps")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name != "gen-data":
            p.add_argument("--data", help="dataset directory written by gen-data")
        if name in ("train", "eval", "infer", "render"):
            p.add_argument("--checkpoint", help="checkpoint file (train: resume from it)")
        if name in ("eval", "infer", "render"):
            p.add_argument("--mode", choices=EVAL_MODES)
        if name == "render":
            p.add_argument("--index", type=int, default=0, help="validation sample index")
    return parser


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)
    ic.configureOutput(prefix="xview | ", outputFunction=logger.debug)
    if verbose:
        ic.enable()
    else:
        ic.disable()


def dispatch(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)

    _setup_logging(args.verbose)
    try:
        tree = load_config(args.config, args.seed)
        ic(tree)
        COMMANDS[args.command](args, tree)
    except (UsageError, ConfigError) as exc:
        logger.error(f"{args.command}: {exc}")
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (XViewError, OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        logger.error(f"{args.command} failed: {type(exc).__name__}: {exc}")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
