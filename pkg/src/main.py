#!/usr/bin/env python3
"""
Swin Transformer toolkit for lung-CT nodule classification and segmentation
"""

import json
import sys
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add project root to sys.path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import click
from loguru import logger
from rich.console import Console
from rich.table import Table

from src.core.config import TASKS, apply_overrides, load_config
from src.core.errors import SwinCTError, UsageError
from src.core.runner import ExperimentRunner
from src.metrics.report import validate_report
from src.training.engine import history_summary
from src.training.recipes import RECIPES
from src.utils.logger import setup_logging

INTERNAL_ERROR = 5


@click.group()
@click.option('--config', '-c', 'config_path', default=None, help='RunConfig file (YAML or JSON).')
@click.option('--seed', type=int, default=None, help='Seed for every random choice of the run.')
@click.option('--out', 'output_dir', default=None, help='Output directory (overrides output_dir).')
@click.option('--json', 'as_json', is_flag=True, help='Machine-readable output on stdout.')
@click.option('--verbose', '-v', is_flag=True, help='Debug logging.')
@click.pass_context
def cli(ctx, config_path, seed, output_dir, as_json, verbose):
    """Swin Transformer classification and segmentation of lung-CT slices."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, output_dir=output_dir, as_json=as_json, verbose=verbose)


# --- Helper Functions for Commands ---

def _resolve_config(ctx, overrides: Optional[Dict[str, Any]] = None):
    opts = ctx.obj
    merged: Dict[str, Any] = {}
    if opts["seed"] is not None:
        merged["seed"] = opts["seed"]
    if opts["output_dir"] is not None:
        merged["output_dir"] = opts["output_dir"]
    for section, values in (overrides or {}).items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            merged[section] = values
    return load_config(opts["config_path"], merged)


def _setup_logging(ctx, cfg) -> None:
    setup_logging(cfg.logging.file, "DEBUG" if ctx.obj["verbose"] else cfg.logging.level, seed=cfg.seed)


def _load_config_and_logging(ctx, overrides: Optional[Dict[str, Any]] = None):
    cfg = _resolve_config(ctx, overrides)
    _setup_logging(ctx, cfg)
    return cfg


def _runner(ctx, cfg) -> ExperimentRunner:
    return ExperimentRunner(cfg, show_progress=not ctx.obj["as_json"])


def _emit(ctx, data: Any) -> None:
    if ctx.obj["as_json"]:
        click.echo(json.dumps(data, indent=2))


def handle_errors(command):
    """Map SwinCTError subclasses to their exit codes; anything else is internal."""
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SwinCTError as e:
            logger.error(f"❌ {type(e).__name__}: {e}")
            sys.exit(e.exit_code)
        except Exception as e:
            logger.exception(f"❌ Internal error: {e}")
            sys.exit(INTERNAL_ERROR)
    return wrapper


def _parse_ratio(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise UsageError(f"--ratio expects three numbers like 8:1:1, got '{text}'")
    if len(parts) != 3:
        raise UsageError(f"--ratio expects three numbers like 8:1:1, got '{text}'")
    return parts


def _parse_sizes(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--sizes expects comma-separated integers, got '{text}'")


# --- Individual Commands ---

@cli.command()
@click.option('--phantom', type=int, default=None, help='Generate N synthetic volumes instead of reading --input.')
@click.option('--input', 'input_dir', type=click.Path(), default=None, help='Directory of *.swv volumes and annotations.jsonl.')
@click.option('--task', type=click.Choice(TASKS), default=None, help='classification or segmentation.')
@click.option('--ratio', default=None, help='Split ratios train:val:test (positive:negative ratios for classification).')
@click.option('--paper-splits', is_flag=True, help='Slice-level splits without the volume-leakage guard.')
@click.option('--data', 'dataset_dir', type=click.Path(), default=None, help='Dataset directory (default <out>/dataset).')
@click.pass_context
@handle_errors
def prepare(ctx, phantom, input_dir, task, ratio, paper_splits, dataset_dir):
    """Build slice datasets and their train/val/test split manifest."""
    ratios = _parse_ratio(ratio)
    cfg = _resolve_config(ctx, {"pipeline": {"task": task, "paper_splits": True if paper_splits else None}})
    if ratios is not None:
        key = "cls_ratios" if cfg.pipeline.task == "classification" else "seg_ratios"
        cfg = apply_overrides(cfg, {"pipeline": {key: ratios}})
    _setup_logging(ctx, cfg)
    logger.info(f"1️⃣ Preparing {cfg.pipeline.task} data...")
    manifest = _runner(ctx, cfg).prepare(phantom, input_dir, Path(dataset_dir) if dataset_dir else None)
    report = manifest.report()
    if ctx.obj["as_json"]:
        _emit(ctx, report)
    else:
        for name, counts in report["counts"].items():
            logger.info(f"   {name}: {counts['total']} records, achieved {report['achieved'][name]}")


@cli.command()
@click.option('--recipe', type=click.Choice(sorted(RECIPES)), default=None, help='Training recipe.')
@click.option('--variant', default=None, help='Model variant (swin-t, swin-s, swin-b, swin-toy).')
@click.option('--init', 'init', type=click.Path(), default=None, help='Checkpoint to initialise the backbone from.')
@click.option('--epochs', type=int, default=None, help='Override the recipe length in epochs.')
@click.option('--iterations', type=int, default=None, help='Override the recipe length in iterations.')
@click.option('--batch-size', type=int, default=None, help='Override the recipe batch size.')
@click.option('--curves', is_flag=True, help='Emit SVG plots of the curve log.')
@click.option('--data', 'dataset_dir', type=click.Path(), default=None, help='Dataset directory (default <out>/dataset).')
@click.pass_context
@handle_errors
def train(ctx, recipe, variant, init, epochs, iterations, batch_size, curves, dataset_dir):
    """Train a model with one of the named recipes."""
    cfg = _load_config_and_logging(ctx, {
        "model": {"variant": variant},
        "train": {"recipe": recipe, "epochs": epochs, "iterations": iterations, "batch_size": batch_size},
    })
    logger.info(f"2️⃣ Training with recipe '{cfg.train.recipe}'...")
    result = _runner(ctx, cfg).train(Path(dataset_dir) if dataset_dir else None, init, curves)
    summary = history_summary(result.curves)
    if ctx.obj["as_json"]:
        _emit(ctx, {
            "curves": str(result.curves_path),
            "checkpoints": {k: str(v) for k, v in result.checkpoints.items()},
            "best_step": result.best_step,
            "best_metric": result.best_metric,
            "summary": summary,
        })
    else:
        logger.info(f"   last values: {summary}")


@cli.command(name="eval")
@click.option('--checkpoint', default='best', help="Checkpoint directory, or best / last / ema of the latest run.")
@click.option('--split', type=click.Choice(["train", "val", "test"]), default='test', help='Dataset split.')
@click.option('--export', is_flag=True, help='Write predicted probabilities (and masks) as SWT1 tensors.')
@click.option('--data', 'dataset_dir', type=click.Path(), default=None, help='Dataset directory (default <out>/dataset).')
@click.pass_context
@handle_errors
def evaluate(ctx, checkpoint, split, dataset_dir, export):
    """Evaluate a checkpoint and write a metrics report."""
    cfg = _load_config_and_logging(ctx)
    logger.info(f"3️⃣ Evaluating {checkpoint} on {split}...")
    report = _runner(ctx, cfg).evaluate(checkpoint, split, Path(dataset_dir) if dataset_dir else None, export)
    data = validate_report(report.to_dict())
    if ctx.obj["as_json"]:
        _emit(ctx, data)
    else:
        for key, value in data.items():
            logger.info(f"   {key}: {value}")


@cli.command()
@click.option('--variant', default=None, help='Model variant.')
@click.option('--res', 'resolution', type=int, default=None, help='Input resolution.')
@click.option('--all', 'all_variants', is_flag=True, help='Every ImageNet-scale variant.')
@click.option('--head', type=click.Choice(["classification", "segmentation", "none"]), default='classification')
@click.option('--num-classes', type=int, default=1000, help='Head classes.')
@click.option('--plot', is_flag=True, help='Emit params/FLOPs bar charts.')
@click.pass_context
@handle_errors
def count(ctx, variant, resolution, all_variants, head, num_classes, plot):
    """Analytic parameter and FLOP counts (1 MAC = 1 FLOP)."""
    cfg = _load_config_and_logging(ctx)
    reports = _runner(ctx, cfg).count(variant, resolution, all_variants, plot, head, num_classes)
    if ctx.obj["as_json"]:
        _emit(ctx, [r.to_dict() for r in reports])
        return
    table = Table(title="Model complexity")
    for column in ("variant", "resolution", "params", "FLOPs", "MSA attention", "W-MSA attention"):
        table.add_column(column, justify="right" if column != "variant" else "left")
    for r in reports:
        table.add_row(r.variant, str(r.resolution), f"{r.total_params / 1e6:.2f}M", f"{r.total_flops / 1e9:.2f}G",
                      f"{r.attention['msa'] / 1e9:.2f}G", f"{r.attention['wmsa'] / 1e9:.2f}G")
    Console().print(table)


@cli.command()
@click.option('--sizes', default='14,28,56,112', help='Comma-separated grid edges h = w.')
@click.option('--dim', type=int, default=96, help='Channel dim C.')
@click.option('--window', type=int, default=7, help='Window size M.')
@click.pass_context
@handle_errors
def bench(ctx, sizes, dim, window):
    """Time global vs windowed attention and fit log-log slopes."""
    cfg = _load_config_and_logging(ctx)
    result = _runner(ctx, cfg).bench(_parse_sizes(sizes), dim, window)
    if ctx.obj["as_json"]:
        _emit(ctx, {"summary": result.summary(), "table": result.table.to_dict(orient="records")})
    else:
        Console().print(result.table.to_string(index=False))
        logger.info(f"📈 window slope {result.slopes['window']:.2f}, global slope {result.slopes['global']:.2f}")


@cli.command()
@click.argument('runs', nargs=-1, required=True)
@click.option('--prefix', default='overlay', help='File name prefix of the plots.')
@click.pass_context
@handle_errors
def curves(ctx, runs, prefix):
    """Overlay curve logs; each RUN is LABEL=PATH or a bare PATH."""
    cfg = _load_config_and_logging(ctx)
    labelled = {}
    for run in runs:
        label, _, path = run.rpartition("=")
        labelled[label or Path(path).parent.name] = path
    written = _runner(ctx, cfg).curves(labelled, prefix)
    _emit(ctx, [str(p) for p in written])
    logger.info(f"🖼️ {len(written)} plots written")


if __name__ == '__main__':
    cli()
