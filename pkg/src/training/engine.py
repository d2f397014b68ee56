"""
Training loop and evaluation.

Curve log columns:
    step,epoch,lr,train_loss[,val_top1,val_top5 | ,val_miou,val_macc,val_aacc]
Validation columns are filled on evaluation steps only.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn

from src.autodiff.serialization import write_tensor
from src.core.errors import NumericError, UsageError
from src.metrics.classification import top_k_accuracy
from src.metrics.confusion import ConfusionMatrix, accumulate, macc_aacc, miou
from src.metrics.report import MetricsReport
from src.models.checkpoint import save_checkpoint
from src.models.layers import Module
from src.training.data import SliceDataset
from src.training.ema import EmaState, ema_update, ema_weights
from src.training.optim import Adam, AdamW, clip_grad_norm
from src.training.recipes import Recipe
from src.training.schedules import lr_at
from src.utils.helpers import atomic_write_json, atomic_write_text

CURVES = "curves.csv"
DIAGNOSTIC = "nan_diagnostic.json"
BASE_COLUMNS = ["step", "epoch", "lr", "train_loss"]
VAL_COLUMNS = {
    "classification": ["val_top1", "val_top5"],
    "segmentation": ["val_miou", "val_macc", "val_aacc"],
}
SELECTION_METRIC = {"classification": "val_top1", "segmentation": "val_miou"}
EVAL_BATCH = 32


@dataclass
class TrainResult:
    model: Module
    curves: pd.DataFrame
    curves_path: Path
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    best_step: Optional[int] = None
    best_metric: Optional[float] = None


def evaluate(model: Module, dataset: SliceDataset, batch_size: int = EVAL_BATCH) -> Dict[str, object]:
    """Validation metrics over a whole dataset; the last incomplete batch is kept."""
    batches = dataset.batches(batch_size, shuffle=False, drop_last=False)
    if dataset.task == "classification":
        probs = np.concatenate([model.predict(images) for images, _ in batches])
        labels = dataset.targets
        return {"val_top1": top_k_accuracy(probs, labels, 1), "val_top5": top_k_accuracy(probs, labels, 5)}
    cm = ConfusionMatrix(model.cfg.num_classes)
    for images, masks in batches:
        preds, _ = model.predict(images)
        cm = accumulate(cm, preds, masks)
    per_class, mean_iou = miou(cm)
    macc, aacc = macc_aacc(cm)
    return {"val_miou": mean_iou, "val_macc": macc, "val_aacc": aacc, "per_class_iou": per_class}


def evaluate_report(model: Module, dataset: SliceDataset, flops: int = 0) -> MetricsReport:
    metrics = evaluate(model, dataset)
    report = MetricsReport(params=model.num_parameters(), flops=int(flops))
    if dataset.task == "classification":
        report.top1, report.top5 = metrics["val_top1"], metrics["val_top5"]
    else:
        report.miou, report.macc, report.aacc = metrics["val_miou"], metrics["val_macc"], metrics["val_aacc"]
        report.per_class_iou = list(metrics["per_class_iou"])
    return report


def export_predictions(model: Module, dataset: SliceDataset, directory: Union[str, Path],
                       batch_size: int = EVAL_BATCH) -> Dict[str, Path]:
    """Class probabilities as float32 SWT1, plus predicted masks as uint8 SWT1 for segmentation."""
    directory = Path(directory)
    batches = dataset.batches(batch_size, shuffle=False, drop_last=False)
    written = {}
    if dataset.task == "classification":
        probs = np.concatenate([model.predict(images) for images, _ in batches])
    else:
        masks, probs = zip(*(model.predict(images) for images, _ in batches))
        written["masks"] = write_tensor(directory / "masks.swt", np.concatenate(masks).astype(np.uint8))
        probs = np.concatenate(probs)
    written["probs"] = write_tensor(directory / "probs.swt", probs.astype(np.float32))
    logger.info(f"📤 Predictions for {len(dataset)} samples written to {directory}")
    return written


def _finite_or_text(value: float):
    return value if math.isfinite(value) else str(value)


def _norm(array: Optional[np.ndarray]) -> Optional[float]:
    if array is None:
        return None
    with np.errstate(over="ignore", invalid="ignore"):
        return _finite_or_text(float(np.sqrt(np.sum(np.square(array, dtype=np.float64)))))


def first_non_finite(model: Module) -> Optional[str]:
    return next((n for n, p in model.named_parameters() if not np.all(np.isfinite(p.data))), None)


def write_diagnostic(directory: Path, model: Module, step: int, lr: float, loss: float,
                     parameter: Optional[str]) -> Path:
    """Snapshot of weight and gradient norms at the step training halted."""
    params = {
        name: {"weight_norm": _norm(p.data), "grad_norm": _norm(p.grad)}
        for name, p in model.named_parameters()
    }
    snapshot = {"step": step, "lr": lr, "loss": _finite_or_text(loss), "parameter": parameter,
                "parameters": params}
    return atomic_write_json(directory / DIAGNOSTIC, snapshot)


class Trainer:
    """Runs one recipe on one model; see `run_recipe`."""

    def __init__(self, model: Module, train_set: SliceDataset, recipe: Recipe, out_dir: Union[str, Path],
                 val_set: Optional[SliceDataset] = None, seed: int = 0, console: Optional[Console] = None,
                 show_progress: bool = True):
        if len(train_set) == 0:
            raise UsageError("training set is empty")
        if train_set.task != recipe.task:
            raise UsageError(f"recipe '{recipe.name}' trains {recipe.task}, dataset is {train_set.task}")
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.recipe = recipe
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.console = console or Console(stderr=True)
        self.show_progress = show_progress
        self.columns = BASE_COLUMNS + VAL_COLUMNS[recipe.task]
        self.rows: List[Dict[str, float]] = []

        n = len(train_set)
        self.schedule = recipe.build_schedule(n)
        self.eval_every = recipe.eval_every(n)
        optimizer_cls = AdamW if recipe.optimizer == "adamw" else Adam
        self.optimizer = optimizer_cls(model.named_parameters(), lr=recipe.base_lr,
                                       weight_decay=recipe.weight_decay)
        self.ema = EmaState.from_model(model, recipe.ema_decay) if recipe.ema else None

    @property
    def curves_path(self) -> Path:
        return self.out_dir / CURVES

    def _write_curves(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.columns)
        atomic_write_text(self.curves_path, frame.to_csv(index=False))
        return frame

    def _halt(self, step: int, lr: float, loss: float, parameter: Optional[str], cause: str):
        parameter = parameter or first_non_finite(self.model)
        self._write_curves()
        path = write_diagnostic(self.out_dir, self.model, step, lr, loss, parameter)
        logger.error(f"🛑 {cause} at step {step} (lr {lr:.3e}); diagnostic in {path}")
        raise NumericError(f"{cause} at step {step}", parameter=parameter, snapshot=str(path))

    def _validate(self) -> Dict[str, float]:
        if self.ema is not None and self.recipe.ema_eval:
            with ema_weights(self.model, self.ema):
                metrics = evaluate(self.model, self.val_set)
        else:
            metrics = evaluate(self.model, self.val_set)
        return {k: v for k, v in metrics.items() if k in self.columns}

    def _train_step(self, images: np.ndarray, targets: np.ndarray, step: int, lr: float) -> float:
        self.model.zero_grad()
        try:
            loss = self.model.loss(images, targets)
        except NumericError as e:
            self._halt(step, lr, float("nan"), e.parameter, "non-finite activation")
        value = loss.item()
        if not math.isfinite(value):
            self._halt(step, lr, value, None, "non-finite loss")
        loss.backward()
        if self.recipe.clip_grad:
            clip_grad_norm(self.model.parameters(), self.recipe.clip_grad)
        try:
            self.optimizer.step(lr)
        except NumericError as e:
            self._halt(step, lr, value, e.parameter, "non-finite gradient")
        if self.ema is not None:
            ema_update(self.ema, {n: p.data for n, p in self.model.named_parameters()})
        return value

    def run(self) -> TrainResult:
        recipe = self.recipe
        total = self.schedule.total_steps
        select = SELECTION_METRIC[recipe.task]
        checkpoints = self.out_dir / "checkpoints"
        extra = {"recipe": recipe.name, "task": recipe.task, "seed": self.seed}
        result = TrainResult(self.model, pd.DataFrame(columns=self.columns), self.curves_path)

        self.model.manual_seed(self.seed)
        self.model.train()
        logger.info(f"🏋️ {recipe.name}: {total} steps over {len(self.train_set)} samples, "
                    f"batch {recipe.batch_size}, eval every {self.eval_every}")

        step, epoch = 0, 0
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=self.console,
            disable=not self.show_progress,
        ) as progress:
            task = progress.add_task(f"Training {recipe.name}...", total=total)
            while step < total:
                for images, targets in self.train_set.batches(recipe.batch_size, self.seed, epoch,
                                                              augment_samples=recipe.augment):
                    if step >= total:
                        break
                    lr = lr_at(self.schedule, step)
                    loss = self._train_step(images, targets, step, lr)
                    step += 1
                    row = {"step": step, "epoch": epoch, "lr": lr, "train_loss": loss}
                    self.rows.append(row)
                    if self.val_set is not None and (step % self.eval_every == 0 or step == total):
                        row.update(self._validate())
                        score = row[select]
                        logger.info(f"📊 step {step} epoch {epoch}: loss {loss:.4f}, {select} {score:.4f}")
                        if result.best_metric is None or score > result.best_metric:
                            result.best_metric, result.best_step = score, step
                            result.checkpoints["best"] = save_checkpoint(
                                checkpoints / "best", self.model, step, {**extra, select: score})
                        self._write_curves()
                    progress.update(task, advance=1, description=f"Training {recipe.name} (loss {loss:.4f})")
                epoch += 1

        result.curves = self._write_curves()
        result.checkpoints["last"] = save_checkpoint(checkpoints / "last", self.model, step, extra)
        if self.ema is not None:
            result.checkpoints["ema"] = save_checkpoint(checkpoints / "ema", self.model, step, extra,
                                                        state=self.ema.shadow)
        if "best" not in result.checkpoints:
            result.checkpoints["best"] = result.checkpoints["last"]
        logger.success(f"✅ {recipe.name} finished after {step} steps; curves in {self.curves_path}")
        return result


def run_recipe(model: Module, train_set: SliceDataset, recipe: Recipe, out_dir: Union[str, Path],
               val_set: Optional[SliceDataset] = None, seed: int = 0, show_progress: bool = True) -> TrainResult:
    """
    Train `model` with `recipe`, logging every step to curves.csv and
    checkpointing best-by-validation and last under out_dir/checkpoints.
    A non-finite activation, loss or gradient halts with nan_diagnostic.json and a
    NumericError.
    """
    return Trainer(model, train_set, recipe, out_dir, val_set, seed, show_progress=show_progress).run()


def history_summary(frame: pd.DataFrame) -> Dict[str, float]:
    """Last train loss and last value of each validation column."""
    summary = {"steps": int(frame["step"].iloc[-1]) if len(frame) else 0}
    for column in frame.columns[3:]:
        values = frame[column].dropna()
        if len(values):
            summary[column] = float(values.iloc[-1])
    return summary

