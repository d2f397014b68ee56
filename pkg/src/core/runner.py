"""
Experiment runner: ties configuration, pipeline, models and training together.
"""

from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotmap import DotMap
from loguru import logger
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn

from src.autodiff.tensor import set_default_dtype
from src.core.errors import ConfigError, DataError, UsageError
from src.extractors.volume_extractor import VolumeExtractor
from src.metrics.benchmark import BenchResult, run_benchmark
from src.metrics.complexity import ComplexityReport, count_all, count_model
from src.metrics.report import MetricsReport
from src.models.checkpoint import load_checkpoint, load_pretrained, read_checkpoint
from src.models.config import SwinConfig, config_from_run, get_variant
from src.models.heads import build_model
from src.processors.dataset_builder import DatasetBuilder, SplitManifest, load_dataset, save_dataset
from src.processors.phantom import make_phantom
from src.training.data import SliceDataset
from src.training.engine import TrainResult, evaluate_report, export_predictions, run_recipe
from src.training.recipes import resolve_recipe
from src.utils.helpers import atomic_write_json, atomic_write_text
from src.utils.plotting import plot_benchmark, plot_complexity, plot_curves


class ExperimentRunner:
    """
    Runs the prepare / train / eval / count / bench steps for one RunConfig.
    Everything lands under ``config.output_dir``.
    """

    def __init__(self, config: DotMap, console: Optional[Console] = None, show_progress: bool = True):
        self.config = config
        self.seed = int(config.seed)
        self.out_dir = Path(config.output_dir)
        self.console = console or Console(stderr=True)
        self.show_progress = show_progress
        logger.info(f"Experiment runner initialised. Output: {self.out_dir}, seed: {self.seed}")

    def _spinner(self) -> Progress:
        return Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=self.console,
            disable=not self.show_progress,
        )

    @property
    def dataset_dir(self) -> Path:
        return self.out_dir / "dataset"

    @property
    def train_dir(self) -> Path:
        return self.out_dir / "train"

    def model_config(self, img_size: Optional[int] = None) -> SwinConfig:
        cfg = config_from_run(self.config.model)
        if img_size is not None and cfg.img_size != img_size:
            if self.config.model.img_size is not None:
                raise ConfigError(f"model.img_size {cfg.img_size} does not match the dataset's {img_size}")
            cfg = replace(cfg, img_size=img_size)
        return cfg

    # --- prepare ---

    def prepare(self, phantom: Optional[int] = None, input_dir: Optional[str] = None,
                dataset_dir: Optional[Path] = None) -> SplitManifest:
        """Build a dataset from phantom volumes or an input directory and write it atomically."""
        if (phantom is None) == (input_dir is None):
            raise UsageError("prepare needs exactly one of --phantom N or --input DIR")
        pipeline = self.config.pipeline
        img_size = self.model_config().img_size
        target = Path(dataset_dir) if dataset_dir else self.dataset_dir

        with self._spinner() as progress:
            task = progress.add_task("Loading volumes...", total=None)
            masks = None
            if phantom is not None:
                if phantom < 1:
                    raise UsageError("--phantom needs at least one volume")
                phantoms = make_phantom(self.seed, phantom, pipeline.phantom.size, pipeline.phantom.nodule_prob)
                volumes, annotations, masks = phantoms.volumes, phantoms.annotations, phantoms.masks
                progress.update(task, description=f"🧪 Generated {len(volumes)} phantom volumes")
            else:
                extractor = VolumeExtractor(pipeline, img_size)
                volumes, annotations = extractor.load_directory(input_dir)
                if pipeline.task == "segmentation":
                    masks = [extractor.volume_mask(v, [a for a in annotations if a.volume_id == v.id], input_dir)
                             for v in volumes]
                progress.update(task, description=f"📂 Loaded {len(volumes)} volumes")

            progress.update(task, description=f"Building {pipeline.task} splits...")
            manifest = DatasetBuilder(pipeline, img_size, self.seed).build(volumes, annotations, masks)
            progress.update(task, description="Writing dataset...")
            save_dataset(target, manifest)
            progress.update(task, description=f"✅ Dataset ready in {target}")
        return manifest

    # --- train / eval ---

    def train(self, dataset_dir: Optional[Path] = None, init: Optional[str] = None,
              curves: bool = False) -> TrainResult:
        set_default_dtype(self.config.train.dtype)
        manifest = load_dataset(dataset_dir or self.dataset_dir)
        recipe = resolve_recipe(self.config.train)
        if recipe.task != manifest.task:
            raise UsageError(f"recipe '{recipe.name}' trains {recipe.task} but the dataset is {manifest.task}")
        if not manifest.train:
            raise UsageError("the dataset's train split is empty")

        train_set = SliceDataset(manifest.train, manifest.task)
        val_set = SliceDataset(manifest.val, manifest.task) if manifest.val else None
        cfg = self.model_config(train_set.img_size)
        if recipe.drop_path is not None:
            cfg = replace(cfg, drop_path_rate=recipe.drop_path)
        model = build_model(cfg, manifest.task, self.seed)
        logger.info(f"🧱 {cfg.variant} {manifest.task} model: {model.num_parameters():,} parameters")

        init = init or recipe.init
        if init:
            load_pretrained(init, model)
        elif recipe.name == "finetune":
            logger.warning("⚠️  finetune recipe without an initial checkpoint; training from random weights")

        out = self.train_dir / recipe.name
        result = run_recipe(model, train_set, recipe, out, val_set, self.seed, show_progress=self.show_progress)
        if curves:
            plot_curves({f"{cfg.variant} {recipe.name}": result.curves_path}, out, prefix="curves")
        return result

    def resolve_checkpoint(self, checkpoint: str) -> Path:
        """'best', 'last' or 'ema' name the most recent run's checkpoints; anything else is a path."""
        if checkpoint in ("best", "last", "ema"):
            runs = sorted(self.train_dir.glob(f"*/checkpoints/{checkpoint}"), key=lambda p: p.stat().st_mtime)
            if not runs:
                raise DataError(f"no '{checkpoint}' checkpoint under {self.train_dir}")
            return runs[-1]
        return Path(checkpoint)

    def evaluate(self, checkpoint: str, split: str = "test", dataset_dir: Optional[Path] = None,
                 export: bool = False) -> MetricsReport:
        set_default_dtype(self.config.train.dtype)
        path = self.resolve_checkpoint(checkpoint)
        manifest_doc, _ = read_checkpoint(path)
        if not manifest_doc.get("config"):
            raise DataError(f"checkpoint {path} carries no model config")
        cfg = SwinConfig.from_dict(manifest_doc["config"])
        data = load_dataset(dataset_dir or self.dataset_dir)
        task = manifest_doc.get("task", data.task)
        if task != data.task:
            raise UsageError(f"checkpoint was trained for {task}, dataset is {data.task}")
        records = data.splits.get(split)
        if not records:
            raise UsageError(f"dataset split '{split}' is empty")

        model = build_model(cfg, task, self.seed)
        load_checkpoint(path, model, strict=True)
        flops = count_model(cfg, task).total_flops
        dataset = SliceDataset(records, task)
        report = evaluate_report(model, dataset, flops)
        atomic_write_text(self.out_dir / f"metrics_{split}.json", report.to_json() + "\n")
        if export:
            export_predictions(model, dataset, self.out_dir / f"predictions_{split}")
        logger.success(f"✅ Evaluated {path} on {split} ({len(records)} samples)")
        return report

    # --- accounting ---

    def count(self, variant: Optional[str] = None, resolution: Optional[int] = None, all_variants: bool = False,
              plot: bool = False, head: str = "classification", num_classes: int = 1000) -> List[ComplexityReport]:
        if all_variants:
            reports = count_all(resolution or 224, num_classes, head)
        else:
            cfg = get_variant(variant or self.config.model.variant, resolution=resolution)
            reports = [count_model(cfg, head, num_classes)]
        if plot:
            plot_complexity([r.to_dict() for r in reports], self.out_dir)
        return reports

    def bench(self, sizes: Sequence[int], dim: int, window: int) -> BenchResult:
        result = run_benchmark(sizes, dim, window, seed=self.seed)
        atomic_write_text(self.out_dir / "bench.csv", result.table.to_csv(index=False))
        atomic_write_json(self.out_dir / "bench_summary.json", result.summary())
        plot_benchmark(result.table, result.slopes, self.out_dir / "bench.svg")
        return result

    def curves(self, runs: Dict[str, str], prefix: str = "overlay") -> List[Path]:
        if not runs:
            raise UsageError("curves needs at least one CSV")
        return plot_curves(runs, self.out_dir, prefix=prefix)
