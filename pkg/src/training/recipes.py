"""
Named training recipes.

regular       classification from scratch: 300 epochs, 20 warmup, batch 28, lr 1e-3, wd 0.05, cosine
finetune      classification from a checkpoint: 30 epochs, 5 warmup, lr 1e-5, wd 1e-8, constant
segmentation  40K iterations, 1500 warmup, lr 1e-4, wd 0.01, linear decay, stochastic depth 0.2
"""

from dataclasses import dataclass, replace
from typing import Dict, Optional

from dotmap import DotMap

from src.core.errors import ConfigError
from src.training.schedules import Schedule

OVERRIDABLE = ("epochs", "iterations", "batch_size", "base_lr", "weight_decay", "warmup", "eval_interval", "init")


@dataclass(frozen=True)
class Recipe:
    name: str
    task: str
    base_lr: float
    weight_decay: float
    schedule: str
    warmup: int
    batch_size: int
    epochs: Optional[int] = None
    iterations: Optional[int] = None
    eval_interval: Optional[int] = None
    drop_path: Optional[float] = None
    min_lr: float = 0.0
    optimizer: str = "adamw"
    augment: bool = False
    ema: bool = False
    ema_decay: float = 0.9999
    ema_eval: bool = False
    clip_grad: Optional[float] = None
    init: Optional[str] = None

    def __post_init__(self):
        if (self.epochs is None) == (self.iterations is None):
            raise ConfigError(f"recipe '{self.name}' needs exactly one of epochs or iterations")
        for key in ("batch_size", "epochs", "iterations", "eval_interval"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ConfigError(f"recipe '{self.name}': {key} must be positive, got {value}")
        if self.warmup < 0:
            raise ConfigError(f"recipe '{self.name}': warmup must be >= 0")
        if self.epochs is not None and self.warmup > self.epochs:
            raise ConfigError(f"recipe '{self.name}': warmup ({self.warmup}) exceeds epochs ({self.epochs})")
        if self.iterations is not None and self.warmup > self.iterations:
            raise ConfigError(f"recipe '{self.name}': warmup ({self.warmup}) exceeds iterations ({self.iterations})")

    @property
    def by_iteration(self) -> bool:
        return self.iterations is not None

    def steps_per_epoch(self, num_samples: int) -> int:
        """Full batches per epoch; the incomplete last batch is dropped."""
        return max(1, num_samples // self.batch_size)

    def total_steps(self, num_samples: int) -> int:
        if self.by_iteration:
            return self.iterations
        return self.epochs * self.steps_per_epoch(num_samples)

    def build_schedule(self, num_samples: int) -> Schedule:
        """Epoch-based warmups convert to steps through steps_per_epoch."""
        per_epoch = 1 if self.by_iteration else self.steps_per_epoch(num_samples)
        return Schedule(self.schedule, self.base_lr, self.warmup * per_epoch, self.total_steps(num_samples),
                        self.min_lr)

    def eval_every(self, num_samples: int) -> int:
        if self.eval_interval is not None:
            return self.eval_interval
        if self.by_iteration:
            return max(1, self.iterations // 20)
        return self.steps_per_epoch(num_samples)


REGULAR = Recipe("regular", "classification", base_lr=1e-3, weight_decay=0.05, schedule="cosine",
                 warmup=20, batch_size=28, epochs=300)
FINETUNE = Recipe("finetune", "classification", base_lr=1e-5, weight_decay=1e-8, schedule="constant",
                  warmup=5, batch_size=28, epochs=30)
SEGMENTATION = Recipe("segmentation", "segmentation", base_lr=1e-4, weight_decay=0.01, schedule="linear",
                      warmup=1500, batch_size=8, iterations=40000, eval_interval=4000, drop_path=0.2,
                      augment=True)

RECIPES: Dict[str, Recipe] = {r.name: r for r in (REGULAR, FINETUNE, SEGMENTATION)}


def get_recipe(name: str) -> Recipe:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe '{name}', choose from {sorted(RECIPES)}")
    return RECIPES[name]


def resolve_recipe(train: DotMap) -> Recipe:
    """Preset named by train.recipe with any non-null train.* overrides applied."""
    base = get_recipe(train.recipe)
    changes = {key: train[key] for key in OVERRIDABLE if train.get(key) is not None}
    if "epochs" in changes and base.by_iteration:
        changes["iterations"] = None
    if "iterations" in changes and not base.by_iteration:
        changes["epochs"] = None
    changes.update(ema=bool(train.ema), ema_decay=float(train.ema_decay), ema_eval=bool(train.ema_eval),
                   clip_grad=train.clip_grad)
    return replace(base, **changes)
