import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.autodiff import functional as F
from src.autodiff.serialization import read_tensor
from src.autodiff.tensor import Tensor, no_grad, parameter, set_default_dtype
from src.core.config import load_config
from src.core.errors import ConfigError, NumericError, ShapeError, UsageError
from src.extractors.volume_extractor import Provenance, SliceRecord
from src.models.checkpoint import read_checkpoint
from src.models.config import SwinConfig
from src.models.heads import SwinClassifier, cross_entropy
from src.models.layers import Linear, Module
from src.training.data import SliceDataset
from src.training.ema import EmaState, ema_update, ema_weights
from src.training.engine import DIAGNOSTIC, evaluate, export_predictions, history_summary, run_recipe
from src.training.optim import Adam, AdamW, AdamWState, adamw_step, clip_grad_norm
from src.training.recipes import FINETUNE, REGULAR, SEGMENTATION, Recipe, get_recipe, resolve_recipe
from src.training.schedules import Schedule, lr_at


@pytest.fixture(autouse=True)
def float64():
    set_default_dtype("float64")


class BlobClassifier(Module):
    """Linear classifier over flattened 2x2 RGB slices."""

    def __init__(self, seed=0):
        super().__init__()
        self.fc = Linear(12, 2, rng=np.random.default_rng(seed))

    def forward(self, images):
        images = np.asarray(images)
        return self.fc(Tensor(images.reshape(images.shape[0], -1)))

    def predict(self, images):
        with no_grad():
            return F.softmax(self.forward(images), axis=-1).numpy()

    def loss(self, images, labels):
        return cross_entropy(self.forward(images), labels)


def blob_records(n, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        image = np.clip(0.25 + 0.5 * label + 0.1 * rng.standard_normal((2, 2, 3)), 0.0, 1.0)
        records.append(SliceRecord(image.astype(np.float32), Provenance(f"v{i}", "z", 0), label=label))
    return records


BLOB = Recipe("blob", "classification", base_lr=0.05, weight_decay=0.0, schedule="constant", warmup=0,
              batch_size=8, epochs=10)


# --- optimizer ---

def test_adamw_single_step():
    state = AdamWState.zeros_like([np.ones(1)], lr=1e-3, weight_decay=0.05)
    (theta,) = adamw_step([np.ones(1)], [np.ones(1)], state)
    assert theta[0] == pytest.approx(0.99895, abs=1e-8)
    assert state.step == 1


def test_adam_folds_decay_into_gradient():
    state = AdamWState.zeros_like([np.ones(1)], lr=1e-3, weight_decay=0.05, decoupled=False)
    (theta,) = adamw_step([np.ones(1)], [np.ones(1)], state)
    assert theta[0] == pytest.approx(0.999, abs=1e-8)


def test_adamw_without_decay_matches_adam():
    rng = np.random.default_rng(0)
    start = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
    decoupled = AdamWState.zeros_like(start, lr=1e-2, weight_decay=0.0)
    coupled = AdamWState.zeros_like(start, lr=1e-2, weight_decay=0.0, decoupled=False)
    a, b = list(start), list(start)
    for _ in range(5):
        grads = [rng.standard_normal(p.shape) for p in start]
        a = adamw_step(a, grads, decoupled)
        b = adamw_step(b, grads, coupled)
    for x, y in zip(a, b):
        assert_array_equal(x, y)


def test_parameter_without_gradient_is_untouched():
    state = AdamWState.zeros_like([np.ones(2), np.ones(2)], lr=0.1)
    a, b = adamw_step([np.ones(2), np.ones(2)], [None, np.ones(2)], state)
    assert_array_equal(a, np.ones(2))
    assert (b < 1).all()


def test_non_finite_gradient_names_parameter():
    state = AdamWState.zeros_like([np.ones(2)])
    with pytest.raises(NumericError) as err:
        adamw_step([np.ones(2)], [np.array([1.0, np.nan])], state, names=["fc.weight"])
    assert err.value.parameter == "fc.weight"
    assert state.step == 0


def test_decay_mask():
    named = [
        ("fc.weight", parameter(np.ones((2, 2)))),
        ("fc.bias", parameter(np.ones(2))),
        ("attn.relative_position_bias_table", parameter(np.ones((9, 2)))),
    ]
    assert AdamW(named, weight_decay=0.05).state.decay == [True, False, False]
    assert Adam(named).state.decoupled is False


def test_optimizer_step_updates_tensors():
    model = BlobClassifier()
    before = model.fc.weight.data.copy()
    optimizer = AdamW(model.named_parameters(), lr=0.01)
    model.loss(np.ones((2, 2, 2, 3)), np.array([0, 1])).backward()
    optimizer.step()
    assert not np.array_equal(model.fc.weight.data, before)
    optimizer.zero_grad()
    assert model.fc.weight.grad is None


def test_clip_grad_norm():
    p = parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert_allclose(p.grad, [0.6, 0.8], atol=1e-6)
    assert clip_grad_norm([p], 10.0) == pytest.approx(1.0, abs=1e-6)


# --- schedules ---

def test_linear_decay():
    assert lr_at(Schedule("linear", 1e-4, 0, 100), 25) == pytest.approx(7.5e-5)


def test_warmup_then_cosine():
    schedule = Schedule("cosine", 1.0, 10, 110)
    assert lr_at(schedule, 0) == 0.0
    assert lr_at(schedule, 5) == pytest.approx(0.5)
    assert lr_at(schedule, 10) == pytest.approx(1.0)
    assert lr_at(schedule, 60) == pytest.approx(0.5)
    assert lr_at(schedule, 110) == pytest.approx(0.0)


def test_constant_schedule():
    schedule = Schedule("constant", 1e-5, 5, 30)
    assert lr_at(schedule, 4) == pytest.approx(0.8e-5)
    assert lr_at(schedule, 30) == 1e-5


def test_schedule_errors():
    with pytest.raises(ConfigError):
        Schedule("step", 1.0, 0, 10)
    with pytest.raises(ConfigError):
        Schedule("cosine", 1.0, 11, 10)
    with pytest.raises(UsageError):
        lr_at(Schedule("cosine", 1.0, 0, 10), 11)


# --- EMA ---

def test_ema_update():
    ema = EmaState({"w": np.zeros(2)}, decay=0.5)
    ema_update(ema, {"w": np.ones(2)})
    ema_update(ema, {"w": np.ones(2)})
    assert_allclose(ema.shadow["w"], 0.75)


def test_ema_contracts_towards_fixed_parameters():
    decay = 0.9
    start = np.array([4.0, -2.0, 0.5])
    target = np.array([1.0, 1.0, 1.0])
    ema = EmaState({"w": start.copy()}, decay=decay)
    for k in range(1, 21):
        ema_update(ema, {"w": target})
        gap = np.abs(ema.shadow["w"] - target)
        assert np.all(gap <= decay ** k * np.abs(start - target) * (1 + 1e-9))


def test_ema_rejects_shape():
    with pytest.raises(ShapeError):
        ema_update(EmaState({"w": np.zeros(2)}), {"w": np.ones(3)})


def test_ema_weights_are_restored():
    model = BlobClassifier()
    original = model.fc.weight.data.copy()
    ema = EmaState.from_model(model)
    ema.shadow["fc.weight"] = np.zeros_like(original)
    with ema_weights(model, ema):
        assert not model.fc.weight.data.any()
    assert_array_equal(model.fc.weight.data, original)


# --- recipes ---

def test_recipe_presets():
    assert (REGULAR.epochs, REGULAR.warmup, REGULAR.batch_size, REGULAR.base_lr, REGULAR.weight_decay) == (
        300, 20, 28, 1e-3, 0.05)
    assert (FINETUNE.epochs, FINETUNE.warmup, FINETUNE.base_lr, FINETUNE.schedule) == (30, 5, 1e-5, "constant")
    assert (SEGMENTATION.iterations, SEGMENTATION.warmup, SEGMENTATION.batch_size, SEGMENTATION.drop_path) == (
        40000, 1500, 8, 0.2)


def test_epoch_recipe_steps():
    assert REGULAR.steps_per_epoch(100) == 3
    assert REGULAR.steps_per_epoch(5) == 1
    schedule = REGULAR.build_schedule(100)
    assert (schedule.warmup_steps, schedule.total_steps) == (60, 900)
    assert REGULAR.eval_every(100) == 3


def test_iteration_recipe_steps():
    assert SEGMENTATION.total_steps(10) == 40000
    assert SEGMENTATION.build_schedule(10).warmup_steps == 1500
    assert SEGMENTATION.eval_every(10) == 4000
    assert replace(SEGMENTATION, eval_interval=None).eval_every(10) == 2000


def test_recipe_validation():
    with pytest.raises(ConfigError):
        get_recipe("imagenet")
    with pytest.raises(ConfigError):
        replace(REGULAR, warmup=400)
    with pytest.raises(ConfigError):
        replace(REGULAR, iterations=10)


def test_resolve_recipe_overrides():
    train = load_config(None, {"train": {"recipe": "regular", "epochs": 2, "warmup": 0, "ema": True}}).train
    recipe = resolve_recipe(train)
    assert (recipe.epochs, recipe.warmup, recipe.ema, recipe.base_lr) == (2, 0, True, 1e-3)
    train = load_config(None, {"train": {"recipe": "segmentation", "epochs": 3, "warmup": 1}}).train
    recipe = resolve_recipe(train)
    assert (recipe.epochs, recipe.iterations) == (3, None)


# --- data ---

def test_batches_drop_last_in_training():
    dataset = SliceDataset(blob_records(10), "classification")
    assert [len(t) for _, t in dataset.batches(4, seed=0)] == [4, 4]
    assert [len(t) for _, t in dataset.batches(4, shuffle=False, drop_last=False)] == [4, 4, 2]
    assert [len(t) for _, t in dataset.batches(32, seed=0)] == [10]


def test_batch_order_depends_on_seed_and_epoch():
    dataset = SliceDataset(blob_records(16), "classification")

    def order(seed, epoch):
        return np.concatenate([images[:, 0, 0, 0] for images, _ in dataset.batches(4, seed, epoch)])

    assert_array_equal(order(0, 1), order(0, 1))
    assert not np.array_equal(order(0, 1), order(0, 2))


def test_dataset_needs_records():
    with pytest.raises(UsageError):
        SliceDataset([], "classification")


def test_class_counts():
    assert SliceDataset(blob_records(5), "classification").class_counts() == [3, 2]


def test_segmentation_batches_with_augmentation():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:5, 2:5] = 1
    records = [SliceRecord(np.full((8, 8, 3), 0.5, dtype=np.float32), Provenance("v", "z", i), 1, mask)
               for i in range(4)]
    dataset = SliceDataset(records, "segmentation")
    images, masks = next(dataset.batches(2, seed=0, augment_samples=True))
    assert images.shape == (2, 8, 8, 3)
    assert masks.shape == (2, 8, 8)
    assert set(np.unique(masks).tolist()) <= {0, 1}


# --- training loop ---

def test_training_lowers_loss(tmp_path):
    train, val = SliceDataset(blob_records(32), "classification"), SliceDataset(blob_records(8, 1), "classification")
    result = run_recipe(BlobClassifier(), train, BLOB, tmp_path, val_set=val, show_progress=False)
    losses = result.curves["train_loss"].to_numpy()
    assert len(losses) == 40
    assert losses[-4:].mean() < losses[:4].mean()
    assert list(result.curves.columns) == ["step", "epoch", "lr", "train_loss", "val_top1", "val_top5"]
    assert result.curves["val_top1"].notna().sum() == 10
    assert result.best_metric == result.curves["val_top1"].max()
    assert evaluate(result.model, val)["val_top5"] == 1.0
    assert (tmp_path / "curves.csv").is_file()
    manifest, _ = read_checkpoint(result.checkpoints["best"])
    assert manifest["step"] == result.best_step
    assert manifest["val_top1"] == result.best_metric
    assert read_checkpoint(result.checkpoints["last"])[0]["step"] == 40
    summary = history_summary(result.curves)
    assert summary["steps"] == 40
    assert summary["train_loss"] == losses[-1]
    assert summary["val_top1"] == result.curves["val_top1"].iloc[-1]


def test_first_step_uses_warmup_start(tmp_path):
    recipe = replace(BLOB, warmup=2, schedule="cosine", epochs=4)
    result = run_recipe(BlobClassifier(), SliceDataset(blob_records(16), "classification"), recipe, tmp_path,
                        show_progress=False)
    # 2 steps per epoch: warmup covers steps 0..3
    assert result.curves["lr"].iloc[0] == 0.0
    assert result.curves["lr"].iloc[2] == pytest.approx(0.025)
    assert result.curves["lr"].iloc[4] == pytest.approx(0.05)


def test_training_is_deterministic(tmp_path):
    train = SliceDataset(blob_records(24), "classification")
    a = run_recipe(BlobClassifier(), train, BLOB, tmp_path / "a", seed=3, show_progress=False)
    b = run_recipe(BlobClassifier(), train, BLOB, tmp_path / "b", seed=3, show_progress=False)
    pd.testing.assert_frame_equal(a.curves, b.curves)
    assert_array_equal(a.model.fc.weight.data, b.model.fc.weight.data)


def test_without_validation_best_is_last(tmp_path):
    result = run_recipe(BlobClassifier(), SliceDataset(blob_records(8), "classification"), BLOB, tmp_path,
                        show_progress=False)
    assert result.checkpoints["best"] == result.checkpoints["last"]
    assert result.best_step is None


def test_ema_checkpoint(tmp_path):
    recipe = replace(BLOB, ema=True, ema_decay=0.5, epochs=2)
    result = run_recipe(BlobClassifier(), SliceDataset(blob_records(16), "classification"), recipe, tmp_path,
                        show_progress=False)
    _, shadow = read_checkpoint(result.checkpoints["ema"])
    _, last = read_checkpoint(result.checkpoints["last"])
    assert set(shadow) == set(last) == {"fc.weight", "fc.bias"}
    assert not np.array_equal(shadow["fc.weight"], last["fc.weight"])


def test_nan_halts_with_diagnostic(tmp_path):
    model = BlobClassifier()
    model.fc.weight.data[0, 0] = np.nan
    with pytest.raises(NumericError) as err:
        run_recipe(model, SliceDataset(blob_records(16), "classification"), BLOB, tmp_path, show_progress=False)
    diagnostic = json.loads((tmp_path / DIAGNOSTIC).read_text())
    assert diagnostic["step"] == 0
    assert diagnostic["loss"] == "nan"
    assert diagnostic["parameter"] == "fc.weight"
    assert err.value.snapshot == str(tmp_path / DIAGNOSTIC)
    assert err.value.exit_code == 4


def test_non_finite_attention_halts_with_diagnostic(tmp_path):
    cfg = SwinConfig(img_size=32, embed_dim=8, depths=(2, 2, 2, 2), num_heads=(2, 2, 2, 2), window_size=4,
                     variant="nan-toy")
    model = SwinClassifier(cfg, seed=0)
    table = "backbone.stages.0.blocks.0.attn.relative_position_bias_table"
    dict(model.named_parameters())[table].data[0, 0] = np.nan
    rng = np.random.default_rng(0)
    records = [SliceRecord(rng.random((32, 32, 3)).astype(np.float32), Provenance(f"v{i}", "z", 0), label=i % 2)
               for i in range(4)]
    with pytest.raises(NumericError) as err:
        run_recipe(model, SliceDataset(records, "classification"), replace(BLOB, batch_size=2, epochs=1), tmp_path,
                   show_progress=False)
    diagnostic = json.loads((tmp_path / DIAGNOSTIC).read_text())
    assert diagnostic["step"] == 0
    assert diagnostic["loss"] == "nan"
    assert diagnostic["parameter"] == err.value.parameter == table
    assert (tmp_path / "curves.csv").is_file()
    assert err.value.snapshot == str(tmp_path / DIAGNOSTIC)


def test_recipe_task_must_match(tmp_path):
    with pytest.raises(UsageError):
        run_recipe(BlobClassifier(), SliceDataset(blob_records(8), "classification"),
                   replace(SEGMENTATION, iterations=2, warmup=0), tmp_path, show_progress=False)


# --- prediction export ---

class FilledSegmenter:
    def predict(self, images):
        b, h, w, _ = images.shape
        probs = np.zeros((b, h, w, 2))
        probs[..., 1] = 1.0
        return np.ones((b, h, w), dtype=np.uint8), probs


def test_export_classification_probabilities(tmp_path):
    dataset = SliceDataset(blob_records(37), "classification")
    written = export_predictions(BlobClassifier(), dataset, tmp_path / "pred")
    assert set(written) == {"probs"}
    probs = read_tensor(written["probs"])
    assert probs.dtype == np.float32
    assert probs.shape == (37, 2)
    assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)


def test_export_segmentation_masks(tmp_path):
    records = [SliceRecord(np.zeros((4, 4, 3), dtype=np.float32), Provenance("v", "z", i), 0,
                           np.zeros((4, 4), dtype=np.uint8)) for i in range(3)]
    written = export_predictions(FilledSegmenter(), SliceDataset(records, "segmentation"), tmp_path)
    masks = read_tensor(written["masks"])
    assert masks.dtype == np.uint8
    assert masks.shape == (3, 4, 4)
    assert masks.all()
    assert read_tensor(written["probs"]).shape == (3, 4, 4, 2)
