import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.errors import ConfigError, DataError, NumericError, UsageError
from src.metrics.benchmark import global_attention, loglog_slope, run_benchmark, window_attention
from src.metrics.complexity import count_all, count_model, flops_msa, flops_wmsa
from src.models.config import VARIANTS, SwinConfig
from src.models.heads import SwinClassifier, SwinSegmenter
from src.utils.plotting import plot_benchmark, plot_complexity, plot_curves, read_curves

TOY = SwinConfig(img_size=32, embed_dim=8, depths=(2, 2, 2, 2), num_heads=(2, 2, 2, 2), window_size=4,
                 variant="count-toy")


# --- attention formulas ---

def test_global_attention_flops():
    assert flops_msa(56, 56, 96) == 2_003_828_736


def test_window_attention_flops():
    assert flops_wmsa(56, 56, 96, 7) == 145_108_992


def test_single_window_equals_global():
    assert flops_wmsa(7, 7, 32, 7) == flops_msa(7, 7, 32)


def test_formula_errors():
    with pytest.raises(ConfigError):
        flops_wmsa(10, 10, 8, 7)
    with pytest.raises(ConfigError):
        flops_msa(0, 4, 8)
    with pytest.raises(NumericError):
        flops_msa(2 ** 20, 2 ** 20, 2 ** 10)


# --- whole models ---

def test_swin_t_counts():
    report = count_model(VARIANTS["swin-t"], num_classes=1000)
    assert report.total_params == 28_288_354
    assert report.total_flops == 4_490_566_656
    assert report.attention["wmsa"] < report.attention["msa"]


def test_swin_s_flops():
    report = count_model(VARIANTS["swin-s"], num_classes=1000)
    assert report.total_flops == 8_740_875_264


def test_zero_depth_closed_form():
    c, k = 96, 1000
    cfg = replace(VARIANTS["swin-t"], depths=(0, 0, 0, 0))
    patch = 4 * 4 * 3 * c + c + 2 * c
    merges = sum(2 * 4 * d + 4 * d * 2 * d for d in (c, 2 * c, 4 * c))
    head = 2 * 8 * c + 8 * c * k + k
    assert count_model(cfg, num_classes=k).total_params == patch + merges + head


def test_analytic_params_match_instantiated_models():
    assert count_model(TOY, "classification").total_params == SwinClassifier(TOY).num_parameters()
    assert count_model(TOY, "segmentation").total_params == SwinSegmenter(TOY).num_parameters()


def test_padded_stage_params_match():
    # 24, 12, 6 pad to window 5; the last stage shrinks the window to 3
    cfg = replace(TOY, img_size=96, window_size=5)
    assert count_model(cfg).total_params == SwinClassifier(cfg).num_parameters()


def test_head_kinds():
    none = count_model(TOY, "none")
    assert "head" not in none.params and "decoder" not in none.params
    assert count_model(TOY, "classification").total_params > none.total_params
    with pytest.raises(ConfigError):
        count_model(TOY, "detection")


def test_count_all():
    reports = count_all()
    assert [(r.variant, r.resolution) for r in reports] == [
        ("swin-t", 224), ("swin-s", 224), ("swin-b", 224), ("swin-b-384", 384)]
    flops = [r.total_flops for r in reports]
    assert flops == sorted(flops)
    data = reports[0].to_dict()
    assert data["params"] == sum(data["params_by_module"].values())


# --- benchmark ---

def test_kernels_agree_on_single_window():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((16, 8), dtype=np.float32) for _ in range(3))
    assert_allclose(window_attention(q, k, v, 4, 4, 4), global_attention(q, k, v), atol=1e-5)


def test_window_kernel_attends_within_windows():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((64, 4), dtype=np.float32) for _ in range(3))
    out = window_attention(q, k, v, 8, 8, 4)
    grid = np.arange(64).reshape(8, 8)
    tokens = grid[4:, :4].ravel()
    assert_allclose(out[tokens], global_attention(q[tokens], k[tokens], v[tokens]), atol=1e-5)


def test_loglog_slope():
    assert loglog_slope([1, 2, 4, 8], [3, 12, 48, 192]) == pytest.approx(2.0)


def test_benchmark_needs_four_sizes():
    with pytest.raises(UsageError):
        run_benchmark(sizes=(4, 8, 12), dim=4, window=4)
    with pytest.raises(UsageError):
        run_benchmark(sizes=(4, 8, 8, 12), dim=4, window=4)


def test_benchmark_rejects_sizes_off_the_window_grid():
    with pytest.raises(ConfigError):
        run_benchmark(sizes=(4, 8, 12, 14), dim=4, window=4)


def test_benchmark_table(tmp_path):
    result = run_benchmark(sizes=(4, 8, 12, 16), dim=8, window=4, repeats=1)
    table = result.table
    assert table["tokens"].tolist() == [16, 64, 144, 256]
    assert table["flops_msa"].tolist() == [flops_msa(s, s, 8) for s in (4, 8, 12, 16)]
    assert table["flops_wmsa"].tolist() == [flops_wmsa(s, s, 8, 4) for s in (4, 8, 12, 16)]
    assert (table["global_seconds"] > 0).all() and (table["window_seconds"] > 0).all()
    assert set(result.summary()) == {"window_slope", "global_slope", "window_ok", "global_ok"}
    path = plot_benchmark(table, result.slopes, tmp_path / "bench.svg")
    assert path.read_text().lstrip().startswith("<?xml")


# --- plotting ---

def test_plot_curves(tmp_path):
    curves = pd.DataFrame({"step": [1, 2, 3], "epoch": [0, 0, 0], "lr": [0.1, 0.1, 0.1],
                           "train_loss": [1.0, 0.8, 0.5], "val_top1": [None, None, 0.75]})
    curves.to_csv(tmp_path / "run.csv", index=False)
    written = plot_curves({"run": tmp_path / "run.csv"}, tmp_path / "plots")
    assert sorted(p.name for p in written) == ["curves_train_loss.svg", "curves_val_top1.svg"]
    assert all(p.stat().st_size > 0 for p in written)


def test_read_curves_errors(tmp_path):
    with pytest.raises(DataError):
        read_curves(tmp_path / "missing.csv")
    pd.DataFrame({"a": [1]}).to_csv(tmp_path / "other.csv", index=False)
    with pytest.raises(DataError):
        read_curves(tmp_path / "other.csv")


def test_plot_complexity(tmp_path):
    written = plot_complexity([r.to_dict() for r in count_all()], tmp_path)
    assert [p.name for p in written] == ["complexity_params.svg", "complexity_flops.svg"]
