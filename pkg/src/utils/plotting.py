"""
SVG plots of training curves, complexity tables and the attention benchmark.
"""

import io
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from src.core.errors import DataError  # noqa: E402
from src.utils.helpers import atomic_write_bytes  # noqa: E402

CURVE_METRICS = {
    "train_loss": "Training loss",
    "val_top1": "Validation top-1 accuracy",
    "val_top5": "Validation top-5 accuracy",
    "val_miou": "Validation mIoU",
    "val_macc": "Validation mAcc",
    "val_aacc": "Validation aAcc",
}


def _save(fig, path: Path) -> Path:
    buffer = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buffer, format="svg")
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug(f"🖼️ wrote {path}")
    return path


def read_curves(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"curve log {path} does not exist")
    frame = pd.read_csv(path)
    if "step" not in frame.columns or "train_loss" not in frame.columns:
        raise DataError(f"{path} is not a curve log (needs step and train_loss columns)")
    return frame


def plot_curves(curves: Dict[str, Union[str, Path]], out_dir: Union[str, Path], prefix: str = "curves") -> List[Path]:
    """
    One SVG per metric, every run in `curves` (label -> CSV) drawn on the
    same axes. Validation columns are only filled on evaluation steps.
    """
    out_dir = Path(out_dir)
    frames = {label: read_curves(path) for label, path in curves.items()}
    written = []
    for column, title in CURVE_METRICS.items():
        present = {label: f for label, f in frames.items() if column in f.columns and f[column].notna().any()}
        if not present:
            continue
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, frame in present.items():
            points = frame[["step", column]].dropna()
            style = "-" if column == "train_loss" else "o-"
            ax.plot(points["step"], points[column], style, label=label, linewidth=1.5, markersize=3)
        ax.set_xlabel("Step")
        ax.set_ylabel(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
        written.append(_save(fig, out_dir / f"{prefix}_{column}.svg"))
    return written


def plot_complexity(reports: Sequence[Dict], out_dir: Union[str, Path]) -> List[Path]:
    """Params (M) and FLOPs (G) bar charts across variants."""
    out_dir = Path(out_dir)
    names = [f"{r['variant']}@{r['resolution']}" for r in reports]
    written = []
    for key, scale, unit in (("params", 1e6, "M"), ("flops", 1e9, "G")):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        values = [r[key] / scale for r in reports]
        bars = ax.bar(names, values, color="C0" if key == "params" else "C1")
        ax.bar_label(bars, labels=[f"{v:.1f}{unit}" for v in values])
        ax.set_ylabel(f"{key} ({unit})")
        ax.grid(True, axis="y", alpha=0.3)
        written.append(_save(fig, out_dir / f"complexity_{key}.svg"))
    return written


def plot_benchmark(table: pd.DataFrame, slopes: Dict[str, float], path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(table["tokens"], table["global_seconds"] * 1e3, "o-", linewidth=2,
            label=f"global (slope {slopes['global']:.2f})")
    ax.plot(table["tokens"], table["window_seconds"] * 1e3, "s-", linewidth=2,
            label=f"windowed (slope {slopes['window']:.2f})")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("Tokens (h·w)")
    ax.set_ylabel("Time (ms)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, Path(path))
