import filecmp
import math
import sys
import time
from pathlib import Path
from typing import Callable, List, Tuple

import click
import numpy as np
from loguru import logger
from rich.console import Console
from rich.table import Table

# Add project root to path to allow imports from src
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.autodiff import functional as F
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import Tensor, parameter, set_default_dtype
from src.core.config import load_config
from src.core.errors import DataError
from src.core.runner import ExperimentRunner
from src.extractors.volume_extractor import Provenance, SliceRecord
from src.metrics.benchmark import run_benchmark
from src.metrics.complexity import count_all, flops_msa, flops_wmsa
from src.metrics.confusion import ConfusionMatrix, accumulate, macc_aacc, miou
from src.models.config import SwinConfig
from src.models.heads import ClassifierHead, SegDecoder, SwinClassifier
from src.models.layers import LayerNorm, Linear, Mlp
from src.models.swin import PatchEmbed, PatchMerging, SwinBlock, WindowAttention
from src.models.windows import build_shift_mask
from src.processors.dataset_builder import SplitManifest, build_splits_classification, build_splits_segmentation, \
    expand_positives, round_half_up
from src.utils.helpers import largest_remainder
from src.utils.logger import setup_logging

PARAM_TARGETS = {"swin-t": 28e6, "swin-s": 50e6, "swin-b": 88e6}
FLOP_TARGETS = {"swin-t": 4.5e9, "swin-s": 8.7e9, "swin-b": 15.4e9, "swin-b-384": 47.1e9}
GRAD_TOY = SwinConfig(img_size=32, embed_dim=8, depths=(2, 2, 2, 2), num_heads=(2, 2, 2, 2), window_size=4,
                      drop_path_rate=0.0, variant="grad-toy")

Check = Tuple[str, bool, str]


# --- oracles ---

def brute_force_allowed(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """allowed[win, i, j]: same window and neither or both tokens wrapped in each axis during the roll."""
    rows = np.arange(h) >= h - shift
    cols = np.arange(w) >= w - shift
    allowed = []
    for wr in range(h // window):
        for wc in range(w // window):
            tokens = [(wr * window + a, wc * window + b) for a in range(window) for b in range(window)]
            allowed.append([[rows[r1] == rows[r2] and cols[c1] == cols[c2] for r2, c2 in tokens]
                            for r1, c1 in tokens])
    return np.array(allowed)


def region_attention(block: SwinBlock, x: np.ndarray) -> np.ndarray:
    """Attention branch of one block computed token by token over each token's contiguous region."""
    _, h, w, d = x.shape
    m, s = block.window, block.shift
    attn = block.attn
    heads, hd = attn.num_heads, d // attn.num_heads
    mu = x[0].mean(axis=-1, keepdims=True)
    y = (x[0] - mu) / np.sqrt(x[0].var(axis=-1, keepdims=True) + block.norm1.eps)
    y = y * block.norm1.weight.data + block.norm1.bias.data
    qkv = y @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    table = attn.relative_position_bias_table.data

    out = np.zeros((h, w, d))
    for i in range(h):
        for j in range(w):
            r, c = (i - s) % h, (j - s) % w
            neighbours = []
            for i2 in range(h):
                for j2 in range(w):
                    r2, c2 = (i2 - s) % h, (j2 - s) % w
                    same_window = r // m == r2 // m and c // m == c2 // m
                    contiguous = (r >= h - s) == (r2 >= h - s) and (c >= w - s) == (c2 >= w - s)
                    if same_window and (s == 0 or contiguous):
                        neighbours.append((i2, j2, r2, c2))
            for head in range(heads):
                sl = slice(head * hd, (head + 1) * hd)
                scores = np.array([
                    q[i, j, sl] @ k[i2, j2, sl] * attn.scale
                    + table[(r % m - r2 % m + m - 1) * (2 * m - 1) + (c % m - c2 % m + m - 1), head]
                    for i2, j2, r2, c2 in neighbours
                ])
                p = np.exp(scores - scores.max())
                p /= p.sum()
                out[i, j, sl] = sum(pk * v[i2, j2, sl] for pk, (i2, j2, _, _) in zip(p, neighbours))
    return (out @ attn.proj.weight.data + attn.proj.bias.data)[None]


def set_iou(pred: np.ndarray, label: np.ndarray, cls: int) -> float:
    inter = np.count_nonzero((pred == cls) & (label == cls))
    union = np.count_nonzero((pred == cls) | (label == cls))
    return inter / union if union else math.nan


def weighted_output(shape, seed: int) -> Callable[[Tensor], Tensor]:
    weights = Tensor(np.random.default_rng(seed).standard_normal(shape))
    return lambda out: F.sum(F.mul(out, weights))


def shares_volumes(manifest: SplitManifest) -> bool:
    train, val, test = (manifest.volumes(s) for s in ("train", "val", "test"))
    return bool(train & val or train & test or val & test)


def randomise_bias_tables(module, rng: np.random.Generator) -> None:
    for name, p in module.named_parameters():
        if name.endswith("relative_position_bias_table"):
            p.data = rng.standard_normal(p.shape) * 0.5


# --- criteria ---

def check_complexity() -> List[Check]:
    reports = {r.variant: r for r in count_all()}
    results = []
    for variant, target in PARAM_TARGETS.items():
        got = reports[variant].total_params
        results.append((f"params {variant}", abs(got - target) <= 0.03 * target, f"{got / 1e6:.2f}M"))
    for variant, target in FLOP_TARGETS.items():
        got = reports[variant].total_flops
        results.append((f"FLOPs {variant}", abs(got - target) <= 0.05 * target, f"{got / 1e9:.2f}G"))
    msa, wmsa = flops_msa(56, 56, 96), flops_wmsa(56, 56, 96, 7)
    results.append(("attention formulas", msa == 2_003_828_736 and wmsa == 145_108_992, f"{msa:,} / {wmsa:,}"))
    return results


def check_scaling(seed: int) -> List[Check]:
    summary = run_benchmark((14, 28, 56, 112), 96, 7, seed=seed).summary()
    return [
        ("window attention slope", summary["window_ok"], f"{summary['window_slope']:.2f}"),
        ("global attention slope", summary["global_ok"], f"{summary['global_slope']:.2f}"),
    ]


def check_masks(seed: int, configs: int = 200) -> List[Check]:
    rng = np.random.default_rng(seed)
    mismatches, leakage = 0, 0.0
    for _ in range(configs):
        m = int(rng.integers(2, 8))
        h, w = m * int(rng.integers(1, 5)), m * int(rng.integers(1, 5))
        s = int(rng.integers(1, m))
        mask = build_shift_mask(h, w, m, s).mask
        allowed = brute_force_allowed(h, w, m, s)
        if not np.array_equal(mask == 0, allowed):
            mismatches += 1
            logger.warning(f"⚠️ mask mismatch at h={h} w={w} M={m} s={s}")
        scores = rng.standard_normal(mask.shape) * 3.0 + mask
        p = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        if (~allowed).any():
            leakage = max(leakage, float(p[~allowed].max()))
    return [
        ("shift mask vs brute force", mismatches == 0, f"{configs - mismatches}/{configs} configs"),
        ("cross-region leakage", leakage < 1e-6, f"{leakage:.1e}"),
    ]


def check_shifted_attention(seed: int, configs: int = 50) -> List[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs):
        m = int(rng.integers(2, 5))
        heads = int(rng.choice([1, 2]))
        dim = heads * int(rng.choice([2, 4]))
        h, w = m * int(rng.integers(1, 4)), m * int(rng.integers(1, 4))
        block = SwinBlock(dim, heads, m, int(rng.integers(0, m)), rng=rng)
        randomise_bias_tables(block, rng)
        x = rng.standard_normal((1, h, w, dim))
        diff = np.abs(block.attention_branch(Tensor(x)).numpy() - region_attention(block, x)).max()
        worst = max(worst, float(diff))
    return [("shifted attention vs region oracle", worst <= 1e-5, f"max diff {worst:.1e} over {configs}")]


def check_gradients(seeds: int) -> List[Check]:
    failures, worst = [], 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        grids = build_shift_mask(4, 4, 2, 1).mask
        cases = [
            ("linear", Linear(6, 5, rng=rng), (3, 6)),
            ("layernorm", LayerNorm(6), (3, 6)),
            ("mlp", Mlp(6, 12, rng=rng), (3, 6)),
            ("patch embed", PatchEmbed(4, 3, 8, rng=rng), (1, 8, 8, 3)),
            ("patch merging", PatchMerging(4, rng=rng), (1, 4, 4, 4)),
            ("classifier head", ClassifierHead(8, 3, rng=rng), (2, 2, 2, 8)),
        ]
        attention = WindowAttention(8, 2, 2, rng=rng)
        randomise_bias_tables(attention, rng)
        block = SwinBlock(8, 2, 4, 2, rng=rng)
        randomise_bias_tables(block, rng)
        for name, module, shape in cases:
            x = parameter(rng.standard_normal(shape))
            f = weighted_output(module(x.detach()).shape, seed)
            report = grad_check(lambda t: f(module(t)), x, samples=60, seed=seed)
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                failures.append(f"{name}@{seed}")
        x = parameter(rng.standard_normal((4, 4, 8)))
        f = weighted_output((4, 4, 8), seed)
        for name, fn, target in (
            ("masked window attention", lambda t: f(attention(t, grids)), x),
            ("bias table", lambda _: f(attention(x.detach(), grids)), attention.relative_position_bias_table),
        ):
            report = grad_check(fn, target, samples=60, seed=seed)
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                failures.append(f"{name}@{seed}")
        x = parameter(rng.standard_normal((1, 6, 6, 8)))
        f = weighted_output((1, 6, 6, 8), seed)
        report = grad_check(lambda t: f(block(t)), x, samples=60, seed=seed)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"padded shifted block@{seed}")

        decoder = SegDecoder((8, 16, 32, 64), 2, rng=rng)
        feats = [Tensor(rng.standard_normal((1, n, n, d))) for n, d in ((8, 8), (4, 16), (2, 32), (1, 64))]
        x = parameter(feats[0].data.copy())
        out_shape = decoder([x.detach()] + feats[1:], (32, 32)).shape
        f = weighted_output(out_shape, seed)
        report = grad_check(lambda t: f(decoder([t] + feats[1:], (32, 32))), x, samples=60, seed=seed)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"segmentation decoder@{seed}")

        model = SwinClassifier(GRAD_TOY, seed=seed)
        randomise_bias_tables(model, rng)
        images = parameter(rng.random((1, 32, 32, 3)))
        labels = np.array([seed % 2])
        report = grad_check(lambda t: model.loss(t, labels), images, samples=30, seed=seed)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"toy backbone@{seed}")
    detail = f"max rel. error {worst:.1e} over {seeds} seeds" + (f"; failed: {failures}" if failures else "")
    return [("gradient checks", not failures, detail)]


def check_metrics() -> List[Check]:
    cm = accumulate(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    _, mean = miou(cm)
    macc, aacc = macc_aacc(cm)
    worked = math.isclose(mean, 7 / 12) and math.isclose(macc, 0.75) and math.isclose(aacc, 0.75)
    results = [("worked example", worked, f"mIoU {mean:.4f}, mAcc {macc:.4f}, aAcc {aacc:.4f}")]

    masks = (np.arange(512)[:, None] >> np.arange(9)) & 1
    mismatches = 0
    for label in masks:
        for pred in masks:
            cm = accumulate(ConfusionMatrix(2), pred, label)
            per_class, mean = miou(cm)
            macc, aacc = macc_aacc(cm)
            expected = [set_iou(pred, label, c) for c in (0, 1)]
            present = [v for v in expected if not math.isnan(v)]
            recalls = [np.count_nonzero((pred == c) & (label == c)) / np.count_nonzero(label == c)
                       for c in (0, 1) if np.count_nonzero(label == c)]
            ok = all((math.isnan(a) and math.isnan(b)) or a == b for a, b in zip(per_class, expected))
            ok = ok and math.isclose(mean, sum(present) / len(present), abs_tol=1e-15)
            ok = ok and math.isclose(macc, sum(recalls) / len(recalls), abs_tol=1e-15)
            ok = ok and aacc == np.count_nonzero(pred == label) / 9
            mismatches += not ok
    results.append(("2-class 3x3 oracle", mismatches == 0, f"{len(masks) ** 2 - mismatches}/{len(masks) ** 2}"))
    return results


def check_pipeline(runner: ExperimentRunner, seg_runner: ExperimentRunner, volumes: int) -> List[Check]:
    results = []
    manifest = runner.prepare(phantom=volumes)
    counts = manifest.counts()
    worst = max(abs(counts[s]["negative"] - round_half_up(counts[s]["positive"] / r))
                for s, r in zip(("train", "val", "test"), manifest.ratios))
    results.append(("classification ratios", worst <= 1, str(manifest.report()["achieved"])))
    results.append(("classification volumes disjoint", not shares_volumes(manifest), manifest.task))

    seg = seg_runner.prepare(phantom=volumes)
    sizes = [len(seg.splits[s]) for s in ("train", "val", "test")]
    ideal = largest_remainder(sum(sizes), seg.ratios)
    results.append(("segmentation 8:1:1", max(abs(a - b) for a, b in zip(sizes, ideal)) <= 1, str(sizes)))

    positives = [r for r in manifest.train if r.is_positive][:5]
    expanded = expand_positives(positives, 40, seed=runner.seed)
    results.append(("40x expansion", len(expanded) == 40 * len(positives), f"{len(expanded)} records"))

    rng = np.random.default_rng(runner.seed)
    leaks, built = 0, 0
    for trial in range(50):
        n_vol = int(rng.integers(12, 40))
        records = [SliceRecord(None, Provenance(f"v{int(rng.integers(n_vol))}", "z", i), label=int(rng.random() < 0.4))
                   for i in range(int(rng.integers(60, 200)))]
        builders = (
            lambda: build_splits_classification([r for r in records if r.is_positive],
                                                [r for r in records if not r.is_positive], seed=trial),
            lambda: build_splits_segmentation(records, seed=trial),
        )
        for build in builders:
            try:
                split = build()
            except DataError:
                continue
            built += 1
            leaks += shares_volumes(split)
    results.append(("leakage guard property", leaks == 0 and built > 0, f"{leaks} leaking of {built} splits"))
    return results


def loss_decreases(curves, metric: str, points: int = 5) -> bool:
    """Mean train loss between consecutive evaluation points strictly decreases."""
    evals = curves.index[curves[metric].notna()].tolist()[:points]
    means, start = [], 0
    for end in evals:
        means.append(curves["train_loss"].iloc[start:end + 1].mean())
        start = end + 1
    return len(means) == points and all(b < a for a, b in zip(means, means[1:]))


def check_training(runner: ExperimentRunner, seg_runner: ExperimentRunner) -> List[Check]:
    result = runner.train()
    report = runner.evaluate(str(result.checkpoints["best"]), split="val")
    results = [
        ("phantom classification top-1", report.top1 >= 0.95, f"{report.top1:.3f}"),
        ("classification loss curve", loss_decreases(result.curves, "val_top1"), str(result.curves_path)),
    ]
    seg_result = seg_runner.train()
    seg_report = seg_runner.evaluate(str(seg_result.checkpoints["best"]), split="val")
    results += [
        ("phantom segmentation mIoU", seg_report.miou >= 0.80, f"{seg_report.miou:.3f}"),
        ("segmentation loss curve", loss_decreases(seg_result.curves, "val_miou"), str(seg_result.curves_path)),
    ]
    return results


def check_determinism(config: dict, volumes: int) -> List[Check]:
    out = Path(config["output_dir"])
    runs = []
    for name in ("repeat_a", "repeat_b"):
        cfg = load_config(None, {**config, "output_dir": str(out / name),
                                 "train": {**config["train"], "epochs": 1}})
        runner = ExperimentRunner(cfg, show_progress=False)
        runner.prepare(phantom=volumes)
        runs.append((runner.dataset_dir / "manifest.json", runner.train().curves_path))
    (manifest_a, curves_a), (manifest_b, curves_b) = runs
    return [
        ("manifests bit-identical", filecmp.cmp(manifest_a, manifest_b, shallow=False), manifest_a.name),
        ("loss CSVs bit-identical", filecmp.cmp(curves_a, curves_b, shallow=False), curves_a.name),
    ]


def runner_config(out: Path, seed: int, task: str, expand: int, epochs: int, iterations: int) -> dict:
    train = ({"recipe": "regular", "epochs": epochs, "warmup": 2} if task == "classification"
             else {"recipe": "segmentation", "iterations": iterations, "warmup": 100, "eval_interval": 200})
    return {
        "seed": seed,
        "output_dir": str(out / task),
        "model": {"variant": "swin-toy"},
        "pipeline": {"task": task, "expand_factor": expand},
        "train": train,
    }


@click.command()
@click.option('--out', default='runs/acceptance', help='Working directory for datasets and runs.')
@click.option('--seed', type=int, default=0, help='Seed for every random choice.')
@click.option('--volumes', type=int, default=500, help='Phantom volumes for pipeline and training checks.')
@click.option('--expand-factor', type=int, default=4, help='Positive expansion used for the training datasets.')
@click.option('--epochs', type=int, default=20, help='Classification epochs.')
@click.option('--iterations', type=int, default=2000, help='Segmentation iterations.')
@click.option('--grad-seeds', type=int, default=20, help='Seeds for the gradient checks.')
@click.option('--skip-training', is_flag=True, help='Skip phantom training and the determinism rerun.')
def verify_acceptance(out, seed, volumes, expand_factor, epochs, iterations, grad_seeds, skip_training):
    """
    Runs every acceptance check in sequence and prints a pass/fail table.
    Exits non-zero if anything fails.
    """
    setup_logging(level="INFO", seed=seed)
    set_default_dtype("float64")
    logger.info("🚀 Starting acceptance checks...")
    out = Path(out)
    cls_config = runner_config(out, seed, "classification", expand_factor, epochs, iterations)
    seg_config = runner_config(out, seed, "segmentation", expand_factor, epochs, iterations)
    runner = ExperimentRunner(load_config(None, cls_config), show_progress=False)
    seg_runner = ExperimentRunner(load_config(None, seg_config), show_progress=False)

    steps = [
        ("1️⃣ Model complexity", check_complexity),
        ("2️⃣ Attention scaling", lambda: check_scaling(seed)),
        ("3️⃣ Shift masks", lambda: check_masks(seed)),
        ("4️⃣ Shifted window attention", lambda: check_shifted_attention(seed)),
        ("5️⃣ Gradients", lambda: check_gradients(grad_seeds)),
        ("6️⃣ Metrics", check_metrics),
        ("7️⃣ Pipeline ratios", lambda: check_pipeline(runner, seg_runner, volumes)),
    ]
    if not skip_training:
        steps += [
            ("8️⃣ Phantom training", lambda: check_training(runner, seg_runner)),
            ("9️⃣ Determinism", lambda: check_determinism(cls_config, min(volumes, 40))),
        ]

    results: List[Check] = []
    for title, step in steps:
        logger.info(f"\n{title}...")
        started = time.perf_counter()
        try:
            checks = step()
        except Exception as e:
            logger.exception(f"❌ {title} crashed: {e}")
            checks = [(title, False, f"{type(e).__name__}: {e}")]
        for name, ok, detail in checks:
            (logger.success if ok else logger.error)(f"{'✅' if ok else '❌'} {name}: {detail}")
        logger.info(f"⏱️ {time.perf_counter() - started:.1f}s")
        results += checks

    table = Table(title="Acceptance")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail")
    for name, ok, detail in results:
        table.add_row(name, "[green]pass[/green]" if ok else "[red]FAIL[/red]", detail)
    Console().print(table)

    failed = [name for name, ok, _ in results if not ok]
    if failed:
        logger.error(f"❌ {len(failed)} check(s) failed: {', '.join(failed)}")
        sys.exit(1)
    logger.success("🎉 All acceptance checks passed.")


if __name__ == "__main__":
    verify_acceptance()
