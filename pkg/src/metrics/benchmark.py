"""
Wall-clock benchmark of global vs windowed attention.

Only the attention-matrix term is timed (QKᵀ, softmax, AV); the projections
cost the same in both and would blur the slope. Kernels run in float32 and
the global kernel walks the queries in chunks so the full (hw)² matrix is
never held at once.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from src.core.errors import ConfigError, UsageError
from src.metrics.complexity import flops_msa, flops_wmsa

MIN_POINTS = 4
CHUNK_ELEMENTS = 1 << 24
MIN_MEASURE_SECONDS = 0.02


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def global_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    n, c = q.shape
    scale = np.float32(c ** -0.5)
    rows = max(1, CHUNK_ELEMENTS // n)
    out = np.empty_like(v)
    kt = k.T
    for start in range(0, n, rows):
        scores = (q[start:start + rows] * scale) @ kt
        out[start:start + rows] = _softmax_rows(scores) @ v
    return out


def window_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, h: int, w: int, m: int) -> np.ndarray:
    c = q.shape[-1]

    def part(t):
        return t.reshape(h // m, m, w // m, m, c).transpose(0, 2, 1, 3, 4).reshape(-1, m * m, c)

    qw, kw, vw = part(q), part(k), part(v)
    scores = (qw * np.float32(c ** -0.5)) @ kw.transpose(0, 2, 1)
    out = _softmax_rows(scores) @ vw
    return out.reshape(h // m, w // m, m, m, c).transpose(0, 2, 1, 3, 4).reshape(h * w, c)


def _time(fn: Callable[[], object], repeats: int) -> float:
    """Best per-call time over `repeats` measurements, each looping until it spans MIN_MEASURE_SECONDS."""
    loops = 1
    while True:
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        elapsed = time.perf_counter() - start
        if elapsed >= MIN_MEASURE_SECONDS:
            break
        loops *= 2
    best = elapsed / loops
    for _ in range(repeats - 1):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        best = min(best, (time.perf_counter() - start) / loops)
    return best


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64)), 1)[0])


@dataclass
class BenchResult:
    table: pd.DataFrame
    slopes: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> Dict[str, float]:
        return {"window_slope": self.slopes["window"], "global_slope": self.slopes["global"],
                "window_ok": 0.8 <= self.slopes["window"] <= 1.3,
                "global_ok": 1.6 <= self.slopes["global"] <= 2.3}


def run_benchmark(sizes: Sequence[int] = (14, 28, 56, 112), dim: int = 96, window: int = 7,
                  seed: int = 0, repeats: int = 3) -> BenchResult:
    """
    Time both kernels on square h = w grids and fit log-log slopes of
    seconds against token count. Analytic columns come from flops_msa and
    flops_wmsa.
    """
    sizes = [int(s) for s in sizes]
    if len(set(sizes)) < MIN_POINTS:
        raise UsageError(f"benchmark needs at least {MIN_POINTS} distinct sizes for a slope fit, got {sizes}")
    for s in sizes:
        if s < window or s % window:
            raise ConfigError(f"size {s} is not a positive multiple of window {window}")

    rng = np.random.default_rng(seed)
    rows = []
    for s in sizes:
        n = s * s
        q, k, v = (rng.standard_normal((n, dim), dtype=np.float32) for _ in range(3))
        t_global = _time(lambda: global_attention(q, k, v), repeats)
        t_window = _time(lambda: window_attention(q, k, v, s, s, window), repeats)
        logger.debug(f"⏱️ {s}x{s}: global {t_global * 1e3:.2f} ms, window {t_window * 1e3:.3f} ms")
        rows.append({
            "h": s, "w": s, "tokens": n,
            "global_seconds": t_global, "window_seconds": t_window,
            "flops_msa": flops_msa(s, s, dim), "flops_wmsa": flops_wmsa(s, s, dim, window),
            "msa_attention_term": 2 * n * n * dim, "wmsa_attention_term": 2 * window * window * n * dim,
        })

    table = pd.DataFrame(rows)
    slopes = {
        "global": loglog_slope(table["tokens"], table["global_seconds"]),
        "window": loglog_slope(table["tokens"], table["window_seconds"]),
    }
    logger.info(f"📈 slopes vs tokens: global {slopes['global']:.2f}, window {slopes['window']:.2f}")
    return BenchResult(table, slopes)
