"""
Window machinery: partition/reverse, shifted-window region masks and the
relative-position index.

`window_partition` and `window_reverse` only use reshape/transpose, so they
accept both numpy arrays and autodiff tensors.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from src.core.errors import ConfigError, ShapeError

NEG = -100.0
PAD_REGION = 9


def window_partition(x, window: int):
    """[B, H, W, D] -> [B·nW, M², D], windows row-major, tokens row-major."""
    b, h, w, d = x.shape
    if h % window or w % window:
        raise ShapeError(f"grid not divisible by window {window}", [x.shape])
    x = x.reshape(b, h // window, window, w // window, window, d)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // window) * (w // window), window * window, d)


def window_reverse(windows, h: int, w: int, window: int):
    """Inverse of `window_partition`: [B·nW, M², D] -> [B, H, W, D]."""
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    per_image = (h // window) * (w // window)
    if windows.shape[0] % per_image or windows.shape[1] != window * window:
        raise ShapeError(f"window tensor does not hold {per_image} windows of {window}x{window}", [windows.shape])
    b = windows.shape[0] // per_image
    d = windows.shape[2]
    x = windows.reshape(b, h // window, w // window, window, window, d)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, d)


@dataclass
class AttentionMask:
    window_grid: Tuple[int, int]
    mask: np.ndarray
    region_labels: np.ndarray

    @property
    def num_windows(self) -> int:
        return self.mask.shape[0]

    def regions_per_window(self) -> np.ndarray:
        window = self.region_labels.shape[0] // self.window_grid[0]
        windows = window_partition(self.region_labels[None, :, :, None], window)
        return np.array([len(np.unique(win)) for win in windows[:, :, 0]])


def region_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """
    Label the (already cyclically shifted) grid with the 3×3 products of the
    row and column bands [0, h−M), [h−M, h−s), [h−s, h).
    """
    labels = np.zeros((h, w), dtype=np.int64)
    if shift == 0:
        return labels
    bands_h = ((0, h - window), (h - window, h - shift), (h - shift, h))
    bands_w = ((0, w - window), (w - window, w - shift), (w - shift, w))
    region = 0
    for r0, r1 in bands_h:
        for c0, c1 in bands_w:
            labels[r0:r1, c0:c1] = region
            region += 1
    return labels


def _mask_from_labels(labels: np.ndarray, window: int) -> np.ndarray:
    windows = window_partition(labels[None, :, :, None], window)[:, :, 0]
    differs = windows[:, :, None] != windows[:, None, :]
    return np.where(differs, NEG, 0.0)


def build_shift_mask(h: int, w: int, window: int, shift: int) -> AttentionMask:
    """Additive SW-MSA mask: 0 where two tokens share a region, NEG otherwise."""
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} must lie in [0, {window})")
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    labels = region_labels(h, w, window, shift)
    return AttentionMask(
        window_grid=(h // window, w // window),
        mask=_mask_from_labels(labels, window),
        region_labels=labels,
    )


@lru_cache(maxsize=64)
def padded_attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """
    Mask for an h×w grid zero-padded bottom/right to window multiples and then
    rolled by (−s, −s). Padded tokens form their own region so real tokens
    never attend to them.
    """
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    labels = region_labels(hp, wp, window, shift)
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    labels = np.where(valid, labels, PAD_REGION)
    mask = _mask_from_labels(labels, window)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=16)
def relative_position_index(window: int) -> np.ndarray:
    """[M², M²] row of the bias table for every token pair, from (Δrow, Δcol)."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    index = rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]
    index.setflags(write=False)
    return index
