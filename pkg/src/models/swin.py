"""
Swin Transformer backbone: patch embedding, patch merging, window attention
with relative position bias, W-MSA/SW-MSA block pairs and the four-stage
hierarchy. Feature maps are channels-last: [B, H, W, C].
"""

from typing import List, Optional, Sequence, Union

import numpy as np

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor, parameter
from src.core.errors import ConfigError, ShapeError
from src.models.config import NUM_STAGES, SwinConfig
from src.models.layers import DropPath, LayerNorm, Linear, Mlp, Module, ModuleList, constant
from src.models.windows import padded_attention_mask, relative_position_index, window_partition, window_reverse


def as_tensor(images: Union[Tensor, np.ndarray]) -> Tensor:
    return images if isinstance(images, Tensor) else constant(images)


class PatchEmbed(Module):
    """Non-overlapping p×p patches flattened (row, col, channel) and projected to C."""

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int,
                 eps: float = 1e-5, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * in_channels, embed_dim, rng=rng)
        self.norm = LayerNorm(embed_dim, eps)

    def forward(self, images: Tensor) -> Tensor:
        b, h, w, c = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"image not divisible into {p}x{p} patches", [images.shape])
        x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // p, w // p, p * p * c)
        return self.norm(self.proj(x))


class PatchMerging(Module):
    """2×2 neighbourhood concat (TL, BL, TR, BR) -> LayerNorm(4D) -> Linear(4D, 2D)."""

    def __init__(self, dim: int, eps: float = 1e-5, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.norm = LayerNorm(4 * dim, eps)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ShapeError("patch merging needs an even grid", [x.shape])
        x = x.reshape(b, h // 2, 2, w // 2, 2, d).transpose(0, 1, 3, 4, 2, 5)
        x = x.reshape(b, h // 2, w // 2, 4 * d)
        return self.reduction(self.norm(x))


class WindowAttention(Module):
    """Multi-head self-attention inside M×M windows with a learned relative position bias B."""

    def __init__(self, dim: int, num_heads: int, window: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads, self.window = dim, num_heads, window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.relative_position_bias_table = parameter(np.zeros(((2 * window - 1) ** 2, num_heads)))
        self.proj = Linear(dim, dim, rng=rng)

    def relative_position_bias(self) -> Tensor:
        index = relative_position_index(self.window)
        bias = F.take(self.relative_position_bias_table, index)
        return bias.transpose(2, 0, 1)

    def forward(self, windows: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        bnw, n, d = windows.shape
        heads = self.num_heads
        if d != self.dim or n != self.window * self.window:
            raise ShapeError(f"attention expects [*, {self.window ** 2}, {self.dim}]", [windows.shape])
        qkv = self.qkv(windows).reshape(bnw, n, 3, heads, d // heads).transpose(2, 0, 3, 1, 4)
        q = qkv[0] * self.scale
        k, v = qkv[1], qkv[2]
        attn = q @ k.transpose(0, 1, 3, 2)
        attn = attn + self.relative_position_bias()
        if mask is not None:
            nw = mask.shape[0]
            if bnw % nw or mask.shape[1:] != (n, n):
                raise ConfigError(f"mask for {nw} windows does not fit {bnw} windows of {n} tokens")
            full = constant(np.broadcast_to(mask[:, None], (nw, heads, n, n)))
            attn = (attn.reshape(bnw // nw, nw, heads, n, n) + full).reshape(bnw, heads, n, n)
        attn = F.softmax(attn, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(bnw, n, d)
        return self.proj(out)


class SwinBlock(Module):
    """
    z' = (S)W-MSA(LN(z)) + z ; z'' = MLP(LN(z')) + z'.

    A non-zero shift rolls the grid by (−s, −s) before partitioning and
    masks pairs that were not adjacent before the roll.
    """

    def __init__(self, dim: int, num_heads: int, window: int, shift: int, mlp_ratio: float = 4.0,
                 drop_path: float = 0.0, eps: float = 1e-5, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0 <= shift < max(window, 1):
            raise ConfigError(f"shift {shift} must lie in [0, {window})")
        self.window, self.shift = window, shift
        self.norm1 = LayerNorm(dim, eps)
        self.attn = WindowAttention(dim, num_heads, window, rng=rng)
        self.drop_path = DropPath(drop_path)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng=rng)

    def attention_branch(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        m, s = self.window, self.shift
        pad_h, pad_w = (-h) % m, (-w) % m
        y = self.norm1(x)
        if pad_h or pad_w:
            y = F.pad(y, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
        if s:
            y = F.roll(y, (-s, -s), (1, 2))
        hp, wp = y.shape[1], y.shape[2]
        mask = padded_attention_mask(h, w, m, s) if (s or pad_h or pad_w) else None
        y = window_reverse(self.attn(window_partition(y, m), mask), hp, wp, m)
        if s:
            y = F.roll(y, (s, s), (1, 2))
        if pad_h or pad_w:
            y = y[:, :h, :w, :]
        return y

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop_path(self.attention_branch(x))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class SwinStage(Module):
    """Optional patch merging followed by alternating W-MSA / SW-MSA blocks."""

    def __init__(self, cfg: SwinConfig, stage: int, drop_rates: Sequence[float],
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        dim = cfg.stage_dim(stage)
        window, shift = cfg.stage_window(stage)
        self.downsample = PatchMerging(cfg.stage_dim(stage - 1), cfg.layer_norm_eps, rng=rng) if stage > 0 else None
        self.blocks = ModuleList([
            SwinBlock(dim, cfg.num_heads[stage], window, shift if i % 2 else 0, cfg.mlp_ratio,
                      drop_rates[i], cfg.layer_norm_eps, rng=rng)
            for i in range(cfg.depths[stage])
        ])

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for i in range(0, len(self.blocks), 2):
            x = swin_block_pair(x, self.blocks[i], self.blocks[i + 1])
        return x


class SwinBackbone(Module):
    def __init__(self, cfg: SwinConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        rates = cfg.drop_path_rates()
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim, cfg.layer_norm_eps, rng=rng)
        stages, start = [], 0
        for i in range(NUM_STAGES):
            stages.append(SwinStage(cfg, i, rates[start:start + cfg.depths[i]], rng=rng))
            start += cfg.depths[i]
        self.stages = ModuleList(stages)
        self.manual_seed(seed)

    def forward(self, images: Union[Tensor, np.ndarray]) -> List[Tensor]:
        images = as_tensor(images)
        expected = (self.cfg.img_size, self.cfg.img_size, self.cfg.in_channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ConfigError(f"backbone expects images [B, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
        x = self.patch_embed(images)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


def swin_block_pair(x: Tensor, regular: SwinBlock, shifted: SwinBlock) -> Tensor:
    """The four residual updates: W-MSA, MLP, SW-MSA, MLP."""
    return shifted(regular(x))


def forward_backbone(images: Union[Tensor, np.ndarray], backbone: SwinBackbone) -> List[Tensor]:
    """Stage outputs at resolutions H/4, H/8, H/16, H/32 with dims C, 2C, 4C, 8C."""
    return backbone(images)
