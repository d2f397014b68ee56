"""
Analytic parameter and FLOP counts.

FLOPs are multiply-accumulates (1 MAC = 1 FLOP) of every linear, matmul and
convolution; norms, softmax, GELU, residual additions and resampling are
not counted.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

from src.core.errors import ConfigError, NumericError
from src.models.config import NUM_STAGES, VARIANTS, SwinConfig

INT64_MAX = 2 ** 63 - 1
HEAD_KINDS = ("classification", "segmentation", "none")


def _checked(value: int, what: str) -> int:
    if value > INT64_MAX:
        raise NumericError(f"{what} = {value} exceeds the int64 range")
    return value


def _positive(**values: int) -> None:
    for name, v in values.items():
        if int(v) != v or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v}")


def flops_msa(h: int, w: int, c: int) -> int:
    """Global multi-head self-attention: 4hwC² + 2(hw)²C."""
    _positive(h=h, w=w, C=c)
    hw = int(h) * int(w)
    return _checked(4 * hw * c * c + 2 * hw * hw * c, "flops_msa")


def flops_wmsa(h: int, w: int, c: int, m: int) -> int:
    """Window attention with M×M windows: 4hwC² + 2M²hwC."""
    _positive(h=h, w=w, C=c, M=m)
    if h % m or w % m:
        raise ConfigError(f"window {m} does not divide the {h}x{w} grid")
    hw = int(h) * int(w)
    return _checked(4 * hw * c * c + 2 * m * m * hw * c, "flops_wmsa")


@dataclass
class ComplexityReport:
    variant: str
    resolution: int
    head: str
    num_classes: int
    params: Dict[str, int] = field(default_factory=dict)
    flops: Dict[str, int] = field(default_factory=dict)
    attention: Dict[str, int] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "resolution": self.resolution,
            "head": self.head,
            "num_classes": self.num_classes,
            "params": self.total_params,
            "flops": self.total_flops,
            "params_by_module": dict(self.params),
            "flops_by_module": dict(self.flops),
            "attention": dict(self.attention),
        }


def _linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def _block_counts(dim: int, heads: int, res: int, window: int, mlp_ratio: float):
    hidden = int(dim * mlp_ratio)
    padded = -(-res // window) * window
    tokens, padded_tokens = res * res, padded * padded
    params = (
        2 * dim
        + _linear_params(dim, 3 * dim)
        + (2 * window - 1) ** 2 * heads
        + _linear_params(dim, dim)
        + 2 * dim
        + _linear_params(dim, hidden)
        + _linear_params(hidden, dim)
    )
    attn_proj = padded_tokens * dim * 3 * dim + padded_tokens * dim * dim
    attn_core = 2 * padded_tokens * window * window * dim
    mlp = 2 * tokens * dim * hidden
    return params, attn_proj + attn_core + mlp


def count_model(cfg: SwinConfig, head: str = "classification", num_classes: Optional[int] = None,
                resolution: Optional[int] = None, decoder_dim: Optional[int] = None) -> ComplexityReport:
    if head not in HEAD_KINDS:
        raise ConfigError(f"head must be one of {HEAD_KINDS}")
    overrides = {}
    if resolution is not None:
        overrides["img_size"] = resolution
    if num_classes is not None:
        overrides["num_classes"] = num_classes
    cfg = replace(cfg, **overrides) if overrides else cfg

    report = ComplexityReport(cfg.variant, cfg.img_size, head, cfg.num_classes)
    c = cfg.embed_dim
    grid = cfg.img_size // cfg.patch_size
    report.params["patch_embed"] = _linear_params(cfg.patch_dim, c) + 2 * c
    report.flops["patch_embed"] = grid * grid * cfg.patch_dim * c

    msa_total = wmsa_total = 0
    for i in range(NUM_STAGES):
        dim, res = cfg.stage_dim(i), cfg.stage_resolution(i)
        window, _ = cfg.stage_window(i)
        params = flops = 0
        if i > 0:
            prev = cfg.stage_dim(i - 1)
            params += 2 * 4 * prev + _linear_params(4 * prev, 2 * prev, bias=False)
            flops += res * res * 4 * prev * 2 * prev
        for _ in range(cfg.depths[i]):
            p, f = _block_counts(dim, cfg.num_heads[i], res, window, cfg.mlp_ratio)
            params += p
            flops += f
            if res % window == 0:
                wmsa_total += flops_wmsa(res, res, dim, window)
            msa_total += flops_msa(res, res, dim)
        report.params[f"stage{i}"] = params
        report.flops[f"stage{i}"] = _checked(flops, f"stage{i} flops")

    final = cfg.stage_dim(NUM_STAGES - 1)
    if head == "classification":
        report.params["head"] = 2 * final + _linear_params(final, cfg.num_classes)
        report.flops["head"] = final * cfg.num_classes
    elif head == "segmentation":
        dd = decoder_dim or c
        base = cfg.stage_resolution(0)
        params = flops = 0
        for i in range(NUM_STAGES):
            params += _linear_params(cfg.stage_dim(i), dd)
            flops += cfg.stage_resolution(i) ** 2 * cfg.stage_dim(i) * dd
        params += _linear_params(9 * dd, dd) + _linear_params(dd, cfg.num_classes)
        flops += base * base * (9 * dd * dd + dd * cfg.num_classes)
        report.params["decoder"] = params
        report.flops["decoder"] = flops

    report.attention = {"msa": msa_total, "wmsa": wmsa_total}
    _checked(report.total_flops, "total flops")
    return report


def count_all(resolution: int = 224, num_classes: int = 1000, head: str = "classification") -> List[ComplexityReport]:
    """Reports for the named ImageNet-scale variants (swin-b also at 384 with M = 12)."""
    reports = []
    for name in ("swin-t", "swin-s", "swin-b"):
        reports.append(count_model(VARIANTS[name], head, num_classes, resolution))
    if resolution == 224:
        reports.append(count_model(VARIANTS["swin-b-384"], head, num_classes, 384))
    return reports
