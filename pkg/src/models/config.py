"""
Swin backbone hyperparameters and the named variants.
"""

from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

from src.core.errors import ConfigError

NUM_STAGES = 4


def shift_size(window_size: int) -> int:
    """Cyclic shift used by SW-MSA blocks: ⌊M / 2⌋."""
    if window_size < 1:
        raise ConfigError(f"window size must be >= 1, got {window_size}")
    return window_size // 2


@dataclass(frozen=True)
class SwinConfig:
    img_size: int = 224
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    num_heads: Tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    num_classes: int = 2
    variant: str = "custom"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        self.validate()

    def validate(self) -> None:
        if len(self.depths) != NUM_STAGES or len(self.num_heads) != NUM_STAGES:
            raise ConfigError(f"depths and num_heads need {NUM_STAGES} entries, got {self.depths} / {self.num_heads}")
        if any(d < 0 or d % 2 for d in self.depths):
            raise ConfigError(f"every stage depth must be an even count of blocks, got {self.depths}")
        if self.patch_size < 1 or self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} is not divisible by patch_size {self.patch_size}")
        grid = self.img_size // self.patch_size
        if grid % 2 ** (NUM_STAGES - 1):
            raise ConfigError(f"token grid {grid} cannot be halved {NUM_STAGES - 1} times by patch merging")
        if self.window_size < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window_size}")
        for i in range(NUM_STAGES):
            if self.num_heads[i] < 1 or self.stage_dim(i) % self.num_heads[i]:
                raise ConfigError(f"stage {i} dim {self.stage_dim(i)} not divisible by {self.num_heads[i]} heads")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must be in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def stage_resolution(self, stage: int) -> int:
        return self.img_size // self.patch_size // 2 ** stage

    def stage_window(self, stage: int) -> Tuple[int, int]:
        """(window, shift) for a stage; a grid no larger than M uses one unshifted window."""
        resolution = self.stage_resolution(stage)
        if resolution <= self.window_size:
            return resolution, 0
        return self.window_size, shift_size(self.window_size)

    def drop_path_rates(self) -> List[float]:
        """Linear ramp from 0 at the first block to drop_path_rate at the last."""
        total = sum(self.depths)
        if total <= 1:
            return [0.0] * total
        return [self.drop_path_rate * i / (total - 1) for i in range(total)]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["depths"] = list(self.depths)
        data["num_heads"] = list(self.num_heads)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SwinConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SwinConfig keys: {sorted(unknown)}")
        return cls(**data)


VARIANTS: Dict[str, SwinConfig] = {
    "swin-t": SwinConfig(img_size=224, embed_dim=96, depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24),
                         window_size=7, drop_path_rate=0.2, variant="swin-t"),
    "swin-s": SwinConfig(img_size=224, embed_dim=96, depths=(2, 2, 18, 2), num_heads=(3, 6, 12, 24),
                         window_size=7, drop_path_rate=0.3, variant="swin-s"),
    "swin-b": SwinConfig(img_size=224, embed_dim=128, depths=(2, 2, 18, 2), num_heads=(4, 8, 16, 32),
                         window_size=7, drop_path_rate=0.5, variant="swin-b"),
    "swin-b-384": SwinConfig(img_size=384, embed_dim=128, depths=(2, 2, 18, 2), num_heads=(4, 8, 16, 32),
                             window_size=12, drop_path_rate=0.5, variant="swin-b-384"),
    "swin-toy": SwinConfig(img_size=64, embed_dim=32, depths=(2, 2, 2, 2), num_heads=(2, 4, 8, 16),
                           window_size=4, drop_path_rate=0.1, variant="swin-toy"),
}


def get_variant(name: str, resolution: Optional[int] = None, **overrides: Any) -> SwinConfig:
    """Look up a variant; a 384 resolution on swin-b selects the M = 12 preset."""
    key = name.lower()
    if key == "swin-b" and resolution == 384:
        key = "swin-b-384"
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant '{name}', choose from {sorted(VARIANTS)}")
    base = VARIANTS[key]
    if resolution is not None:
        overrides.setdefault("img_size", resolution)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **overrides)


def config_from_run(model_section) -> SwinConfig:
    """SwinConfig from the `model` section of a RunConfig."""
    overrides = {
        key: model_section[key]
        for key in ("patch_size", "in_channels", "embed_dim", "depths", "num_heads",
                    "window_size", "mlp_ratio", "drop_path_rate", "num_classes")
        if model_section.get(key) is not None
    }
    return get_variant(model_section["variant"], resolution=model_section.get("img_size"), **overrides)
