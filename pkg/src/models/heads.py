"""
Task heads and losses.

Heads return logits; softmax only appears inside the losses and in the
`predict` paths.
"""

from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor, no_grad, parameter
from src.core.errors import ConfigError
from src.models.config import NUM_STAGES, SwinConfig
from src.models.layers import LayerNorm, Linear, Module, ModuleList, trunc_normal
from src.models.swin import SwinBackbone, as_tensor

IGNORE_INDEX = 255


class ClassifierHead(Module):
    """LayerNorm, global average pool over tokens, linear map to class logits."""

    def __init__(self, dim: int, num_classes: int, eps: float = 1e-5,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.dim, self.num_classes = dim, num_classes
        self.norm = LayerNorm(dim, eps)
        self.head = Linear(dim, num_classes, rng=rng)

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.dim:
            raise ConfigError(f"classifier head expects {self.dim}-dim features, got {features.shape[-1]}")
        b = features.shape[0]
        tokens = self.norm(features).reshape(b, -1, self.dim)
        return self.head(F.mean(tokens, axis=1))


class SegDecoder(Module):
    """
    FPN-style fusion: per-stage linear laterals to a shared dim, nearest
    upsampling to the first-stage grid, sum, 3×3 conv, per-pixel
    classifier, then bilinear upsampling of the logits to the image size.

    The classifier runs before the final upsample; both maps are linear and
    bilinear weights sum to one, so the result equals classifying the
    upsampled features.
    """

    def __init__(self, stage_dims: Sequence[int], num_classes: int, decoder_dim: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if len(stage_dims) != NUM_STAGES:
            raise ConfigError(f"decoder needs {NUM_STAGES} stage dims, got {list(stage_dims)}")
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stage_dims = tuple(stage_dims)
        self.decoder_dim = decoder_dim or stage_dims[0]
        self.num_classes = num_classes
        self.laterals = ModuleList([Linear(d, self.decoder_dim, rng=rng) for d in stage_dims])
        self.fuse_weight = parameter(trunc_normal((9 * self.decoder_dim, self.decoder_dim), rng))
        self.fuse_bias = parameter(np.zeros(self.decoder_dim))
        self.classifier = Linear(self.decoder_dim, num_classes, rng=rng)

    def forward(self, features: List[Tensor], out_size: Tuple[int, int]) -> Tensor:
        if len(features) != NUM_STAGES:
            raise ConfigError(f"decoder needs {NUM_STAGES} feature maps, got {len(features)}")
        base_h = features[0].shape[1]
        fused = None
        for i, (feat, lateral) in enumerate(zip(features, self.laterals)):
            if feat.shape[-1] != self.stage_dims[i]:
                raise ConfigError(f"stage {i} features have dim {feat.shape[-1]}, decoder expects {self.stage_dims[i]}")
            x = F.resize_nearest(lateral(feat), base_h // feat.shape[1])
            fused = x if fused is None else fused + x
        fused = F.conv3x3(fused, self.fuse_weight, self.fuse_bias)
        logits = self.classifier(fused)
        return F.resize_bilinear(logits, out_size[0], out_size[1])


def classify(features: Tensor, head: ClassifierHead) -> Tensor:
    """Class probabilities for final-stage features."""
    return F.softmax(head(features), axis=-1)


def segment(stage_features: List[Tensor], decoder: SegDecoder, out_size: Tuple[int, int]) -> Tensor:
    """Per-pixel logits [B, H, W, num_classes]."""
    return decoder(stage_features, out_size)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of −Σ_c y_c log p_c over samples, fused with the softmax."""
    return F.cross_entropy(logits, labels)


def pixel_cross_entropy(logits: Tensor, mask: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Per-pixel cross entropy averaged over pixels whose mask value is not `ignore_index`."""
    k = logits.shape[-1]
    mask = np.asarray(mask)
    if mask.shape != logits.shape[:-1]:
        raise ConfigError(f"mask shape {mask.shape} does not match logits {logits.shape[:-1]}")
    return F.cross_entropy(logits.reshape(-1, k), mask.reshape(-1), ignore_index=ignore_index)


class SwinClassifier(Module):
    def __init__(self, cfg: SwinConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.backbone = SwinBackbone(cfg, seed)
        self.head = ClassifierHead(cfg.stage_dim(NUM_STAGES - 1), cfg.num_classes, cfg.layer_norm_eps,
                                   rng=np.random.default_rng([seed, 1]))

    def forward(self, images: Union[Tensor, np.ndarray]) -> Tensor:
        return self.head(self.backbone(images)[-1])

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Class probabilities [B, num_classes] in evaluation mode."""
        with evaluating(self), no_grad():
            return F.softmax(self.forward(images), axis=-1).numpy()

    def loss(self, images, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.forward(images), labels)


class SwinSegmenter(Module):
    def __init__(self, cfg: SwinConfig, seed: int = 0, decoder_dim: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = SwinBackbone(cfg, seed)
        dims = [cfg.stage_dim(i) for i in range(NUM_STAGES)]
        self.decode_head = SegDecoder(dims, cfg.num_classes, decoder_dim, rng=np.random.default_rng([seed, 2]))

    def forward(self, images: Union[Tensor, np.ndarray]) -> Tensor:
        images = as_tensor(images)
        return segment(self.backbone(images), self.decode_head, images.shape[1:3])

    def predict(self, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(mask uint8 [B, H, W], probabilities [B, H, W, K]) in evaluation mode."""
        with evaluating(self), no_grad():
            probs = F.softmax(self.forward(images), axis=-1).numpy()
        return probs.argmax(axis=-1).astype(np.uint8), probs

    def loss(self, images, masks: np.ndarray) -> Tensor:
        return pixel_cross_entropy(self.forward(images), masks)


@contextmanager
def evaluating(module: Module) -> Iterator[Module]:
    """Put a module in eval mode for a block and restore its previous mode."""
    previous = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(previous)


def build_model(cfg: SwinConfig, task: str, seed: int = 0) -> Module:
    if task == "classification":
        return SwinClassifier(cfg, seed)
    if task == "segmentation":
        return SwinSegmenter(cfg, seed)
    raise ConfigError(f"unknown task '{task}'")
