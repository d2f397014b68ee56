# Swin backbone, task heads and checkpoints
from src.models.config import VARIANTS, SwinConfig, get_variant
from src.models.heads import SwinClassifier, SwinSegmenter, build_model
from src.models.swin import SwinBackbone

__all__ = ["SwinBackbone", "SwinClassifier", "SwinConfig", "SwinSegmenter", "VARIANTS", "build_model", "get_variant"]
