"""
Synthetic CT phantoms: noisy lung-like background with an optional bright
spherical nodule of known centre and radius.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

import numpy as np
from loguru import logger

from src.core.errors import ConfigError
from src.extractors.volume_extractor import (
    MASK_SUFFIX,
    NoduleAnnotation,
    Volume,
    save_volume,
    sphere_mask,
    write_annotations,
)

BACKGROUND_HU = -700.0
BACKGROUND_NOISE = 60.0
NODULE_HU = 50.0
NODULE_NOISE = 20.0
RADIUS_RANGE = (3, 8)
MIN_SIZE = 16


@dataclass
class PhantomSet:
    volumes: List[Volume] = field(default_factory=list)
    annotations: List[NoduleAnnotation] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)

    def save(self, directory: Union[str, Path]) -> Path:
        """Write volumes, masks and annotations in the layout `prepare` reads."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for volume, mask in zip(self.volumes, self.masks):
            save_volume(directory / f"{volume.id}.swv", volume)
            save_volume(directory / f"{volume.id}{MASK_SUFFIX}", Volume(volume.id, mask, volume.spacing))
        write_annotations(directory / "annotations.jsonl", self.annotations)
        return directory


def make_phantom(seed: int, n_volumes: int, size: int = 64, nodule_prob: float = 0.5) -> PhantomSet:
    """
    Args:
        seed: Dataset seed; volume i draws from ``default_rng([seed, i])``.
        n_volumes: Number of volumes.
        size: Edge length of each cubic volume (>= 16).
        nodule_prob: Probability that a volume holds a nodule.
    """
    if size < MIN_SIZE:
        raise ConfigError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    if not 0.0 <= nodule_prob <= 1.0:
        raise ConfigError("nodule_prob must be in [0, 1]")

    phantoms = PhantomSet()
    for i in range(n_volumes):
        rng = np.random.default_rng([seed, i])
        volume_id = f"phantom_{i:04d}"
        voxels = BACKGROUND_HU + BACKGROUND_NOISE * rng.standard_normal((size, size, size))
        mask = np.zeros((size, size, size), dtype=np.uint8)
        if rng.random() < nodule_prob:
            radius = int(rng.integers(RADIUS_RANGE[0], min(RADIUS_RANGE[1], (size - 4) // 2) + 1))
            center = tuple(int(c) for c in rng.integers(radius + 1, size - radius - 1, size=3))
            mask = sphere_mask(mask.shape, center, radius)
            nodule = NODULE_HU + NODULE_NOISE * rng.standard_normal(int(mask.sum()))
            voxels[mask.astype(bool)] = nodule
            phantoms.annotations.append(NoduleAnnotation(volume_id, center, diameter_mm=2.0 * radius))
        voxels = np.clip(np.round(voxels), -1024, 3071).astype(np.int16)
        phantoms.volumes.append(Volume(volume_id, voxels))
        phantoms.masks.append(mask)

    logger.info(f"🧪 Generated {n_volumes} phantom volumes ({len(phantoms.annotations)} with nodules)")
    return phantoms
