"""
In-memory slice dataset with seeded batch iteration.
"""

from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff.tensor import get_default_dtype
from src.core.errors import UsageError
from src.extractors.volume_extractor import SliceRecord
from src.processors.augmentation import augment, random_plan
from src.processors.dataset_builder import load_dataset

SEG_SCALE_RANGE = (0.5, 2.0)

Batch = Tuple[np.ndarray, np.ndarray]


class SliceDataset:
    def __init__(self, records: Sequence[SliceRecord], task: str):
        if not records:
            raise UsageError(f"empty {task} dataset")
        self.records = list(records)
        self.task = task
        self.images = np.stack([np.asarray(r.image, dtype=np.float32) for r in self.records])
        if task == "segmentation":
            self.targets = np.stack([np.asarray(r.mask, dtype=np.int64) for r in self.records])
        else:
            self.targets = np.array([r.label for r in self.records], dtype=np.int64)

    @classmethod
    def from_directory(cls, directory: Union[str, Path], split: str) -> "SliceDataset":
        manifest = load_dataset(directory)
        if split not in manifest.splits:
            raise UsageError(f"dataset has no split '{split}'")
        return cls(manifest.splits[split], manifest.task)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def img_size(self) -> int:
        return self.images.shape[1]

    def _augmented(self, index: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        plan = random_plan(rng, scale_range=SEG_SCALE_RANGE, photometric=True)
        rec = augment(self.records[index], plan)
        target = rec.mask.astype(np.int64) if rec.mask is not None else np.int64(rec.label)
        return np.asarray(rec.image, dtype=np.float32), target

    def batches(
        self,
        batch_size: int,
        seed: Optional[int] = None,
        epoch: int = 0,
        shuffle: bool = True,
        drop_last: bool = True,
        augment_samples: bool = False,
    ) -> Iterator[Batch]:
        """
        Batches in a seeded order; the permutation depends only on
        (seed, epoch). Training drops the incomplete tail batch, evaluation
        keeps it.
        """
        n = len(self)
        batch_size = min(batch_size, n)
        rng = np.random.default_rng([seed or 0, epoch])
        order = rng.permutation(n) if shuffle else np.arange(n)
        stop = n - n % batch_size if drop_last else n
        dtype = get_default_dtype()
        for start in range(0, stop, batch_size):
            idx = order[start:start + batch_size]
            if augment_samples:
                pairs = [self._augmented(int(i), rng) for i in idx]
                images = np.stack([p[0] for p in pairs])
                targets = np.stack([p[1] for p in pairs])
            else:
                images, targets = self.images[idx], self.targets[idx]
            yield images.astype(dtype), targets

    def class_counts(self) -> List[int]:
        if self.task == "segmentation":
            return np.bincount(self.targets.ravel(), minlength=2).tolist()
        return np.bincount(self.targets, minlength=2).tolist()
