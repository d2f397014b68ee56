"""
Dataset assembly: positive expansion, negative subsampling, ratio-exact
splits with a volume-level leakage guard, and the on-disk dataset layout.

    <dataset>/manifest.json       splits with provenance and slice keys
    <dataset>/report.json         counts and achieved ratios per split
    <dataset>/slices/<key>.swt    float32 [H, W, 3] images
    <dataset>/masks/<key>.swt     uint8 [H, W] masks (segmentation)
"""

import json
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from dotmap import DotMap
from loguru import logger

from src.autodiff.serialization import read_tensor, write_tensor
from src.core.errors import ConfigError, DataError
from src.extractors.volume_extractor import NoduleAnnotation, Provenance, SliceRecord, Volume, VolumeExtractor
from src.processors.augmentation import AugmentPlan, augment, random_plan
from src.utils.helpers import atomic_directory, generate_file_hash, largest_remainder, worker_count

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"
REPORT = "report.json"
MAX_PLAN_DRAWS = 100

T = TypeVar("T")


def parallel_map(fn: Callable[..., T], items: Sequence, workers: Optional[int] = None) -> List[T]:
    """Map over `items` with a thread pool; results keep the input order."""
    workers = workers or worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --- positives and negatives ---

def expansion_plans(count: int, factor: int, seed: int) -> List[List[AugmentPlan]]:
    """For each of `count` records: identity plus factor−1 distinct seeded plans."""
    if factor < 1:
        raise ConfigError(f"expansion factor must be >= 1, got {factor}")
    plans = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        chosen: "OrderedDict[str, AugmentPlan]" = OrderedDict([("orig", AugmentPlan())])
        draws = 0
        while len(chosen) < factor:
            draws += 1
            if draws > MAX_PLAN_DRAWS * factor:
                raise DataError(f"could not draw {factor} distinct augmentations for record {i}")
            plan = random_plan(rng)
            chosen.setdefault(plan.tag, plan)
        plans.append(list(chosen.values()))
    return plans


def expand_positives(records: Sequence[SliceRecord], factor: int = 40, seed: int = 0,
                     workers: Optional[int] = None) -> List[SliceRecord]:
    """Each record becomes `factor` records: itself first, then its augmentations."""
    plans = expansion_plans(len(records), factor, seed)

    def expand(i: int) -> List[SliceRecord]:
        return [augment(records[i], plan) for plan in plans[i]]

    out: List[SliceRecord] = []
    for group in parallel_map(expand, range(len(records)), workers):
        out.extend(group)
    return out


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"negative fraction must be in (0, 1], got {fraction}")
    keep = round_half_up(fraction * n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=keep, replace=False))


def subsample_negatives(records: Sequence[T], fraction: float = 0.2, seed: int = 0) -> List[T]:
    """Seeded uniform sample without replacement of round(fraction·N) records, input order kept."""
    return [records[i] for i in subsample_indices(len(records), fraction, seed)]


# --- splits ---

@dataclass
class SplitManifest:
    task: str
    seed: int
    ratios: List[float]
    splits: Dict[str, List[SliceRecord]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    fractions: Optional[List[float]] = None
    leakage_guard: bool = True
    settings: Dict[str, Any] = field(default_factory=dict)

    @property
    def train(self) -> List[SliceRecord]:
        return self.splits["train"]

    @property
    def val(self) -> List[SliceRecord]:
        return self.splits["val"]

    @property
    def test(self) -> List[SliceRecord]:
        return self.splits["test"]

    def counts(self) -> Dict[str, Dict[str, int]]:
        out = {}
        for name, records in self.splits.items():
            pos = sum(1 for r in records if r.is_positive)
            out[name] = {"total": len(records), "positive": pos, "negative": len(records) - pos}
        return out

    def report(self) -> Dict[str, Any]:
        counts = self.counts()
        achieved = {}
        for name, c in counts.items():
            if self.task == "classification":
                achieved[name] = round(c["positive"] / c["negative"], 4) if c["negative"] else None
            else:
                achieved[name] = c["total"]
        return {"task": self.task, "seed": self.seed, "declared_ratios": self.ratios,
                "counts": counts, "achieved": achieved, "leakage_guard": self.leakage_guard}

    def volumes(self, split: str) -> set:
        return {r.provenance.volume_id for r in self.splits[split]}


def _group_by_volume(records: Sequence[T]) -> "OrderedDict[str, List[int]]":
    groups: "OrderedDict[str, List[int]]" = OrderedDict()
    for i, rec in enumerate(records):
        groups.setdefault(rec.provenance.volume_id, []).append(i)
    return groups


def _assign_groups(sizes: List[Tuple[int, ...]], targets: List[Tuple[float, ...]]) -> List[int]:
    """Greedy: each group goes to the split whose total is furthest below its target."""
    current = [[0] * len(targets[0]) for _ in targets]
    assignment = []
    for size in sizes:
        best, best_deficit = None, None
        for s, target in enumerate(targets):
            want = float(np.sum(target))
            if want <= 0:
                continue
            deficit = (want - float(np.sum(current[s]))) / want
            if best is None or deficit > best_deficit:
                best, best_deficit = s, deficit
        assignment.append(best)
        current[best] = [c + k for c, k in zip(current[best], size)]
    return assignment


def _trim_to_ratio(pos: List[int], neg: List[int], ratio: float) -> Tuple[List[int], List[int]]:
    """Largest prefix pair with n_neg = round(n_pos / ratio)."""
    if round_half_up(len(pos) / ratio) <= len(neg):
        n_pos = len(pos)
    else:
        n_pos = int(math.floor(len(neg) * ratio))
    return pos[:n_pos], neg[:round_half_up(n_pos / ratio)]


def _target_positives(p: int, n: int, ratios: Sequence[float], fractions: Sequence[float]) -> int:
    need = sum(f / r for f, r in zip(fractions, ratios))
    target = min(p, int(math.floor(n / need))) if need > 0 else p
    while target > 0:
        pos = largest_remainder(target, fractions)
        if sum(round_half_up(k / r) for k, r in zip(pos, ratios)) <= n:
            break
        target -= 1
    return target


def build_splits_classification(
    pos: Sequence[T],
    neg: Sequence[T],
    seed: int,
    ratios: Sequence[float] = (6.0, 1.2, 1.0),
    fractions: Sequence[float] = (0.78, 0.06, 0.16),
    leakage_guard: bool = True,
) -> SplitManifest:
    """
    Positive:negative ratios per split (train, val, test) with the share of
    positives per split given by `fractions`.
    """
    if len(ratios) != 3 or len(fractions) != 3 or any(r <= 0 for r in ratios) or any(f < 0 for f in fractions):
        raise ConfigError("classification splits need three positive ratios and three non-negative fractions")
    if not pos or not neg:
        raise DataError(f"classification splits need positives and negatives, got {len(pos)} / {len(neg)}")
    rng = np.random.default_rng(seed)
    total = float(sum(fractions))
    fractions = [f / total for f in fractions]
    target = _target_positives(len(pos), len(neg), ratios, fractions)
    pos_targets = largest_remainder(target, fractions)

    chosen: Dict[str, Tuple[List[int], List[int]]] = {}
    if leakage_guard:
        pos_groups, neg_groups = _group_by_volume(pos), _group_by_volume(neg)
        volumes = list(OrderedDict.fromkeys(list(pos_groups) + list(neg_groups)))
        order = rng.permutation(len(volumes))
        volumes = [volumes[i] for i in order]
        sizes = [(len(pos_groups.get(v, ())), len(neg_groups.get(v, ()))) for v in volumes]
        targets = [(k, k / r) for k, r in zip(pos_targets, ratios)]
        assignment = _assign_groups(sizes, targets)
        for s, name in enumerate(SPLITS):
            members = [v for v, a in zip(volumes, assignment) if a == s]
            p_idx = [i for v in members for i in pos_groups.get(v, ())]
            n_idx = [i for v in members for i in neg_groups.get(v, ())]
            p_idx = [p_idx[i] for i in rng.permutation(len(p_idx))]
            n_idx = [n_idx[i] for i in rng.permutation(len(n_idx))]
            chosen[name] = _trim_to_ratio(p_idx, n_idx, ratios[s])
    else:
        p_perm, n_perm = list(rng.permutation(len(pos))), list(rng.permutation(len(neg)))
        p_at = n_at = 0
        for s, name in enumerate(SPLITS):
            k = pos_targets[s]
            m = round_half_up(k / ratios[s])
            chosen[name] = (p_perm[p_at:p_at + k], n_perm[n_at:n_at + m])
            p_at, n_at = p_at + k, n_at + m

    manifest = SplitManifest("classification", seed, list(ratios), fractions=list(fractions),
                             leakage_guard=leakage_guard)
    for s, name in enumerate(SPLITS):
        p_idx, n_idx = chosen[name]
        if fractions[s] > 0 and (not p_idx or not n_idx):
            raise DataError(
                f"split '{name}' is empty: {len(pos)} positives / {len(neg)} negatives support at most "
                f"{target} positives overall (per split {pos_targets}); add data or relax the ratios"
            )
        manifest.splits[name] = [pos[i] for i in sorted(p_idx)] + [neg[i] for i in sorted(n_idx)]
    return manifest


def build_splits_segmentation(
    records: Sequence[T], seed: int, ratios: Sequence[float] = (8, 1, 1), leakage_guard: bool = True
) -> SplitManifest:
    """Split by count in `ratios` (8:1:1) exactly via largest remainders."""
    if len(records) < 10:
        raise DataError(f"segmentation splits need at least 10 records, got {len(records)}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError("segmentation splits need three non-negative ratios")
    rng = np.random.default_rng(seed)

    if leakage_guard:
        groups = _group_by_volume(records)
        volumes = list(groups)
        volumes = [volumes[i] for i in rng.permutation(len(volumes))]
        targets = [(k,) for k in largest_remainder(len(records), ratios)]
        assignment = _assign_groups([(len(groups[v]),) for v in volumes], targets)
        pools = []
        for s in range(3):
            idx = [i for v, a in zip(volumes, assignment) if a == s for i in groups[v]]
            pools.append([idx[i] for i in rng.permutation(len(idx))])
        n = len(records)
        while n > 0 and any(k > len(pool) for k, pool in zip(largest_remainder(n, ratios), pools)):
            n -= 1
        counts = largest_remainder(n, ratios)
        if n < 10 or any(r > 0 and k == 0 for r, k in zip(ratios, counts)):
            raise DataError(
                f"{len(records)} records from {len(volumes)} volumes cannot fill {list(ratios)} splits without "
                f"sharing volumes (best {counts}); add volumes or disable the leakage guard"
            )
        chosen = [pool[:k] for pool, k in zip(pools, counts)]
    else:
        perm = list(rng.permutation(len(records)))
        counts = largest_remainder(len(records), ratios)
        bounds = np.cumsum([0] + counts)
        chosen = [perm[bounds[s]:bounds[s + 1]] for s in range(3)]

    manifest = SplitManifest("segmentation", seed, list(ratios), leakage_guard=leakage_guard)
    for name, idx in zip(SPLITS, chosen):
        manifest.splits[name] = [records[i] for i in sorted(idx)]
    return manifest


# --- dataset directory ---

def _slice_key(rec: SliceRecord) -> str:
    payload = np.ascontiguousarray(rec.image, dtype=np.float32).tobytes()
    if rec.mask is not None:
        payload += np.ascontiguousarray(rec.mask, dtype=np.uint8).tobytes()
    return generate_file_hash(payload)


def save_dataset(directory: Union[str, Path], manifest: SplitManifest, workers: Optional[int] = None) -> Path:
    """Write slices, manifest.json and report.json; the directory appears only when complete."""
    directory = Path(directory)
    with atomic_directory(directory) as staging:
        (staging / "slices").mkdir()
        (staging / "masks").mkdir()

        def store(rec: SliceRecord) -> Dict[str, Any]:
            key = _slice_key(rec)
            write_tensor(staging / "slices" / f"{key}.swt", np.asarray(rec.image, dtype=np.float32))
            entry = {"provenance": rec.provenance.to_list(), "label": int(rec.label), "image": key, "mask": None}
            if rec.mask is not None:
                write_tensor(staging / "masks" / f"{key}.swt", np.asarray(rec.mask, dtype=np.uint8))
                entry["mask"] = key
            return entry

        document = {
            "task": manifest.task,
            "seed": manifest.seed,
            "ratios": manifest.ratios,
            "fractions": manifest.fractions,
            "leakage_guard": manifest.leakage_guard,
            "settings": manifest.settings,
            "splits": {name: parallel_map(store, records, workers) for name, records in manifest.splits.items()},
        }
        (staging / MANIFEST).write_text(json.dumps(document, indent=1) + "\n")
        (staging / REPORT).write_text(json.dumps(manifest.report(), indent=2) + "\n")
    logger.info(f"💾 Dataset written to {directory}")
    return directory


def load_dataset(directory: Union[str, Path]) -> SplitManifest:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path}; run 'prepare' first")
    document = json.loads(path.read_text())
    manifest = SplitManifest(document["task"], document["seed"], document["ratios"],
                             fractions=document.get("fractions"), leakage_guard=document["leakage_guard"],
                             settings=document.get("settings", {}))
    for name, entries in document["splits"].items():
        records = []
        for entry in entries:
            image = read_tensor(directory / "slices" / f"{entry['image']}.swt")
            mask = read_tensor(directory / "masks" / f"{entry['mask']}.swt") if entry["mask"] else None
            records.append(SliceRecord(image, Provenance.from_list(entry["provenance"]), entry["label"], mask))
        manifest.splits[name] = records
    return manifest


class DatasetBuilder:
    """Runs the full preparation pipeline for one task from volumes to splits."""

    def __init__(self, config: DotMap, img_size: int, seed: int):
        """
        Args:
            config (DotMap): The 'pipeline' section of the run configuration.
            img_size (int): Model input resolution.
            seed (int): Pipeline seed.
        """
        self.config = config
        self.img_size = img_size
        self.seed = seed
        self.extractor = VolumeExtractor(config, img_size)
        self.workers = worker_count()

    def settings(self) -> Dict[str, Any]:
        c = self.config
        return {"img_size": self.img_size, "hu_window": list(c.hu_window), "crop_size": c.crop_size,
                "expand_factor": c.expand_factor, "negative_fraction": c.negative_fraction,
                "negatives_per_volume": c.negatives_per_volume, "positive_slices": c.positive_slices,
                "resize": "bicubic"}

    def build(self, volumes: Sequence[Volume], annotations: Sequence[NoduleAnnotation],
              masks: Optional[Sequence[np.ndarray]] = None) -> SplitManifest:
        if self.config.task == "classification":
            manifest = self.build_classification(volumes, annotations)
        else:
            if masks is None:
                masks = [self.extractor.volume_mask(v, [a for a in annotations if a.volume_id == v.id])
                         for v in volumes]
            manifest = self.build_segmentation(volumes, masks)
        manifest.settings = self.settings()
        for name, c in manifest.counts().items():
            logger.info(f"   {name:<5}: {c['total']} slices ({c['positive']} positive / {c['negative']} negative)")
        return manifest

    def build_classification(self, volumes: Sequence[Volume], annotations: Sequence[NoduleAnnotation]) -> SplitManifest:
        logger.info(f"✂️  Cutting {self.config.crop_size}³ cubes from {len(volumes)} volumes...")
        by_volume: Dict[str, List[NoduleAnnotation]] = {}
        for ann in annotations:
            by_volume.setdefault(ann.volume_id, []).append(ann)

        def extract(i: int) -> Tuple[List[SliceRecord], List[SliceRecord]]:
            volume = volumes[i]
            rng = np.random.default_rng([self.seed, i])
            return self.extractor.classification_records(volume, by_volume.get(volume.id, []), rng)

        base_pos: List[SliceRecord] = []
        neg: List[SliceRecord] = []
        for p, n in parallel_map(extract, range(len(volumes)), self.workers):
            base_pos += p
            neg += n
        logger.info(f"   {len(base_pos)} positive and {len(neg)} negative slices")

        # Splits are chosen on lightweight stand-ins; only kept records are augmented and resized.
        factor = self.config.expand_factor
        plans = expansion_plans(len(base_pos), factor, self.seed)
        stand_ins = [
            SliceRecord(None, replace(rec.provenance, augmentation=plan.tag), label=1)
            for rec, rec_plans in zip(base_pos, plans) for plan in rec_plans
        ]
        sources = {id(s): (k // factor, k % factor) for k, s in enumerate(stand_ins)}
        neg = subsample_negatives(neg, self.config.negative_fraction, self.seed)
        logger.info(f"🔁 {factor}x expansion: {len(stand_ins)} positives; {len(neg)} negatives after subsampling")

        manifest = build_splits_classification(
            stand_ins, neg, self.seed, self.config.cls_ratios, self.config.cls_fractions,
            leakage_guard=not self.config.paper_splits,
        )

        def materialize(rec: SliceRecord) -> SliceRecord:
            if rec.image is None:
                src, k = sources[id(rec)]
                rec = augment(base_pos[src], plans[src][k])
            return self.extractor.resize_record(rec)

        for name in SPLITS:
            manifest.splits[name] = parallel_map(materialize, manifest.splits[name], self.workers)
        return manifest

    def build_segmentation(self, volumes: Sequence[Volume], masks: Sequence[np.ndarray]) -> SplitManifest:
        logger.info(f"✂️  Slicing {len(volumes)} volumes along z, y and x...")

        def extract(i: int) -> List[SliceRecord]:
            return self.extractor.segmentation_records(volumes[i], masks[i])

        records: List[SliceRecord] = []
        for group in parallel_map(extract, range(len(volumes)), self.workers):
            records += group
        logger.info(f"   {len(records)} slices contain nodule pixels")
        manifest = build_splits_segmentation(records, self.seed, self.config.seg_ratios,
                                             leakage_guard=not self.config.paper_splits)
        for name in SPLITS:
            manifest.splits[name] = parallel_map(self.extractor.resize_record, manifest.splits[name], self.workers)
        return manifest
