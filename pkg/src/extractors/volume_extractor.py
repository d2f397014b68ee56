"""
CT volume extractor

Reads SWV1 volumes and JSON-lines nodule annotations, cuts nodule-centred
cubes and turns cubes or whole volumes into 2D slice records.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotmap import DotMap
from loguru import logger
from PIL import Image

from src.core.errors import DataError, FormatError
from src.utils.helpers import atomic_write_bytes, atomic_write_text

MAGIC = b"SWV1"
DTYPE_INT16 = 1
HEADER_SIZE = len(MAGIC) + 2 + 3 * 4 + 3 * 4
MAX_VOXELS = 2 ** 31
AIR_HU = -1000
AXES = ("z", "y", "x")
MASK_SUFFIX = ".mask.swv"


@dataclass
class Volume:
    id: str
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int16)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume '{self.id}' needs three non-empty dims, got {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"volume '{self.id}' spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class NoduleAnnotation:
    volume_id: str
    center: Tuple[int, int, int]
    diameter_mm: Optional[float] = None

    def __post_init__(self):
        self.center = tuple(int(c) for c in self.center)
        if len(self.center) != 3:
            raise DataError(f"nodule center needs (z, y, x), got {self.center}")

    def check_within(self, volume: Volume) -> None:
        if any(not 0 <= c < n for c, n in zip(self.center, volume.shape)):
            raise DataError(f"nodule center {self.center} outside volume '{volume.id}' of shape {volume.shape}")

    def radius_voxels(self, spacing: Sequence[float], default: float = 3.0) -> float:
        if self.diameter_mm is None:
            return default
        return self.diameter_mm / 2.0 / min(spacing)


@dataclass(frozen=True)
class Provenance:
    volume_id: str
    axis: str
    index: int
    augmentation: str = "orig"
    origin: Tuple[int, int, int] = (0, 0, 0)

    def to_list(self) -> list:
        return [self.volume_id, self.axis, self.index, self.augmentation, list(self.origin)]

    @classmethod
    def from_list(cls, data: Sequence) -> "Provenance":
        return cls(data[0], data[1], int(data[2]), data[3], tuple(data[4]))


@dataclass
class SliceRecord:
    """One 2D sample: image [H, W, 3] in [0, 1] with a class id or a uint8 mask."""

    image: np.ndarray
    provenance: Provenance
    label: int = 0
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def is_segmentation(self) -> bool:
        return self.mask is not None

    @property
    def is_positive(self) -> bool:
        if self.mask is not None:
            return bool(self.mask.any())
        return self.label == 1


# --- SWV1 ---

def encode_volume(volume: Volume) -> bytes:
    header = (
        MAGIC
        + bytes([DTYPE_INT16, 3])
        + np.asarray(volume.shape, dtype="<u4").tobytes()
        + np.asarray(volume.spacing, dtype="<f4").tobytes()
    )
    return header + np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()


def decode_volume(buffer: bytes, volume_id: str, source: Optional[str] = None) -> Volume:
    if len(buffer) < HEADER_SIZE:
        raise FormatError("truncated SWV1 header", offset=len(buffer), path=source)
    if buffer[:4] != MAGIC:
        raise FormatError(f"bad magic {buffer[:4]!r}, expected {MAGIC!r}", offset=0, path=source)
    if buffer[4] != DTYPE_INT16:
        raise FormatError(f"unsupported SWV1 dtype code {buffer[4]}", offset=4, path=source)
    if buffer[5] != 3:
        raise FormatError(f"SWV1 rank must be 3, got {buffer[5]}", offset=5, path=source)
    dims = tuple(int(d) for d in np.frombuffer(buffer, dtype="<u4", count=3, offset=6))
    spacing = tuple(float(s) for s in np.frombuffer(buffer, dtype="<f4", count=3, offset=18))
    count = dims[0] * dims[1] * dims[2]
    if count == 0 or count > MAX_VOXELS:
        raise FormatError(f"SWV1 dims {dims} out of range", offset=6, path=source)
    available = len(buffer) - HEADER_SIZE
    if available < 2 * count:
        raise FormatError(f"payload needs {2 * count} bytes, {available} present", offset=len(buffer), path=source)
    if available > 2 * count:
        raise FormatError(f"{available - 2 * count} trailing bytes after payload",
                          offset=HEADER_SIZE + 2 * count, path=source)
    voxels = np.frombuffer(buffer, dtype="<i2", count=count, offset=HEADER_SIZE).reshape(dims)
    try:
        return Volume(volume_id, voxels.astype(np.int16), spacing)
    except DataError as e:
        raise FormatError(str(e), offset=18, path=source)


def load_volume(path: Union[str, Path]) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"volume file not found: {path}")
    return decode_volume(path.read_bytes(), path.stem, source=str(path))


def save_volume(path: Union[str, Path], volume: Volume) -> Path:
    return atomic_write_bytes(Path(path), encode_volume(volume))


# --- annotations ---

def read_annotations(path: Union[str, Path]) -> List[NoduleAnnotation]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    annotations = []
    offset = 0
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(keepends=True), start=1):
        text = line.strip()
        if text:
            try:
                row = json.loads(text)
                annotations.append(NoduleAnnotation(row["volume_id"], row["center_zyx"], row.get("diameter_mm")))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"line {line_no}: bad annotation ({e})", offset=offset, path=str(path))
        offset += len(line.encode("utf-8"))
    return annotations


def write_annotations(path: Union[str, Path], annotations: Sequence[NoduleAnnotation]) -> Path:
    lines = [
        json.dumps({"volume_id": a.volume_id, "center_zyx": list(a.center), "diameter_mm": a.diameter_mm})
        for a in annotations
    ]
    return atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


# --- cropping, windowing, slicing ---

def crop_nodule(volume: Volume, center: Sequence[int], size: int = 48, fill: int = AIR_HU) -> np.ndarray:
    """size³ cube centred on `center`; voxels outside the volume are `fill`."""
    cube = np.full((size, size, size), fill, dtype=np.int16)
    src, dst = [], []
    for c, n in zip(center, volume.shape):
        start = int(c) - size // 2
        lo, hi = max(start, 0), min(start + size, n)
        if lo >= hi:
            return cube
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    cube[tuple(dst)] = volume.voxels[tuple(src)]
    return cube


def hu_window(voxels: np.ndarray, window: Sequence[float] = (-1000.0, 400.0)) -> np.ndarray:
    """Linear map of [low, high] HU to [0, 1], clipped."""
    low, high = float(window[0]), float(window[1])
    return np.clip((np.asarray(voxels, dtype=np.float32) - low) / (high - low), 0.0, 1.0)


def take_slice(array: np.ndarray, axis: str, index: int) -> np.ndarray:
    if axis == "z":
        return array[index, :, :]
    if axis == "y":
        return array[:, index, :]
    if axis == "x":
        return array[:, :, index]
    raise DataError(f"unknown slicing axis '{axis}'")


def to_rgb(plane: np.ndarray) -> np.ndarray:
    """Read-only [H, W, 3] view replicating one plane."""
    return np.broadcast_to(plane[:, :, None], plane.shape + (3,))


def slice_triaxial(
    voxels: np.ndarray,
    volume_id: str,
    mask: Optional[np.ndarray] = None,
    label: int = 0,
    window: Sequence[float] = (-1000.0, 400.0),
    indices: Optional[Dict[str, Sequence[int]]] = None,
    origin: Tuple[int, int, int] = (0, 0, 0),
) -> List[SliceRecord]:
    """
    One slice per index along z, y and x.

    With a mask only slices containing nodule pixels are returned, each
    carrying its mask; without one every slice carries `label`.
    `indices` restricts the slice positions per axis.
    """
    if mask is not None and mask.shape != voxels.shape:
        raise DataError(f"mask shape {mask.shape} does not match voxels {voxels.shape}")
    windowed = hu_window(voxels, window)
    records = []
    for axis_no, axis in enumerate(AXES):
        positions = range(voxels.shape[axis_no]) if indices is None else indices.get(axis, ())
        for index in positions:
            provenance = Provenance(volume_id, axis, int(index), "orig", tuple(int(o) for o in origin))
            image = to_rgb(take_slice(windowed, axis, index))
            if mask is None:
                records.append(SliceRecord(image, provenance, label=label))
                continue
            plane = take_slice(mask, axis, index).astype(np.uint8)
            if plane.any():
                records.append(SliceRecord(image, provenance, label=1, mask=plane))
    return records


def positive_slice_indices(size: int, policy: str, radius: float = 3.0) -> Dict[str, List[int]]:
    """Slice positions kept from a nodule-centred cube under a positive-slice policy."""
    center = size // 2
    if policy == "center":
        chosen = [center]
    elif policy == "through_nodule":
        r = max(int(np.floor(radius)), 0)
        chosen = list(range(max(center - r, 0), min(center + r, size - 1) + 1))
    elif policy == "all":
        chosen = list(range(size))
    else:
        raise DataError(f"unknown positive slice policy '{policy}'")
    return {axis: chosen for axis in AXES}


def sample_negative_centers(
    volume: Volume,
    nodule_centers: Sequence[Sequence[int]],
    count: int,
    rng: np.random.Generator,
    min_distance: float = 48.0,
    max_attempts: int = 1000,
) -> List[Tuple[int, int, int]]:
    """Uniform crop centres at least `min_distance` voxels from every nodule centre."""
    nodules = np.asarray(nodule_centers, dtype=np.float64).reshape(-1, 3)
    centers = []
    for _ in range(max_attempts):
        if len(centers) == count:
            break
        candidate = np.array([rng.integers(0, n) for n in volume.shape])
        if len(nodules) and np.min(np.linalg.norm(nodules - candidate, axis=1)) < min_distance:
            continue
        center = tuple(int(c) for c in candidate)
        if center not in centers:
            centers.append(center)
    if len(centers) < count:
        logger.debug(f"Volume '{volume.id}': {len(centers)}/{count} negative centres found")
    return centers


def sphere_mask(shape: Sequence[int], center: Sequence[float], radius: float) -> np.ndarray:
    """uint8 mask of voxels whose centre lies within `radius` of `center`."""
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    dist2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return (dist2 <= radius * radius).astype(np.uint8)


def resize_slice(image: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    """Bicubic (images) or nearest (masks) resize of a 2D plane or [H, W, C] stack to size×size."""
    if image.shape[0] == size and image.shape[1] == size:
        return image
    resample = Image.NEAREST if nearest else Image.BICUBIC
    if image.ndim == 2:
        if nearest:
            return np.asarray(Image.fromarray(image.astype(np.uint8)).resize((size, size), resample))
        plane = Image.fromarray(image.astype(np.float32), mode="F").resize((size, size), resample)
        return np.clip(np.asarray(plane), 0.0, 1.0)
    if image.strides[2] == 0:
        return to_rgb(resize_slice(image[:, :, 0], size, nearest))
    channels = [resize_slice(image[:, :, c], size, nearest) for c in range(image.shape[2])]
    return np.stack(channels, axis=2)


class VolumeExtractor:
    """
    Turns an input directory of ``*.swv`` volumes plus ``annotations.jsonl``
    into classification or segmentation slice records.
    """

    def __init__(self, config: DotMap, img_size: int):
        """
        Args:
            config (DotMap): The 'pipeline' section of the run configuration.
            img_size (int): Model input resolution; slices are resized to it.
        """
        self.config = config
        self.img_size = img_size
        self.window = tuple(config.hu_window)
        self.crop_size = config.crop_size

    def load_directory(self, input_dir: Union[str, Path]) -> Tuple[List[Volume], List[NoduleAnnotation]]:
        input_dir = Path(input_dir)
        paths = sorted(p for p in input_dir.glob("*.swv") if not p.name.endswith(MASK_SUFFIX))
        if not paths:
            raise DataError(f"no SWV1 volumes (*.swv) in {input_dir}")
        annotations = read_annotations(input_dir / "annotations.jsonl")
        volumes = [load_volume(p) for p in paths]
        known = {v.id: v for v in volumes}
        for ann in annotations:
            if ann.volume_id not in known:
                raise DataError(f"annotation refers to unknown volume '{ann.volume_id}'")
            ann.check_within(known[ann.volume_id])
        logger.info(f"📂 Loaded {len(volumes)} volumes and {len(annotations)} nodule annotations from {input_dir}")
        return volumes, annotations

    def resize_record(self, rec: SliceRecord) -> SliceRecord:
        """Copy of `rec` at the model resolution."""
        mask = None if rec.mask is None else resize_slice(rec.mask, self.img_size, nearest=True)
        return SliceRecord(resize_slice(rec.image, self.img_size), rec.provenance, rec.label, mask)

    def classification_records(
        self, volume: Volume, annotations: Sequence[NoduleAnnotation], rng: np.random.Generator
    ) -> Tuple[List[SliceRecord], List[SliceRecord]]:
        """(positives, negatives) for one volume at crop resolution."""
        size = self.crop_size
        policy = self.config.positive_slices
        positives = []
        for ann in annotations:
            cube = crop_nodule(volume, ann.center, size)
            indices = positive_slice_indices(size, policy, ann.radius_voxels(volume.spacing))
            positives += slice_triaxial(cube, volume.id, label=1, window=self.window, indices=indices,
                                        origin=ann.center)

        negatives = []
        centers = sample_negative_centers(volume, [a.center for a in annotations],
                                          self.config.negatives_per_volume, rng, min_distance=size)
        negative_indices = positive_slice_indices(size, "all" if policy == "all" else "center")
        for center in centers:
            cube = crop_nodule(volume, center, size)
            negatives += slice_triaxial(cube, volume.id, label=0, window=self.window, indices=negative_indices,
                                        origin=center)
        return positives, negatives

    def volume_mask(self, volume: Volume, annotations: Sequence[NoduleAnnotation],
                    input_dir: Optional[Union[str, Path]] = None) -> np.ndarray:
        """Nodule mask from `<id>.mask.swv` when present, else spheres from the annotations."""
        if input_dir is not None:
            path = Path(input_dir) / f"{volume.id}{MASK_SUFFIX}"
            if path.is_file():
                mask = load_volume(path).voxels
                if mask.shape != volume.shape:
                    raise DataError(f"mask {path} has shape {mask.shape}, volume has {volume.shape}")
                return (mask > 0).astype(np.uint8)
        mask = np.zeros(volume.shape, dtype=np.uint8)
        for ann in annotations:
            mask |= sphere_mask(volume.shape, ann.center, ann.radius_voxels(volume.spacing))
        return mask

    def segmentation_records(self, volume: Volume, mask: np.ndarray) -> List[SliceRecord]:
        """Tri-axial slices of the whole volume that contain nodule pixels."""
        return slice_triaxial(volume.voxels, volume.id, mask=mask, window=self.window)
