"""
Seeded slice augmentation.

Geometric ops (90° rotations, small-angle rotation, flips, translation,
scaling) act on the image and its mask together; masks are resampled
nearest-neighbour. Photometric jitter touches the image only.
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from src.extractors.volume_extractor import SliceRecord

IMAGE_FILL = 0.0


@dataclass(frozen=True)
class AugmentPlan:
    rot90: int = 0
    angle: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    shift: Tuple[int, int] = (0, 0)
    scale: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self == AugmentPlan()

    @property
    def tag(self) -> str:
        if self.is_identity:
            return "orig"
        parts = []
        if self.rot90:
            parts.append(f"r{90 * self.rot90}")
        if self.angle:
            parts.append(f"a{self.angle:+.1f}")
        if self.flip_h:
            parts.append("fh")
        if self.flip_v:
            parts.append("fv")
        if self.shift != (0, 0):
            parts.append(f"t{self.shift[0]:+d},{self.shift[1]:+d}")
        if self.scale != 1.0:
            parts.append(f"s{self.scale:.2f}")
        if self.brightness or self.contrast != 1.0:
            parts.append(f"p{self.brightness:+.2f},{self.contrast:.2f}")
        return "-".join(parts)


def random_plan(
    rng: np.random.Generator,
    max_angle: float = 15.0,
    max_shift: int = 4,
    scale_range: Optional[Tuple[float, float]] = None,
    photometric: bool = False,
) -> AugmentPlan:
    """Draw a plan; each op is switched on independently with probability 1/2."""
    rot90 = int(rng.integers(0, 4))
    angle = float(np.round(rng.uniform(-max_angle, max_angle), 1)) if rng.random() < 0.5 else 0.0
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    if max_shift and rng.random() < 0.5:
        shift = (int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1)))
    else:
        shift = (0, 0)
    scale = 1.0
    if scale_range is not None and rng.random() < 0.5:
        scale = float(np.round(rng.uniform(*scale_range), 2))
    brightness, contrast = 0.0, 1.0
    if photometric and rng.random() < 0.5:
        brightness = float(np.round(rng.uniform(-0.1, 0.1), 2))
        contrast = float(np.round(rng.uniform(0.8, 1.2), 2))
    return AugmentPlan(rot90, angle, flip_h, flip_v, shift, scale, brightness, contrast)


def _fit(array: np.ndarray, h: int, w: int, fill) -> np.ndarray:
    """Centre-crop or pad the first two axes back to h×w."""
    out = np.full((h, w) + array.shape[2:], fill, dtype=array.dtype)
    sh, sw = array.shape[:2]
    ch, cw = min(h, sh), min(w, sw)
    src_y, src_x = (sh - ch) // 2, (sw - cw) // 2
    dst_y, dst_x = (h - ch) // 2, (w - cw) // 2
    out[dst_y:dst_y + ch, dst_x:dst_x + cw] = array[src_y:src_y + ch, src_x:src_x + cw]
    return out


def _geometric(array: np.ndarray, plan: AugmentPlan, order: int, fill) -> np.ndarray:
    h, w = array.shape[:2]
    out = np.rot90(array, plan.rot90, axes=(0, 1)) if plan.rot90 else array
    if plan.flip_h:
        out = out[:, ::-1]
    if plan.flip_v:
        out = out[::-1, :]
    if plan.angle:
        out = ndimage.rotate(out, plan.angle, axes=(1, 0), reshape=False, order=order, mode="constant", cval=fill)
    if plan.shift != (0, 0):
        offsets = plan.shift + (0,) * (out.ndim - 2)
        out = ndimage.shift(out, offsets, order=0, mode="constant", cval=fill)
    if plan.scale != 1.0:
        factors = (plan.scale, plan.scale) + (1,) * (out.ndim - 2)
        out = ndimage.zoom(out, factors, order=order, mode="nearest")
    return _fit(np.ascontiguousarray(out), h, w, fill)


def augment(rec: SliceRecord, plan: AugmentPlan) -> SliceRecord:
    """Apply `plan` to a record; returns a new record tagged with the plan."""
    if plan.is_identity:
        return rec
    image = _geometric(rec.image, plan, order=1, fill=IMAGE_FILL)
    if plan.brightness or plan.contrast != 1.0:
        image = (image - 0.5) * plan.contrast + 0.5 + plan.brightness
    image = np.clip(image, 0.0, 1.0).astype(rec.image.dtype)
    mask = None if rec.mask is None else _geometric(rec.mask, plan, order=0, fill=0).astype(np.uint8)
    provenance = replace(rec.provenance, augmentation=plan.tag)
    return SliceRecord(image, provenance, label=rec.label, mask=mask)
