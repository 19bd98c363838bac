"""Square object crops: locate, extract at model resolution, paste back."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maskops import image_resize


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    side: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.side), slice(self.left, self.left + self.side)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Half-open (y0, x0, y1, x1) of the nonzero pixels, or None when empty."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def crop_box(bbox: tuple[int, int, int, int], height: int, width: int,
             margin: float = 1.25) -> CropBox:
    """Square window centred on ``bbox``, ``margin`` times its longer side, kept in frame."""
    y0, x0, y1, x1 = bbox
    side = min(max(1, math.ceil(max(y1 - y0, x1 - x0) * margin)), height, width)
    top = int(round((y0 + y1) / 2 - side / 2))
    left = int(round((x0 + x1) / 2 - side / 2))
    top = min(max(top, 0), height - side)
    left = min(max(left, 0), width - side)
    return CropBox(top, left, side)


def extract(img: np.ndarray, box: CropBox, size: int, mode: str = "bilinear") -> np.ndarray:
    ys, xs = box.slices()
    return image_resize(np.asarray(img)[..., ys, xs], size, size, mode)


def extract_mask(mask: np.ndarray, box: CropBox, size: int) -> np.ndarray:
    return extract(mask, box, size, "nearest")


def restore(patch: np.ndarray, box: CropBox, mode: str = "bilinear") -> np.ndarray:
    """Resample a model-resolution patch back to the crop's pixel size."""
    return image_resize(patch, box.side, box.side, mode)
