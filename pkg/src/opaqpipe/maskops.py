"""Mask morphology, smoothing, labeling, resampling and boundary augmentation.

Masks are 2D float arrays (H×W) in [0, 1]; binary masks hold exactly 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def _check_binary(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask is not binary")
    return m


def _window_reduce(m: np.ndarray, pad_value: float, reduce) -> np.ndarray:
    p = np.pad(m, 1, constant_values=pad_value)
    h, w = m.shape
    stack = [p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return reduce(stack, axis=0)


def erode(m: np.ndarray) -> np.ndarray:
    # outside the frame counts as foreground so a full mask is a fixed point
    m = _check_binary(m)
    return _window_reduce(m, 1.0, np.min).astype(np.float64)


def dilate(m: np.ndarray) -> np.ndarray:
    m = _check_binary(m)
    return _window_reduce(m, 0.0, np.max).astype(np.float64)


def morphology(m: np.ndarray, op: str) -> np.ndarray:
    """3×3 square erode/dilate/open/close."""
    if op == "erode":
        return erode(m)
    if op == "dilate":
        return dilate(m)
    if op == "open":
        return dilate(erode(m))
    if op == "close":
        return erode(dilate(m))
    raise ValueError(f"unknown morphology op {op!r}")


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """n×n matrix applying the 1D Gaussian with clamped (replicated) borders."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    B = np.zeros((n, n))
    for i in range(n):
        for j, w in enumerate(k):
            B[i, min(max(i + j - r, 0), n - 1)] += w
    return B


def gaussian_blur(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), clamp-to-edge."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2:]
    return blur_matrix(h, sigma) @ m @ blur_matrix(w, sigma).T


@dataclass(frozen=True)
class Components:
    labels: np.ndarray            # 0 = background, 1..n in raster order of first pixel
    count: int
    bboxes: list[tuple[int, int, int, int]]   # (y0, x0, y1, x1), half-open


def connected_components(m: np.ndarray) -> Components:
    m = _check_binary(m)
    labels, n = ndimage.label(m > 0, structure=np.ones((3, 3), dtype=int))
    boxes = [(s[0].start, s[1].start, s[0].stop, s[1].stop)
             for s in ndimage.find_objects(labels)]
    return Components(labels, int(n), boxes)


def _pad_to_multiple(x: np.ndarray, factor: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, mode="edge")
    return x


def area_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor×factor blocks of the last two axes (edge-replicated padding)."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    x = _pad_to_multiple(np.asarray(x), factor)
    h, w = x.shape[-2:]
    blocks = x.reshape(x.shape[:-2] + (h // factor, factor, w // factor, factor))
    return blocks.mean(axis=(-3, -1))


def downsample_soft(m: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling; the result is a soft mask and is not re-binarized."""
    return area_pool(np.asarray(m, dtype=np.float64), factor)


def resize_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """n_out×n_in interpolation matrix, half-pixel centers, clamped at the borders."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    R = np.zeros((n_out, n_in))
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_out) + 0.5) * scale), 0, n_in - 1).astype(int)
        R[np.arange(n_out), idx] = 1.0
        return R
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(R, (rows, lo), 1.0 - frac)
    np.add.at(R, (rows, hi), frac)
    return R


def image_resize(img: np.ndarray, new_h: int, new_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes of a C×H×W (or H×W) array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (new_h, new_w):
        return img.copy()
    return resize_matrix(h, new_h, mode) @ img @ resize_matrix(w, new_w, mode).T


def boundary_pixels(m: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour of the opposite value."""
    m = _check_binary(m)
    b = np.zeros(m.shape, dtype=bool)
    diff_v = m[1:, :] != m[:-1, :]
    diff_h = m[:, 1:] != m[:, :-1]
    b[1:, :] |= diff_v
    b[:-1, :] |= diff_v
    b[:, 1:] |= diff_h
    b[:, :-1] |= diff_h
    return b


def augment_mask(m: np.ndarray, seed: int, n_shapes=(3, 4, 5),
                 size_ratio=(0.05, 0.07)) -> np.ndarray:
    """Perturb the mask contour to mimic segmentation error.

    Circles (radius r·W) and squares (half-side r·W) are added or cut at
    boundary pixels, then the result is opened, blurred (sigma 1) and
    re-thresholded at 0.5.
    """
    m = _check_binary(m)
    if not m.any():
        return m.copy()
    rng = np.random.default_rng(seed)
    h, w = m.shape
    by, bx = np.nonzero(boundary_pixels(m))
    out = m.astype(np.float64).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.choice(n_shapes))):
        circle = rng.random() < 0.5
        add = rng.random() < 0.5
        size = rng.uniform(*size_ratio) * w
        k = rng.integers(len(by))
        cy, cx = by[k], bx[k]
        if circle:
            shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= size * size
        else:
            shape = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
        out[shape] = 1.0 if add else 0.0
    out = morphology(out, "open")
    out = gaussian_blur(out, 1.0)
    return (out >= 0.5).astype(np.float64)
