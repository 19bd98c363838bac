"""Toy latent codec and the concatenated denoiser input.

The latent is the image itself at half resolution: encoding is 2×2 area
pooling, decoding is bilinear upsampling.  Both are fixed linear maps, so a
Tensor version of the decoder is a single separable op.
"""

from __future__ import annotations

import numpy as np

from .. import maskops
from ..tensorgrad import Tensor
from ..tensorgrad import functional as F

FACTOR = 2
LATENT_CHANNELS = 3
INPUT_CHANNELS = 2 * LATENT_CHANNELS + 1
COND_MODES = ("mask", "bbox", "point")


def encode_latent(img: np.ndarray) -> np.ndarray:
    """C×H×W (or N×C×H×W) image -> latent at half resolution."""
    return maskops.area_pool(np.asarray(img, dtype=np.float64), FACTOR)


def _upsample_maps(h: int, w: int):
    return (maskops.resize_matrix(h, h * FACTOR), maskops.resize_matrix(w, w * FACTOR))


def decode_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    rows, cols = _upsample_maps(*z.shape[-2:])
    return rows @ z @ cols.T


def decode_latent_t(z: Tensor) -> Tensor:
    rows, cols = _upsample_maps(*z.shape[-2:])
    return F.separable(z, rows, cols)


# Diffusion runs on latents mapped from [0, 1] to [-1, 1] so the data spread
# is comparable to the unit-variance noise.
def to_diffusion(z: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(z) - 1.0


def from_diffusion(z):
    """Inverse of ``to_diffusion``; works on arrays and Tensors."""
    return (z + 1.0) * 0.5


def cond_channel(mask: np.ndarray, mode: str = "mask") -> np.ndarray:
    """The single conditioning channel at latent resolution."""
    mask = np.asarray(mask, dtype=np.float64)
    h = -(-mask.shape[0] // FACTOR)
    w = -(-mask.shape[1] // FACTOR)
    if mode == "mask":
        return maskops.downsample_soft(mask, FACTOR)
    if mode not in COND_MODES:
        raise ValueError(f"unknown conditioning mode {mode!r}")
    out = np.zeros((h, w))
    ys, xs = np.nonzero(mask > 0)
    if ys.size == 0:
        return out
    if mode == "bbox":
        y0, y1 = ys.min() // FACTOR, -(-(ys.max() + 1) // FACTOR)
        x0, x1 = xs.min() // FACTOR, -(-(xs.max() + 1) // FACTOR)
        out[y0:y1, x0:x1] = 1.0
        return out
    # point: Gaussian bump at the centroid, sigma a tenth of the latent width
    cy = int(np.clip(round((ys.mean() + 0.5) / FACTOR - 0.5), 0, h - 1))
    cx = int(np.clip(round((xs.mean() + 0.5) / FACTOR - 0.5), 0, w - 1))
    yy, xx = np.mgrid[0:h, 0:w]
    s = 0.1 * w
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))


def build_model_input(z_t: np.ndarray, I_tr: np.ndarray, mask: np.ndarray,
                      mode: str = "mask") -> np.ndarray:
    """Stack [z_t (3), encode(I_tr) (3), conditioning (1)] into a 7×h×w array."""
    z_t = np.asarray(z_t)
    enc = encode_latent(I_tr)
    cond = cond_channel(mask, mode)
    if enc.shape != z_t.shape or cond.shape != z_t.shape[1:]:
        raise ValueError(f"inconsistent shapes: z_t {z_t.shape}, encode(I_tr) {enc.shape}, "
                         f"conditioning {cond.shape}")
    return np.concatenate([z_t, enc, cond[None]], axis=0)
