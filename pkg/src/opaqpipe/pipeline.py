"""End-to-end inference: opacify each masked instance, composite, predict depth.

Instances are the connected components of the provided mask, processed in
order of discovery.  Each one is cropped (square, 1.25× its bounding box),
resized to the model resolution, opacified, refined by the MRM, and pasted
back only where the binarized refined mask is set.  A pixel pasted by one
instance is locked: later instances never write to it again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import maskops
from .mrm import MrmNet, binarize_mask, blend, refine_masks
from .opacifier import OpacifierModel, opacify_patches
from .opacifier.codec import LATENT_CHANNELS, FACTOR
from .patches import CropBox, crop_box, extract, extract_mask, mask_bbox, restore
from .schedule import ScheduleTable
from .toydepth import DepthNet, predict_depth
from .unipc import SolverConfig

MODES = ("opacify", "passthrough", "solid-color")
SOLID_FILLS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class PipelineCfg:
    mode: str = "opacify"
    cond_mode: str = "mask"
    solver: SolverConfig = SolverConfig()
    patch_size: int = 32
    margin: float = 1.25
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}; expected one of {MODES}")
        if self.patch_size % FACTOR:
            raise ValueError(f"patch size must be a multiple of {FACTOR}")
        if self.margin < 1.0:
            raise ValueError(f"crop margin must be >= 1, got {self.margin}")


@dataclass
class Models:
    depth: DepthNet
    opacifier: OpacifierModel | None = None
    mrm: MrmNet | None = None
    table: ScheduleTable | None = None

    def require(self, mode: str) -> None:
        missing = []
        if self.depth is None:
            missing.append("depth")
        if mode == "opacify":
            missing += [n for n in ("opacifier", "mrm", "table") if getattr(self, n) is None]
        if missing:
            raise ValueError(f"missing checkpoint for stage(s): {', '.join(missing)}")


@dataclass
class InstanceResult:
    box: CropBox
    mask_patch: np.ndarray
    I_tr_patch: np.ndarray
    I_pred: np.ndarray
    M_soft: np.ndarray
    M_hat: np.ndarray
    I_blend_patch: np.ndarray
    pasted: int = 0


@dataclass
class PipelineResult:
    I_blend: np.ndarray
    depth: np.ndarray
    blend_mask: np.ndarray
    instances: list[InstanceResult] = field(default_factory=list)


def instance_masks(mask: np.ndarray) -> list[np.ndarray]:
    """One binary mask per connected component, in order of discovery."""
    comps = maskops.connected_components((np.asarray(mask) > 0).astype(np.float64))
    return [(comps.labels == k).astype(np.float64) for k in range(1, comps.count + 1)]


def instance_noise(seed: int, key: int, k: int, size: int) -> np.ndarray:
    """Starting latent noise for instance ``k`` of image ``key``."""
    rng = np.random.default_rng([seed, key, k])
    h = size // FACTOR
    return rng.standard_normal((LATENT_CHANNELS, h, h))


def composite(image: np.ndarray, pieces: list[tuple[CropBox, np.ndarray, np.ndarray]]
              ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Paste generated pixels into ``image`` without ever re-touching a pasted pixel.

    ``pieces`` holds (box, I_pred patch, M_hat patch) at model resolution.
    Returns the composite, the union of pasted pixels, and per-piece counts.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    locked = np.zeros(out.shape[-2:], dtype=bool)
    counts = []
    for box, pred, m_hat in pieces:
        ys, xs = box.slices()
        m_full = restore(m_hat, box, "nearest") > 0.5
        write = m_full & ~locked[ys, xs]
        region = out[:, ys, xs]
        region[:, write] = restore(pred, box, "bilinear")[:, write]
        locked[ys, xs] |= write
        counts.append(int(write.sum()))
    return out, locked.astype(np.float64), counts


def solid_fill(image: np.ndarray, mask: np.ndarray, color) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    sel = np.asarray(mask) > 0
    for ch, v in enumerate(color):
        out[ch][sel] = v
    return out


def solid_color_baseline(images: np.ndarray, masks: np.ndarray, depthnet: DepthNet) -> np.ndarray:
    """Per-pixel median of the depth predicted under pure R, G and B fills."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images, masks = images[None], np.asarray(masks)[None]
    preds = [predict_depth(np.stack([solid_fill(im, m, c) for im, m in zip(images, masks)]),
                           depthnet) for c in SOLID_FILLS]
    out = np.median(np.stack(preds), axis=0)
    return out[0] if single else out


def run_pipeline_batch(images: np.ndarray, masks: np.ndarray, models: Models, cfg: PipelineCfg,
                       keys: list[int] | None = None) -> list[PipelineResult]:
    """Process several images; all instances share one sampler call.

    ``keys`` identify the images for noise seeding (default: their index),
    so the starting noise does not depend on how images are grouped.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    if images.ndim != 4 or masks.shape != (images.shape[0],) + images.shape[2:]:
        raise ValueError(f"expected N×3×H×W images and N×H×W masks, got {images.shape} "
                         f"and {masks.shape}")
    models.require(cfg.mode)
    keys = list(range(len(images))) if keys is None else list(keys)
    h, w = images.shape[2:]

    if cfg.mode == "passthrough":
        depth = predict_depth(images, models.depth)
        return [PipelineResult(images[i].copy(), depth[i], np.zeros((h, w))) for i in range(len(images))]
    if cfg.mode == "solid-color":
        depth = solid_color_baseline(images, masks, models.depth)
        return [PipelineResult(images[i].copy(), depth[i], (masks[i] > 0).astype(np.float64))
                for i in range(len(images))]

    jobs = []   # (image index, box, I_tr patch, mask patch, noise)
    for i, (img, mask) in enumerate(zip(images, masks)):
        for k, comp in enumerate(instance_masks(mask)):
            box = crop_box(mask_bbox(comp), h, w, cfg.margin)
            jobs.append((i, box, np.clip(extract(img, box, cfg.patch_size), 0.0, 1.0),
                         extract_mask(comp, box, cfg.patch_size),
                         instance_noise(cfg.seed, keys[i], k, cfg.patch_size)))

    per_image: list[list[InstanceResult]] = [[] for _ in images]
    if jobs:
        I_tr_p = np.stack([j[2] for j in jobs])
        m_p = np.stack([j[3] for j in jobs])
        preds = opacify_patches(I_tr_p, m_p, models.opacifier, models.table, cfg.solver,
                                mode=cfg.cond_mode, z_init=np.stack([j[4] for j in jobs]))
        soft = refine_masks(models.mrm, preds, I_tr_p, m_p)
        for n, (i, box, _, _, _) in enumerate(jobs):
            m_hat = binarize_mask(soft[n], m_p[n])
            per_image[i].append(InstanceResult(box, m_p[n], I_tr_p[n], preds[n], soft[n], m_hat,
                                               blend(preds[n], I_tr_p[n], m_hat)))

    blended, unions = [], []
    for i, img in enumerate(images):
        insts = per_image[i]
        out, union, counts = composite(img, [(r.box, r.I_pred, r.M_hat) for r in insts])
        for r, c in zip(insts, counts):
            r.pasted = c
        blended.append(out)
        unions.append(union)
    depth = predict_depth(np.stack(blended), models.depth)
    return [PipelineResult(blended[i], depth[i], unions[i], per_image[i]) for i in range(len(images))]


def run_pipeline(image: np.ndarray, mask: np.ndarray, models: Models, cfg: PipelineCfg,
                 key: int = 0) -> PipelineResult:
    """Single-image wrapper around ``run_pipeline_batch``."""
    return run_pipeline_batch(np.asarray(image)[None], np.asarray(mask)[None], models, cfg,
                              [key])[0]
