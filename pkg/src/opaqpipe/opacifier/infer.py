"""Sampling an opaque rendering for a transparent patch."""

from __future__ import annotations

import numpy as np

from ..schedule import ScheduleTable
from ..tensorgrad import Tensor, load_checkpoint, no_grad
from ..unipc import SolverConfig, sample
from .codec import cond_channel, decode_latent, encode_latent, from_diffusion
from .models import OpacifierModel


def load_opacifier(path) -> OpacifierModel:
    ckpt = load_checkpoint(path)
    if ckpt.arch.get("kind") != "opacifier":
        raise ValueError(f"{path}: not an opacifier checkpoint")
    model = OpacifierModel.from_arch(ckpt.arch)
    model.load_state_dict(ckpt.params)
    return model


def opacify_patches(I_tr: np.ndarray, masks: np.ndarray, model: OpacifierModel,
                    table: ScheduleTable, solver_cfg: SolverConfig = SolverConfig(),
                    seed: int = 0, mode: str = "mask", z_init: np.ndarray | None = None
                    ) -> np.ndarray:
    """Batch version: N×3×H×W transparent patches and N×H×W masks -> opaque patches.

    The starting noise is drawn from ``seed`` unless ``z_init`` is given.
    """
    I_tr = np.asarray(I_tr, dtype=np.float64)
    dt = model.dtype
    enc = encode_latent(I_tr)
    cond = np.stack([cond_channel(m, mode) for m in masks])[:, None]
    context = np.concatenate([enc, cond], axis=1).astype(dt)
    context.setflags(write=False)
    with no_grad():
        c = model.cond(Tensor(I_tr.astype(dt)))

    def denoiser(z, t, ctx):
        x = np.concatenate([z.astype(dt), ctx], axis=1)
        with no_grad():
            out = model.denoiser(Tensor(x), np.full(len(z), t, dtype=np.float64), c)
        return out.data.astype(np.float64)

    if z_init is None:
        z_init = np.random.default_rng(seed).standard_normal(enc.shape)
    elif np.shape(z_init) != enc.shape:
        raise ValueError(f"z_init shape {np.shape(z_init)} != latent shape {enc.shape}")
    z = sample(denoiser, z_init, context, table, solver_cfg)
    return np.clip(decode_latent(from_diffusion(z)), 0.0, 1.0)


def opacify_patch(I_tr_patch: np.ndarray, mask_patch: np.ndarray, model: OpacifierModel,
                  table: ScheduleTable, solver_cfg: SolverConfig = SolverConfig(),
                  seed: int = 0, mode: str = "mask") -> np.ndarray:
    """3×H×W transparent patch -> 3×H×W opacified patch in [0, 1]."""
    return opacify_patches(np.asarray(I_tr_patch)[None], np.asarray(mask_patch)[None], model,
                           table, solver_cfg, seed, mode)[0]
