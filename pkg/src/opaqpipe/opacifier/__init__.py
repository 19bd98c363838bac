"""Conditional latent denoiser mapping transparent patches to opaque renderings."""

from .codec import build_model_input, cond_channel, decode_latent, encode_latent
from .infer import load_opacifier, opacify_patch, opacify_patches
from .losses import (OpacifierLossConfig, TrainBatch, grad_loss, l1_loss, ldm_loss,
                     perceptual_surrogate, predict_z0, total_train_loss)
from .models import ConditionEncoder, DenoiserNet, OpacifierModel
from .train import OpacifierTrainCfg, PatchSet, train_opacifier

__all__ = [
    "ConditionEncoder", "DenoiserNet", "OpacifierLossConfig", "OpacifierModel",
    "OpacifierTrainCfg", "PatchSet", "TrainBatch", "build_model_input", "cond_channel",
    "decode_latent", "encode_latent", "grad_loss", "l1_loss", "ldm_loss", "load_opacifier",
    "opacify_patch", "opacify_patches", "perceptual_surrogate", "predict_z0",
    "total_train_loss", "train_opacifier",
]
