"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import functional
from .checkpoint import MAGIC, ModelCheckpoint, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_report
from .layers import Conv2d, ConvNormAct, GroupNorm, LayerNorm, Linear, Module, freeze
from .optim import AdamW, AdamWState, adamw_step, warmup_lr
from .tensor import Parameter, Tensor, concat, index_batch, no_grad, stack

__all__ = [
    "AdamW", "AdamWState", "Conv2d", "ConvNormAct", "GroupNorm", "LayerNorm", "Linear", "MAGIC",
    "Module", "ModelCheckpoint", "Parameter", "Tensor", "adamw_step", "concat", "freeze",
    "functional", "grad_check", "grad_check_report", "index_batch", "load_checkpoint",
    "no_grad", "save_checkpoint", "stack", "warmup_lr",
]
