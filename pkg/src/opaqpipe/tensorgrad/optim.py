from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Parameter], state: AdamWState) -> None:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Frozen parameters (``trainable=False``) and parameters without a gradient
    are skipped.  Gradients are left untouched; the caller zeroes them.
    """
    if state.lr <= 0:
        raise ValueError(f"AdamW learning rate must be positive, got {state.lr}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if not p.trainable:
            continue
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)


class AdamW:
    """Thin stateful wrapper so training loops read naturally."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"AdamW learning rate must be positive, got {lr}")
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def warmup_lr(iteration: int, base_lr: float, warmup: int) -> float:
    """Linear warm-up over the first ``warmup`` iterations (1-based), then constant."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, iteration / warmup)
