from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# Finite differences carry an absolute error of roughly eps_mach*|f|/h from
# roundoff alone, so entries whose true derivative is (structurally) zero
# show an O(1) relative error against any tiny floor.  Relative errors are
# measured against max(|analytic|, |fd|, floor) with floor scaled to that
# roundoff level.
NOISE_FLOOR_FACTOR = 1e5


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_tensor: int
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


def grad_check_report(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-6,
                      max_entries: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare backward() against central differences on the listed tensors.

    ``fn`` rebuilds the scalar loss from scratch on every call.  With
    ``max_entries`` set, that many coordinates per tensor are drawn at random
    (seeded) instead of checking all of them.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires double precision tensors")
        t.grad = None
        t.requires_grad = True
    loss = fn()
    if loss.dtype != np.float64:
        raise ValueError("grad_check requires a double precision loss")
    f0 = abs(loss.item())
    loss.backward()
    floor = max(1e-12, NOISE_FLOOR_FACTOR * np.finfo(np.float64).eps * max(1.0, f0) / h)
    rng = np.random.default_rng(seed)

    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0, 0)
    checked = 0
    for ti, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or max_entries >= n else \
            np.sort(rng.choice(n, size=max_entries, replace=False))
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = fn().item()
            flat[j] = orig - h
            fm = fn().item()
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            an = float(analytic.reshape(-1)[j])
            rel = abs(an - fd) / max(abs(an), abs(fd), floor)
            checked += 1
            if rel > worst.max_rel_error or worst.worst_tensor < 0:
                worst = GradCheckResult(rel, ti, np.unravel_index(j, t.shape), an, fd, 0)
    worst.checked = checked
    for t in tensors:
        t.grad = None
    return worst


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(fn, tensors, h, max_entries, seed).max_rel_error
