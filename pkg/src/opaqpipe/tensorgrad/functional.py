"""Differentiable layer vocabulary: convolutions, normalizations, activations,
fixed linear spatial maps and the few losses that need fused gradients."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make


def _as4d(x: Tensor):
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected C×H×W or N×C×H×W input, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int | None = None) -> Tensor:
    """2-D cross-correlation over C×H×W or N×C×H×W input.

    ``k=3`` uses ``pad=1`` and ``k=1`` uses ``pad=0`` so stride-1 convolutions
    preserve the spatial size; ``stride=2`` halves it (rounding up).
    """
    x4, squeeze = _as4d(x)
    n, c, h, w = x4.shape
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be C_out×C_in×k×k, got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d: kernel must be 1×1 or 3×3, got {k}×{k2}")
    if c_in != c:
        raise ValueError(f"conv2d: input channel dimension {c} != weight C_in {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias dimension {bias.shape} != C_out ({c_out},)")
    expected_pad = (k - 1) // 2
    if pad is None:
        pad = expected_pad
    if pad != expected_pad:
        raise ValueError(f"conv2d: k={k} requires pad={expected_pad}, got pad={pad}")

    xd = x4.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(c_out, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x4.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x4, weight, bias) if bias is not None else (x4, weight)
    y = make(out, parents, bw, "conv2d")
    return y.reshape(y.shape[1:]) if squeeze else y


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x4, squeeze = _as4d(x)
    n, c, h, w = x4.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    m = (c // groups) * h * w
    xg = x4.data.reshape(n, groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggam = (g * xhat).sum(axis=(0, 2, 3))
        gbet = g.sum(axis=(0, 2, 3))
        gxh = (g * gam).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (gxh - gxh.mean(axis=2, keepdims=True)
                    - xh * (gxh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggam, gbet

    y = make(out, (x4, gamma, beta), bw, "group_norm")
    return y.reshape(y.shape[1:]) if squeeze else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of an N×D tensor."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(out, (x, gamma, beta), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N×D_in and weight D_out×D_in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(out, parents, bw, "linear")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return make(r, (x,), lambda g: (0.5 * g / r,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return make(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = ((x.data > lo) & (x.data < hi)).astype(x.dtype)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-sample, per-channel vector (N×C) to every pixel of x (N×C×H×W)."""
    if x.ndim != 4 or bias.shape != x.shape[:2]:
        raise ValueError(f"add_channel_bias: bias {bias.shape} does not match {x.shape[:2]}")
    return make(x.data + bias.data[:, :, None, None], (x, bias),
                lambda g: (g, g.sum(axis=(2, 3))), "channel_bias")


def repeat_channels(x: Tensor, c: int) -> Tensor:
    """Tile a single-channel N×1×H×W map to N×c×H×W."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"repeat_channels expects N×1×H×W, got {x.shape}")
    return make(np.repeat(x.data, c, axis=1), (x,), lambda g: (g.sum(axis=1, keepdims=True),),
                "repeat_channels")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool N×C×H×W -> N×C."""
    return x.mean(axis=(2, 3))


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply a fixed linear map independently along H and W.

    Computes ``rows @ X @ cols.T`` for every channel image X.  Resizing,
    area pooling, Gaussian smoothing and Sobel filtering are all instances.
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ValueError(f"separable: maps {rows.shape}/{cols.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def bw(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return make(out, (x,), bw, "separable")


def channel_normalize(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each pixel's channel vector to unit length."""
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=1, keepdims=True) + eps)
    y = xd / nrm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / nrm,)

    return make(y, (x,), bw, "channel_normalize")


def bce(p: Tensor, target: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Elementwise binary cross-entropy of probabilities ``p`` against fixed labels."""
    y = np.asarray(target, dtype=p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"bce: target shape {y.shape} != {p.shape}")
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    out = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def bw(g):
        return (g * (pc - y) / (pc * (1.0 - pc)),)

    return make(out, (p,), bw, "bce")
