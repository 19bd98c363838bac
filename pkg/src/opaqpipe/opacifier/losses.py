"""Training objectives: noise regression plus gated image-space auxiliaries.

``total = L_LDM + lambda * mean_i(g_i * L_aux_i)`` with ``g_i = [t_i < tau*T]``.
The auxiliary term is computed on the decoded one-step estimate of the clean
image and is one of: a masked random-feature perceptual distance, a
multi-scale log-luminance gradient loss, or a masked L1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import maskops
from ..schedule import ScheduleTable, forward_diffuse
from ..tensorgrad import Conv2d, Module, Tensor, freeze, index_batch, stack
from ..tensorgrad import functional as F
from .codec import build_model_input, decode_latent_t, encode_latent, from_diffusion, to_diffusion

LUMA = (0.299, 0.587, 0.114)
LOG_EPS = 1e-4
VARIANTS = ("lpips", "grad", "l1", "none")


@dataclass(frozen=True)
class OpacifierLossConfig:
    lambda_lpips: float = 0.05
    gate_tau: float = 0.3
    variant: str = "lpips"
    grad_scales: tuple[int, ...] = (2, 4, 8)

    def __post_init__(self):
        if self.lambda_lpips < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_lpips}")
        if not 0.0 <= self.gate_tau <= 1.0:
            raise ValueError(f"gate tau must be in [0, 1], got {self.gate_tau}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")


@dataclass
class TrainBatch:
    """Patches at model resolution; ``mask`` is the (augmented) conditioning mask."""

    I_tr: np.ndarray     # N×3×H×W
    I_op: np.ndarray     # N×3×H×W
    mask: np.ndarray     # N×H×W

    def __len__(self) -> int:
        return self.I_tr.shape[0]


# ---------------------------------------------------------------------------
# clean-latent estimate

def predict_z0(z_t: np.ndarray, eps_hat: np.ndarray, t, table: ScheduleTable) -> np.ndarray:
    """``(z_t - sigma_t eps_hat) / a_t``; ``t`` is a scalar or one per leading-axis sample."""
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != z_t shape {z_t.shape}")
    idx = table._idx(t)
    a, s = table.a[idx], table.sigma[idx]
    if np.ndim(a):
        a = a.reshape(a.shape + (1,) * (z_t.ndim - 1))
        s = s.reshape(a.shape)
    return (z_t - s * eps_hat) / a


def predict_z0_t(z_t: np.ndarray, eps_hat: Tensor, t: int, table: ScheduleTable) -> Tensor:
    """Differentiable (in eps_hat) clean-latent estimate for one sample."""
    a, s = table.a_at(t), table.sigma_at(t)
    return Tensor((np.asarray(z_t) / a).astype(eps_hat.dtype)) - eps_hat * (s / a)


# ---------------------------------------------------------------------------
# auxiliary image losses (single images, C×H×W)

def _const(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.float64


def l1_loss(pred, gt, seg_mask) -> Tensor:
    """Masked L1 summed over channels, normalized by the mask pixel count."""
    dt = _dtype_of(pred, gt)
    pred, gt = _const(pred, dt), _const(gt, dt)
    if pred.shape != gt.shape:
        raise ValueError(f"l1_loss: shapes {pred.shape} and {gt.shape} differ")
    m = np.asarray(seg_mask, dtype=dt)
    count = float((m > 0).sum())
    if count == 0:
        return Tensor(np.zeros((), dt))
    mc = Tensor(np.broadcast_to(m, pred.shape).copy())
    return (F.absolute(pred - gt) * mc).sum() / count


def _luminance(img: Tensor) -> Tensor:
    r, g, b = (index_batch(img, i) for i in range(3))
    return r * LUMA[0] + g * LUMA[1] + b * LUMA[2]


def _sobel_maps(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(smooth, derivative) n×n matrices of the separable Sobel kernel, clamped borders."""
    S = np.zeros((n, n))
    D = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        S[i, lo] += 1.0
        S[i, i] += 2.0
        S[i, hi] += 1.0
        D[i, hi] += 1.0
        D[i, lo] -= 1.0
    return S, D


def interior_mask(seg_mask: np.ndarray, passes: int = 2) -> np.ndarray:
    m = (np.asarray(seg_mask) > 0.5).astype(np.float64)
    for _ in range(passes):
        m = maskops.erode(m)
    return m


def grad_loss(pred, gt, seg_mask, scales=(2, 4, 8)) -> Tensor:
    """Multi-scale Sobel loss on log-luminance inside the eroded mask interior.

    Each image's luminance is Gaussian-smoothed (sigma = s/2) and then
    log-transformed before differentiation.
    """
    dt = _dtype_of(pred, gt)
    pred, gt = _const(pred, dt), _const(gt, dt)
    m_in = interior_mask(seg_mask)
    count = float(m_in.sum())
    if count == 0:
        return Tensor(np.zeros((), dt))
    h, w = pred.shape[-2:]
    Sh, Dh = _sobel_maps(h)
    Sw, Dw = _sobel_maps(w)
    M = Tensor(m_in.astype(dt))
    y_pred, y_gt = _luminance(pred), _luminance(gt)
    total = None
    for s in scales:
        Bh, Bw = maskops.blur_matrix(h, s / 2), maskops.blur_matrix(w, s / 2)
        lp = F.log(F.clip(F.separable(y_pred, Bh, Bw), 0.0, np.inf) + LOG_EPS)
        lg = F.log(F.clip(F.separable(y_gt, Bh, Bw), 0.0, np.inf) + LOG_EPS)
        diff = lp - lg
        gx = F.separable(diff, Sh, Dw)
        gy = F.separable(diff, Dh, Sw)
        term = ((F.absolute(gx) * M).sum() + (F.absolute(gy) * M).sum()) / count
        total = term if total is None else total + term
    return total / float(len(scales))


class FeaturePyramid(Module):
    """Fixed random three-level conv features standing in for a pretrained backbone."""

    def __init__(self, seed: int = 20240):
        rng = np.random.default_rng(seed)
        self.levels = [Conv2d(3, 8, 3, rng), Conv2d(8, 16, 3, rng, stride=2),
                       Conv2d(16, 32, 3, rng, stride=2)]
        freeze(self)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv in self.levels:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


@lru_cache(maxsize=4)
def _pyramid(dtype_name: str) -> FeaturePyramid:
    return FeaturePyramid().astype(np.dtype(dtype_name))


def perceptual_surrogate(x, y, mask) -> Tensor:
    """Masked distance between unit-normalized random features, summed over levels."""
    dt = _dtype_of(x, y)
    x, y = _const(x, dt), _const(y, dt)
    if x.shape != y.shape:
        raise ValueError(f"perceptual_surrogate: shapes {x.shape} and {y.shape} differ")
    m = np.asarray(mask, dtype=np.float64)
    if not (m > 0).any():
        return Tensor(np.zeros((), dt))
    net = _pyramid(np.dtype(dt).name)
    x = x.reshape((1,) + x.shape)
    y = y.reshape((1,) + y.shape)
    total = None
    for level, (fx, fy) in enumerate(zip(net(x), net(y))):
        d = ((F.channel_normalize(fx) - F.channel_normalize(fy)) ** 2).sum(axis=1)
        ml = maskops.downsample_soft(m, 2 ** level) if level else m
        term = (d * Tensor(ml[None].astype(dt))).sum() / float(ml.sum())
        total = term if total is None else total + term
    return total


def aux_loss(variant: str, pred: Tensor, gt: np.ndarray, mask: np.ndarray,
             scales=(2, 4, 8)) -> Tensor:
    if variant == "lpips":
        return perceptual_surrogate(pred, gt, mask)
    if variant == "grad":
        return grad_loss(pred, gt, mask, scales)
    if variant == "l1":
        return l1_loss(pred, gt, mask)
    raise ValueError(f"no auxiliary loss for variant {variant!r}")


# ---------------------------------------------------------------------------
# training objective

def model_inputs(batch: TrainBatch, z_t: np.ndarray, mode: str = "mask") -> np.ndarray:
    return np.stack([build_model_input(z_t[i], batch.I_tr[i], batch.mask[i], mode)
                     for i in range(len(batch))])


def predict_noise(model, batch: TrainBatch, z_t: np.ndarray, t: np.ndarray,
                  mode: str = "mask") -> Tensor:
    dt = model.dtype
    x = Tensor(model_inputs(batch, z_t, mode).astype(dt))
    c = model.cond(Tensor(batch.I_tr.astype(dt)))
    return model.denoiser(x, t, c)


def draw_noise(batch: TrainBatch, table: ScheduleTable, rng: np.random.Generator):
    """Per-sample timesteps (uniform on 1..T) and standard-normal latent noise."""
    n = len(batch)
    t = rng.integers(1, table.T + 1, size=n)
    z_shape = encode_latent(batch.I_op).shape
    eps = rng.standard_normal(z_shape)
    return t, eps


@dataclass
class LossParts:
    total: Tensor
    ldm: float
    aux: float
    gated_fraction: float


def total_train_loss(batch: TrainBatch, model, cfg: OpacifierLossConfig, table: ScheduleTable,
                     t: np.ndarray, eps: np.ndarray, mode: str = "mask") -> LossParts:
    """Noise-regression loss plus the gated auxiliary term.

    When no sample passes the gate (or lambda is 0, or the variant is
    ``none``) the returned tensor is the noise-regression loss itself.
    """
    dt = model.dtype
    z0 = to_diffusion(encode_latent(batch.I_op))
    z_t = forward_diffuse(z0, t, eps, table)
    eps_hat = predict_noise(model, batch, z_t, t, mode)
    ldm = ((eps_hat - Tensor(eps.astype(dt))) ** 2).mean()

    gate = np.asarray(t) < cfg.gate_tau * table.T
    active = cfg.variant != "none" and cfg.lambda_lpips > 0
    if not active or not gate.any():
        return LossParts(ldm, ldm.item(), 0.0, float(gate.mean()) if active else 0.0)

    terms = []
    for i in np.nonzero(gate)[0]:
        z_pred = predict_z0_t(z_t[i], index_batch(eps_hat, int(i)), int(t[i]), table)
        img = decode_latent_t(from_diffusion(z_pred))
        terms.append(aux_loss(cfg.variant, img, batch.I_op[i], batch.mask[i], cfg.grad_scales))
    aux = stack(terms).sum() / float(len(batch))
    total = ldm + aux * cfg.lambda_lpips
    return LossParts(total, ldm.item(), aux.item(), float(gate.mean()))


def ldm_loss(batch: TrainBatch, model, table: ScheduleTable, t: np.ndarray, eps: np.ndarray,
             mode: str = "mask") -> Tensor:
    """Mean squared error between injected and predicted latent noise."""
    cfg = OpacifierLossConfig(variant="none")
    return total_train_loss(batch, model, cfg, table, t, eps, mode).total
