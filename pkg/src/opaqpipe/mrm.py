"""Mask refinement: a small pixel-wise head that sharpens a rough object mask.

Input channels are [generated-or-opaque image (3), transparent image (3),
mask (1)].  The loss is binary cross-entropy plus a mid-value penalty
``M(1 - M)`` pushing the soft mask away from 0.5; both are per-pixel means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import maskops
from .opacifier.train import PatchSet
from .scenegen import ScenePair
from .tensorgrad import (AdamW, Conv2d, GroupNorm, Module, Tensor, load_checkpoint, no_grad,
                         save_checkpoint)
from .tensorgrad import functional as F
from .training import Snapshot, is_finite, write_log

LOG_COLUMNS = ["iteration", "epoch", "loss", "bce", "mid"]
IOU_COLUMNS = ["sample", "iou"]


class MrmNet(Module):
    """conv3 7→64, GN(32), SiLU; conv3 64→32, GN(32), SiLU; conv3 32→16, GN(16), SiLU;
    conv1 16→1, sigmoid."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.arch = {"kind": "mrm", "seed": seed}
        self.conv1 = Conv2d(7, 64, 3, rng)
        self.norm1 = GroupNorm(32, 64)
        self.conv2 = Conv2d(64, 32, 3, rng)
        self.norm2 = GroupNorm(32, 32)
        self.conv3 = Conv2d(32, 16, 3, rng)
        self.norm3 = GroupNorm(16, 16)
        self.head = Conv2d(16, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = F.silu(self.norm2(self.conv2(h)))
        h = F.silu(self.norm3(self.conv3(h)))
        return F.sigmoid(self.head(h))


def mrm_input(I_a: np.ndarray, I_tr: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Concatenate [I_a, I_tr, mask]; accepts single images or N-batches."""
    I_a, I_tr, mask = (np.asarray(v, dtype=np.float64) for v in (I_a, I_tr, mask))
    single = I_a.ndim == 3
    if single:
        I_a, I_tr, mask = I_a[None], I_tr[None], mask[None]
    if mask.ndim == 3:
        mask = mask[:, None]
    if not (I_a.shape[-2:] == I_tr.shape[-2:] == mask.shape[-2:]):
        raise ValueError(f"spatial size mismatch: I_a {I_a.shape[-2:]}, I_tr {I_tr.shape[-2:]}, "
                         f"mask {mask.shape[-2:]}")
    if I_a.shape[1] != 3 or I_tr.shape[1] != 3 or mask.shape[1] != 1:
        raise ValueError("expected 3-channel images and a 1-channel mask")
    return np.concatenate([I_a, I_tr, mask], axis=1)


def mrm_forward(net: MrmNet, I_a, I_tr, mask) -> Tensor:
    """Soft refined mask, N×1×H×W in (0, 1)."""
    return net(Tensor(mrm_input(I_a, I_tr, mask).astype(net.dtype)))


def mrm_loss(M_refine: Tensor, M_star: np.ndarray, lambda_mid: float = 0.1):
    """Return (total, bce, mid) with every term a per-pixel mean."""
    target = np.asarray(M_star, dtype=M_refine.dtype).reshape(M_refine.shape)
    bce = F.bce(M_refine, target).mean()
    mid = (M_refine * (1.0 - M_refine)).mean()
    return bce + mid * lambda_mid, bce, mid


def binarize_mask(M_refine: np.ndarray, M_seg: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold, keep components touching the segmentation, then close and open."""
    soft = np.asarray(M_refine, dtype=np.float64).reshape(np.shape(M_seg))
    hard = (soft >= threshold).astype(np.float64)
    comps = maskops.connected_components(hard)
    seg = np.asarray(M_seg) > 0
    keep = np.zeros(hard.shape, dtype=bool)
    for label in range(1, comps.count + 1):
        region = comps.labels == label
        if (region & seg).any():
            keep |= region
    out = maskops.morphology(keep.astype(np.float64), "close")
    return maskops.morphology(out, "open")


def blend(I_pred: np.ndarray, I_tr: np.ndarray, M_hat: np.ndarray) -> np.ndarray:
    """Per-pixel selection: I_pred where the binary mask is set, I_tr elsewhere."""
    I_pred, I_tr = np.asarray(I_pred), np.asarray(I_tr)
    if I_pred.shape != I_tr.shape:
        raise ValueError(f"blend: image shapes {I_pred.shape} and {I_tr.shape} differ")
    m = np.asarray(M_hat)
    if m.shape != I_tr.shape[-2:]:
        raise ValueError(f"blend: mask shape {m.shape} != image size {I_tr.shape[-2:]}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("blend: mask must be binary")
    return np.where(m[None] > 0, I_pred, I_tr)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


@dataclass(frozen=True)
class MrmTrainCfg:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 6
    lambda_mid: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0


def _patch_set(pairs) -> PatchSet:
    return pairs if isinstance(pairs, PatchSet) else PatchSet(pairs)


def train_mrm(pairs: list[ScenePair] | PatchSet, cfg: MrmTrainCfg = MrmTrainCfg(),
              log_path=None, ckpt_path=None) -> tuple[MrmNet, list[dict]]:
    """Train on object patches: input (I_op, I_tr, augmented mask), target the true mask."""
    data = _patch_set(pairs)
    net = MrmNet(cfg.seed)
    opt = AdamW(net.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    snap = Snapshot(net)
    rows = []
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            seeds = rng.integers(2 ** 31, size=len(idx))
            aug = np.stack([data.augmented_mask(int(i), int(s)) for i, s in zip(idx, seeds)])
            it += 1
            try:
                out = mrm_forward(net, data.I_op[idx], data.I_tr[idx], aug)
                loss, bce, mid = mrm_loss(out, data.gt_mask[idx], cfg.lambda_mid)
            except FloatingPointError as exc:
                write_log(log_path, LOG_COLUMNS, rows)
                snap.abort(it, str(exc), ckpt_path, net.arch)
            if not is_finite(loss.item()):
                write_log(log_path, LOG_COLUMNS, rows)
                snap.abort(it, "non-finite loss", ckpt_path, net.arch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append({"iteration": it, "epoch": epoch, "loss": loss.item(),
                         "bce": bce.item(), "mid": mid.item()})
        snap.update(it)
    write_log(log_path, LOG_COLUMNS, rows)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, net.arch, net.state_dict())
    return net, rows


def refine_masks(net: MrmNet, I_a, I_tr, masks) -> np.ndarray:
    """Soft masks N×H×W without recording a graph."""
    with no_grad():
        return mrm_forward(net, I_a, I_tr, masks).data[:, 0].astype(np.float64)


def evaluate_mrm(net: MrmNet, pairs, aug_seed: int = 12345) -> list[float]:
    """IoU of the binarized refined mask against the true mask per held-out patch.

    The rough input mask is an augmented copy of the truth, as in training.
    """
    data = _patch_set(pairs)
    aug = np.stack([data.augmented_mask(i, aug_seed + i) for i in range(len(data))])
    soft = np.concatenate([refine_masks(net, data.I_op[s:s + 64], data.I_tr[s:s + 64],
                                        aug[s:s + 64]) for s in range(0, len(data), 64)])
    return [iou(binarize_mask(soft[i], aug[i]), data.gt_mask[i]) for i in range(len(data))]


def write_iou_report(path, ious: list[float]) -> None:
    write_log(path, IOU_COLUMNS, [{"sample": i, "iou": v} for i, v in enumerate(ious)])


def load_mrm(path) -> MrmNet:
    ckpt = load_checkpoint(path)
    if ckpt.arch.get("kind") != "mrm":
        raise ValueError(f"{path}: not a mask refinement checkpoint")
    net = MrmNet(ckpt.arch["seed"])
    net.load_state_dict(ckpt.params)
    return net
