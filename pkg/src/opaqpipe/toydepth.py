"""Small monocular depth regressor trained on opaque renderings only.

It stands in for an off-the-shelf depth backbone: it has never seen a
transparent object, so refraction fools it the way it fools real models.
The network predicts log-depth (mm); two fixed coordinate channels are
appended to the RGB input so that the floor's row-dependent depth is
learnable at this tiny receptive field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import maskops
from .scenegen import ScenePair
from .tensorgrad import (AdamW, Conv2d, ConvNormAct, Module, Tensor, concat, load_checkpoint,
                         no_grad, save_checkpoint, warmup_lr)
from .tensorgrad import functional as F
from .training import Snapshot, is_finite, write_log

LOG_COLUMNS = ["iteration", "lr", "loss"]


def coord_channels(n: int, h: int, w: int) -> np.ndarray:
    """Row and column coordinates in [-1, 1], N×2×H×W."""
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.broadcast_to(np.stack([yy, xx])[None], (n, 2, h, w)).copy()


class DepthNet(Module):
    """Three-resolution conv encoder-decoder with skip connections."""

    def __init__(self, seed: int = 0, base: int = 24, groups: int = 8,
                 init_log_depth: float = math.log(2000.0)):
        rng = np.random.default_rng(seed)
        self.arch = {"kind": "depthnet", "seed": seed, "base": base, "groups": groups}
        b = base
        self.enc0 = [ConvNormAct(5, b, groups, rng), ConvNormAct(b, b, groups, rng)]
        self.enc1 = [ConvNormAct(b, 2 * b, groups, rng, stride=2),
                     ConvNormAct(2 * b, 2 * b, groups, rng)]
        self.enc2 = [ConvNormAct(2 * b, 4 * b, groups, rng, stride=2),
                     ConvNormAct(4 * b, 4 * b, groups, rng)]
        self.dec1 = ConvNormAct(6 * b, 2 * b, groups, rng)
        self.dec0 = ConvNormAct(3 * b, b, groups, rng)
        self.head = Conv2d(b, 1, 3, rng, zero_init=True)
        self.head.bias.data[:] = init_log_depth

    @staticmethod
    def _up(x: Tensor, like: Tensor) -> Tensor:
        return F.separable(x, maskops.resize_matrix(x.shape[-2], like.shape[-2]),
                           maskops.resize_matrix(x.shape[-1], like.shape[-1]))

    def forward(self, img: Tensor) -> Tensor:
        """N×3×H×W image -> N×1×H×W log-depth."""
        n, _, h, w = img.shape
        x = concat([img, Tensor(coord_channels(n, h, w).astype(img.dtype))], axis=1)
        for blk in self.enc0:
            x = blk(x)
        s0 = x
        for blk in self.enc1:
            x = blk(x)
        s1 = x
        for blk in self.enc2:
            x = blk(x)
        x = self.dec1(concat([self._up(x, s1), s1], axis=1))
        x = self.dec0(concat([self._up(x, s0), s0], axis=1))
        return self.head(x)


def predict_depth(img: np.ndarray, model: DepthNet, batch: int = 32) -> np.ndarray:
    """Depth in mm for a 3×H×W image (H×W out) or an N-batch (N×H×W out)."""
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    outs = []
    with no_grad():
        for s in range(0, len(img), batch):
            x = Tensor(img[s:s + batch].astype(model.dtype))
            outs.append(np.exp(model(x).data[:, 0].astype(np.float64)))
    out = np.concatenate(outs)
    return out[0] if single else out


@dataclass(frozen=True)
class DepthTrainCfg:
    iterations: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    seed: int = 0


def depth_training_set(opaque_pairs: list[ScenePair], empty_pairs: list[ScenePair]):
    """Images and log-depth targets; transparent renderings are never included."""
    imgs = [p.I_op for p in opaque_pairs] + [p.I_op for p in empty_pairs]
    for p in empty_pairs:
        if p.masks:
            raise ValueError("object-free scenes must not contain objects")
    depths = [p.depth for p in opaque_pairs] + [p.depth for p in empty_pairs]
    return np.stack(imgs), np.log(np.stack(depths))[:, None]


def train_depthnet(opaque_pairs: list[ScenePair], empty_pairs: list[ScenePair],
                   cfg: DepthTrainCfg = DepthTrainCfg(), log_path=None, ckpt_path=None
                   ) -> tuple[DepthNet, list[dict]]:
    """L1 regression of log-depth."""
    imgs, targets = depth_training_set(opaque_pairs, empty_pairs)
    net = DepthNet(cfg.seed)
    opt = AdamW(net.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    snap = Snapshot(net)
    rows = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(len(imgs), size=cfg.batch_size)
        opt.lr = warmup_lr(it, cfg.lr, cfg.warmup)
        try:
            pred = net(Tensor(imgs[idx].astype(net.dtype)))
            loss = F.absolute(pred - Tensor(targets[idx].astype(net.dtype))).mean()
        except FloatingPointError as exc:
            write_log(log_path, LOG_COLUMNS, rows)
            snap.abort(it, str(exc), ckpt_path, net.arch)
        if not is_finite(loss.item()):
            write_log(log_path, LOG_COLUMNS, rows)
            snap.abort(it, "non-finite loss", ckpt_path, net.arch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"iteration": it, "lr": opt.lr, "loss": loss.item()})
        if it % 50 == 0:
            snap.update(it)
    write_log(log_path, LOG_COLUMNS, rows)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, net.arch, net.state_dict())
    return net, rows


def load_depthnet(path) -> DepthNet:
    ckpt = load_checkpoint(path)
    if ckpt.arch.get("kind") != "depthnet":
        raise ValueError(f"{path}: not a depth network checkpoint")
    net = DepthNet(ckpt.arch["seed"], ckpt.arch["base"], ckpt.arch["groups"])
    net.load_state_dict(ckpt.params)
    return net
