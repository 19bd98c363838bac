"""Opacifier training on object-centred patches of paired scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import maskops
from ..patches import crop_box, extract, extract_mask, mask_bbox
from ..scenegen import ScenePair
from ..schedule import ScheduleTable, build_schedule
from ..tensorgrad import AdamW, save_checkpoint, warmup_lr
from ..training import Snapshot, is_finite, write_log
from .losses import OpacifierLossConfig, TrainBatch, draw_noise, total_train_loss
from .models import OpacifierModel

LOG_COLUMNS = ["iteration", "lr", "L_LDM", "L_aux", "gated_fraction"]


@dataclass(frozen=True)
class Instance:
    scene: int
    obj: int
    box: object


@dataclass
class PatchSet:
    """Every object instance of a scene list, cropped to the model resolution."""

    pairs: list[ScenePair]
    size: int = 32
    margin: float = 1.25
    instances: list[Instance] = field(init=False)

    def __post_init__(self):
        self.instances = []
        for si, p in enumerate(self.pairs):
            h, w = p.depth.shape
            for k, m in enumerate(p.masks):
                bbox = mask_bbox(m)
                if bbox is not None:
                    self.instances.append(Instance(si, k, crop_box(bbox, h, w, self.margin)))
        if not self.instances:
            raise ValueError("dataset contains no object instances")
        self.I_tr = np.stack([self._crop(i, "I_tr") for i in self.instances])
        self.I_op = np.stack([self._crop(i, "I_op") for i in self.instances])
        self.gt_mask = np.stack([extract_mask(self.pairs[i.scene].masks[i.obj], i.box, self.size)
                                 for i in self.instances])

    def _crop(self, inst: Instance, attr: str) -> np.ndarray:
        return np.clip(extract(getattr(self.pairs[inst.scene], attr), inst.box, self.size), 0, 1)

    def __len__(self) -> int:
        return len(self.instances)

    def augmented_mask(self, idx: int, seed: int) -> np.ndarray:
        """Augment the full-frame object mask, then crop it like the images."""
        inst = self.instances[idx]
        full = maskops.augment_mask(self.pairs[inst.scene].masks[inst.obj], seed)
        return extract_mask(full, inst.box, self.size)

    def batch(self, idx, aug_seeds=None) -> TrainBatch:
        idx = np.asarray(idx)
        if aug_seeds is None:
            masks = self.gt_mask[idx]
        else:
            masks = np.stack([self.augmented_mask(int(i), int(s)) for i, s in zip(idx, aug_seeds)])
        return TrainBatch(self.I_tr[idx], self.I_op[idx], masks)


@dataclass(frozen=True)
class OpacifierTrainCfg:
    iterations: int = 3000
    batch_size: int = 4
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = True
    cond_mode: str = "mask"
    output: str = "v"
    loss: OpacifierLossConfig = OpacifierLossConfig()


def train_opacifier(pairs: list[ScenePair], cfg: OpacifierTrainCfg = OpacifierTrainCfg(),
                    table: ScheduleTable | None = None, log_path=None, ckpt_path=None,
                    model: OpacifierModel | None = None) -> tuple[OpacifierModel, list[dict]]:
    """Train denoiser and condition mapper; returns the model and the loss log rows."""
    table = table or build_schedule()
    data = pairs if isinstance(pairs, PatchSet) else PatchSet(pairs)
    model = model or OpacifierModel(seed=cfg.seed, latent_size=data.size // 2, output=cfg.output,
                                    T=table.T, beta_min=float(table.beta[0]),
                                    beta_max=float(table.beta[-1]))
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    snap = Snapshot(model)
    rows = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(len(data), size=cfg.batch_size)
        seeds = rng.integers(2 ** 31, size=cfg.batch_size) if cfg.augment else None
        batch = data.batch(idx, seeds)
        t, eps = draw_noise(batch, table, rng)
        opt.lr = warmup_lr(it, cfg.lr, cfg.warmup)
        try:
            parts = total_train_loss(batch, model, cfg.loss, table, t, eps, cfg.cond_mode)
        except FloatingPointError as exc:
            write_log(log_path, LOG_COLUMNS, rows)
            snap.abort(it, str(exc), ckpt_path, model.arch)
        if not is_finite(parts.total.item()):
            write_log(log_path, LOG_COLUMNS, rows)
            snap.abort(it, "non-finite loss", ckpt_path, model.arch)
        opt.zero_grad()
        parts.total.backward()
        opt.step()
        rows.append({"iteration": it, "lr": opt.lr, "L_LDM": parts.ldm, "L_aux": parts.aux,
                     "gated_fraction": parts.gated_fraction})
        if it % 50 == 0:
            snap.update(it)
    write_log(log_path, LOG_COLUMNS, rows)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model.arch, model.state_dict())
    return model, rows


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
