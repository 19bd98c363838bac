"""Shared training-loop plumbing: divergence handling and loss logs."""

from __future__ import annotations

import math

from . import storage
from .tensorgrad import Module, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; the last good weights were restored."""


class Snapshot:
    """Keep a copy of the weights that produced the last finite loss."""

    def __init__(self, model: Module):
        self.model = model
        self.state = model.state_dict()
        self.iteration = 0

    def update(self, iteration: int) -> None:
        self.state = self.model.state_dict()
        self.iteration = iteration

    def abort(self, iteration: int, reason: str, ckpt_path=None, arch: dict | None = None):
        self.model.load_state_dict(self.state)
        where = ""
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, arch or {}, self.state)
            where = f"; weights from iteration {self.iteration} saved to {ckpt_path}"
        raise TrainingDiverged(f"loss diverged at iteration {iteration} ({reason}){where}")


def is_finite(x: float) -> bool:
    return math.isfinite(x)


def write_log(path, columns: list[str], rows: list[dict]) -> None:
    if path is not None:
        storage.write_csv(path, columns, rows)
