"""Depth evaluation: least-squares alignment, eight metrics, region splits.

Metric definitions (d̂ prediction, d ground truth, both mm):

    AbsRel = mean |d̂ - d| / d          MAE   = mean |d̂ - d|
    RMSE   = sqrt mean (d̂ - d)^2       iRMSE = sqrt mean (1/d̂ - 1/d)^2
    SiLog  = sqrt(mean e^2 - (mean e)^2),  e = ln d̂ - ln d
    delta_tau = 100 * fraction[max(d̂/d, d/d̂) < tau]   (strict)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import storage

METRICS = ("AbsRel", "SiLog", "RMSE", "iRMSE", "MAE", "delta_1025", "delta_105", "delta_110")
DELTAS = {"delta_1025": 1.025, "delta_105": 1.05, "delta_110": 1.10}
REGIONS = ("ToM", "All", "Other")
DOMAINS = ("depth", "disparity", "none")
CSV_COLUMNS = ["sample_id", "region", *METRICS, "s", "b", "domain", "pixel_count"]
MIN_DEPTH = 1e-6
EMPTY_REGION = "empty-region"


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSet:
    AbsRel: float
    SiLog: float
    RMSE: float
    iRMSE: float
    MAE: float
    delta_1025: float
    delta_105: float
    delta_110: float
    flag: str = ""

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRICS}


@dataclass(frozen=True)
class RegionReport:
    region: str
    metrics: MetricSet
    pixel_count: int
    s: float
    b: float
    domain: str

    def row(self, sample_id: str) -> dict:
        return {"sample_id": sample_id, "region": self.region, **self.metrics.values(),
                "s": self.s, "b": self.b, "domain": self.domain, "pixel_count": self.pixel_count}


def _fit_affine(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Closed-form minimizer of sum (s x + b - y)^2."""
    n = x.size
    if n < 2:
        raise AlignmentError(f"alignment needs at least 2 valid pixels, got {n}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx <= 1e-12 * max(1.0, float(x @ x)):
        raise AlignmentError("alignment is singular: prediction is constant over the valid pixels")
    s = float(dx @ (y - ym)) / sxx
    return s, float(ym - s * xm)


def align_least_squares(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None,
                        domain: str = "depth") -> tuple[float, float, np.ndarray]:
    """Fit one (s, b) on the valid pixels and apply it to the whole image.

    ``depth`` fits ``s*pred + b`` to gt directly; ``disparity`` fits it to
    ``1/gt`` and returns ``1 / max(s*pred + b, 1e-6)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid) > 0
    if domain == "depth":
        s, b = _fit_affine(pred[valid], gt[valid])
        return s, b, s * pred + b
    if domain == "disparity":
        s, b = _fit_affine(pred[valid], 1.0 / gt[valid])
        return s, b, 1.0 / np.maximum(s * pred + b, MIN_DEPTH)
    raise ValueError(f"unknown alignment domain {domain!r}")


def _empty() -> MetricSet:
    return MetricSet(*([math.nan] * len(METRICS)), flag=EMPTY_REGION)


def compute_metrics(aligned_pred: np.ndarray, gt: np.ndarray,
                    region: np.ndarray | None = None) -> MetricSet:
    pred = np.asarray(aligned_pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    sel = np.ones(gt.shape, bool) if region is None else np.asarray(region) > 0
    if not sel.any():
        return _empty()
    d = gt[sel]
    if not np.all(d > 0):
        raise ValueError("ground-truth depth must be positive inside the region")
    p = np.maximum(pred[sel], MIN_DEPTH)
    diff = p - d
    e = np.log(p) - np.log(d)
    ratio = np.maximum(p / d, d / p)
    return MetricSet(
        AbsRel=float(np.mean(np.abs(diff) / d)),
        SiLog=float(math.sqrt(max(np.mean(e * e) - np.mean(e) ** 2, 0.0))),
        RMSE=float(math.sqrt(np.mean(diff * diff))),
        iRMSE=float(math.sqrt(np.mean((1.0 / p - 1.0 / d) ** 2))),
        MAE=float(np.mean(np.abs(diff))),
        **{k: float(100.0 * np.mean(ratio < tau)) for k, tau in DELTAS.items()},
    )


def region_report(pred: np.ndarray, gt: np.ndarray, tom_mask: np.ndarray,
                  domain: str = "none", valid: np.ndarray | None = None) -> list[RegionReport]:
    """ToM / All / Other reports sharing one per-image alignment.

    ``domain="none"`` evaluates the raw (already metric) prediction with
    s = 1, b = 0; otherwise the fit runs on the valid pixels of the whole image.
    """
    m = np.asarray(tom_mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("ToM mask must be binary")
    tom = m > 0
    valid = np.ones(tom.shape, bool) if valid is None else np.asarray(valid) > 0
    if domain == "none":
        s, b, aligned = 1.0, 0.0, np.asarray(pred, dtype=np.float64)
    elif domain in DOMAINS:
        s, b, aligned = align_least_squares(pred, gt, valid, domain)
    else:
        raise ValueError(f"unknown alignment domain {domain!r}")
    out = []
    for name, sel in (("ToM", tom & valid), ("All", valid), ("Other", ~tom & valid)):
        out.append(RegionReport(name, compute_metrics(aligned, gt, sel), int(sel.sum()),
                                s, b, domain))
    return out


def evaluate_samples(samples, domain: str = "none") -> list[dict]:
    """Rows for ``(sample_id, pred, gt, tom_mask)`` tuples, sorted by id then region."""
    rows = []
    for sid, pred, gt, tom in sorted(samples, key=lambda x: x[0]):
        rows.extend(r.row(sid) for r in region_report(pred, gt, tom, domain))
    return rows


def aggregate(rows: list[dict]) -> dict:
    """Per-region means over non-empty rows plus image counts."""
    out = {}
    for region in REGIONS:
        sel = [r for r in rows if r["region"] == region and not math.isnan(float(r["AbsRel"]))]
        entry = {"n_images": len(sel), "pixel_count": int(sum(int(r["pixel_count"]) for r in sel))}
        for k in METRICS:
            # JSON has no NaN; an all-empty region aggregates to null
            entry[k] = float(np.mean([float(r[k]) for r in sel])) if sel else None
        out[region] = entry
    return out


def write_report(csv_path, json_path, rows: list[dict], extra: dict | None = None) -> dict:
    storage.write_csv(csv_path, CSV_COLUMNS, rows)
    summary = {"regions": aggregate(rows), **(extra or {})}
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def read_report(csv_path) -> list[dict]:
    """Rows with metric columns parsed back to float."""
    rows = storage.read_csv(csv_path, CSV_COLUMNS)
    numeric = set(METRICS) | {"s", "b"}
    return [{k: (float(v) if k in numeric else int(v) if k == "pixel_count" else v)
             for k, v in r.items()} for r in rows]


__all__ = ["METRICS", "REGIONS", "CSV_COLUMNS", "EMPTY_REGION", "AlignmentError", "MetricSet",
           "RegionReport", "align_least_squares", "compute_metrics", "region_report",
           "evaluate_samples", "aggregate", "write_report", "read_report"]
