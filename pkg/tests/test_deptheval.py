import json
import math

import numpy as np
import pytest

from opaqpipe.deptheval import (CSV_COLUMNS, EMPTY_REGION, METRICS, AlignmentError, aggregate,
                                align_least_squares, compute_metrics, evaluate_samples,
                                read_report, region_report, write_report)


def brute_metrics(pred, gt):
    """Loop-based reference for the eight metrics."""
    n = len(gt)
    absrel = mae = sq = isq = 0.0
    logs = []
    hits = {1.025: 0, 1.05: 0, 1.10: 0}
    for p, d in zip(pred, gt):
        p = max(p, 1e-6)
        absrel += abs(p - d) / d
        mae += abs(p - d)
        sq += (p - d) ** 2
        isq += (1 / p - 1 / d) ** 2
        logs.append(math.log(p) - math.log(d))
        for tau in hits:
            if max(p / d, d / p) < tau:
                hits[tau] += 1
    mean_e = sum(logs) / n
    var = sum(e * e for e in logs) / n - mean_e ** 2
    return {"AbsRel": absrel / n, "SiLog": math.sqrt(max(var, 0.0)), "RMSE": math.sqrt(sq / n),
            "iRMSE": math.sqrt(isq / n), "MAE": mae / n, "delta_1025": 100 * hits[1.025] / n,
            "delta_105": 100 * hits[1.05] / n, "delta_110": 100 * hits[1.10] / n}


def test_worked_example():
    m = compute_metrics(np.array([1100.0, 1900.0]), np.array([1000.0, 2000.0]))
    assert m.AbsRel == pytest.approx(0.075, abs=1e-12)
    assert m.MAE == pytest.approx(100, abs=1e-9)
    assert m.RMSE == pytest.approx(100, abs=1e-9)
    assert m.iRMSE == pytest.approx(6.69e-5, rel=1e-3)
    assert m.SiLog == pytest.approx(0.0733, abs=1e-4)
    assert m.delta_105 == 0 and m.delta_110 == 50


def test_perfect_and_doubled():
    gt = np.random.default_rng(0).uniform(500, 3000, (6, 6))
    m = compute_metrics(gt, gt)
    assert (m.AbsRel, m.SiLog, m.RMSE, m.iRMSE, m.MAE) == (0, 0, 0, 0, 0)
    assert (m.delta_1025, m.delta_105, m.delta_110) == (100, 100, 100)
    m2 = compute_metrics(2 * gt, gt)
    assert m2.AbsRel == pytest.approx(1.0) and m2.delta_110 == 0


def test_strict_delta_threshold():
    assert compute_metrics(np.array([1100.0]), np.array([1000.0])).delta_110 == 0
    assert compute_metrics(np.array([1024.0]), np.array([1000.0])).delta_1025 == 100


def test_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        gt = rng.uniform(500, 4000, (8, 8))
        pred = gt * rng.uniform(0.8, 1.25, (8, 8))
        got = compute_metrics(pred, gt).values()
        ref = brute_metrics(pred.ravel(), gt.ravel())
        for k in METRICS:
            assert got[k] == pytest.approx(ref[k], abs=1e-9, rel=1e-12)


def test_metric_invariants():
    rng = np.random.default_rng(2)
    gt = rng.uniform(500, 4000, 64)
    pred = gt * rng.uniform(0.9, 1.1, 64)
    a = compute_metrics(pred, gt)
    perm = rng.permutation(64)
    b = compute_metrics(pred[perm], gt[perm])
    for k in METRICS:
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12)
    assert a.delta_1025 <= a.delta_105 <= a.delta_110


def test_metric_errors():
    with pytest.raises(ValueError, match="positive"):
        compute_metrics(np.ones(3), np.array([1.0, 0.0, 2.0]))
    empty = compute_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))
    assert empty.flag == EMPTY_REGION and math.isnan(empty.AbsRel)
    # predictions are clamped away from zero
    assert np.isfinite(compute_metrics(np.array([0.0, -5.0]), np.array([1.0, 2.0])).iRMSE)


def test_alignment_examples():
    gt = np.random.default_rng(3).uniform(500, 3000, (8, 8))
    s, b, aligned = align_least_squares(gt, gt)
    assert s == pytest.approx(1, abs=1e-12) and b == pytest.approx(0, abs=1e-8)
    s, b, aligned = align_least_squares(2 * gt + 3, gt)
    assert s == pytest.approx(0.5, abs=1e-12) and b == pytest.approx(-1.5, abs=1e-8)
    np.testing.assert_allclose(aligned, gt, rtol=1e-12)


def test_alignment_errors():
    with pytest.raises(AlignmentError, match="singular"):
        align_least_squares(np.full((4, 4), 7.0), np.ones((4, 4)))
    valid = np.zeros((4, 4))
    valid[0, 0] = 1
    with pytest.raises(AlignmentError, match="2 valid"):
        align_least_squares(np.random.default_rng(0).random((4, 4)), np.ones((4, 4)), valid)
    with pytest.raises(ValueError):
        align_least_squares(np.ones(3), np.ones(3), domain="log")


def residual(s, b, p, d):
    return float(np.sum((s * p + b - d) ** 2))


def test_alignment_matches_grid_search():
    rng = np.random.default_rng(4)
    for _ in range(5):
        gt = rng.uniform(1.0, 3.0, (8, 8))
        pred = 0.7 * gt + 0.4 + rng.normal(0, 0.05, (8, 8))
        s, b, _ = align_least_squares(pred, gt)
        # coarse-to-fine grid search around a broad window
        cs, cb, span = 1.0, 0.0, 2.0
        for _ in range(6):
            ss = np.linspace(cs - span, cs + span, 81)
            bs = np.linspace(cb - span, cb + span, 81)
            S, B = np.meshgrid(ss, bs, indexing="ij")
            r = ((S[..., None] * pred.ravel() + B[..., None] - gt.ravel()) ** 2).sum(-1)
            i, j = np.unravel_index(np.argmin(r), r.shape)
            cs, cb, span = ss[i], bs[j], span / 10
        assert round(s, 3) == pytest.approx(round(cs, 3), abs=1e-3)
        assert round(b, 3) == pytest.approx(round(cb, 3), abs=1e-3)


def test_alignment_local_optimality():
    rng = np.random.default_rng(5)
    for _ in range(50):
        gt = rng.uniform(500, 3000, 40)
        pred = rng.uniform(0.2, 2.0) * gt + rng.normal(0, 50, 40)
        s, b, _ = align_least_squares(pred, gt)
        base = residual(s, b, pred, gt)
        for ds, db in ((1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)):
            assert residual(s + ds, b + db, pred, gt) >= base


def test_disparity_recovers_gt():
    gt = np.random.default_rng(6).uniform(500, 3000, (8, 8))
    pred = 1.0 / (3.0 * (1.0 / gt) + 2e-4)
    s, b, aligned = align_least_squares(1.0 / pred, gt, domain="disparity")
    assert np.max(np.abs(aligned - gt)) < 1e-9 * gt.max()


def test_region_report_partition():
    rng = np.random.default_rng(7)
    gt = rng.uniform(500, 3000, (10, 10))
    pred = gt * rng.uniform(0.9, 1.1, (10, 10))
    tom = np.zeros((10, 10))
    tom[2:6, 3:8] = 1
    reps = {r.region: r for r in region_report(pred, gt, tom, domain="depth")}
    assert reps["ToM"].pixel_count + reps["Other"].pixel_count == reps["All"].pixel_count == 100
    s, b, aligned = align_least_squares(pred, gt)
    assert reps["ToM"].metrics == compute_metrics(aligned, gt, tom)
    assert reps["Other"].metrics == compute_metrics(aligned, gt, 1 - tom)
    assert len({(r.s, r.b) for r in reps.values()}) == 1
    raw = {r.region: r for r in region_report(pred, gt, tom)}
    assert raw["All"].s == 1 and raw["All"].metrics == compute_metrics(pred, gt)


def test_region_report_empty_tom():
    gt = np.full((4, 4), 1000.0)
    pred = gt * 1.01
    reps = {r.region: r for r in region_report(pred, gt, np.zeros((4, 4)))}
    assert reps["ToM"].metrics.flag == EMPTY_REGION
    assert reps["All"].metrics == reps["Other"].metrics
    with pytest.raises(ValueError, match="binary"):
        region_report(pred, gt, np.full((4, 4), 0.5))


def test_report_files(tmp_path):
    rng = np.random.default_rng(8)
    samples = []
    for sid in ("b", "a"):
        gt = rng.uniform(500, 3000, (6, 6))
        tom = np.zeros((6, 6))
        if sid == "a":
            tom[1:3, 1:3] = 1
        samples.append((sid, gt * 1.05, gt, tom))
    rows = evaluate_samples(samples)
    assert [r["sample_id"] for r in rows] == ["a"] * 3 + ["b"] * 3
    summary = write_report(tmp_path / "e.csv", tmp_path / "e.json", rows, {"mode": "x"})
    assert (tmp_path / "e.csv").read_text().split("\n")[0] == ",".join(CSV_COLUMNS)
    back = read_report(tmp_path / "e.csv")
    assert back[0]["AbsRel"] == rows[0]["AbsRel"] and back[0]["pixel_count"] == 4
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc == json.loads(json.dumps(summary))
    assert doc["regions"]["ToM"]["n_images"] == 1
    assert doc["regions"]["All"]["AbsRel"] == pytest.approx(0.05)


def test_aggregate_all_empty():
    rows = evaluate_samples([("a", np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))])
    assert aggregate(rows)["ToM"]["AbsRel"] is None
