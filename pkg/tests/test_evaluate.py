from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from irispmi.evaluate import (
    FoldMetrics,
    MetricsReport,
    box_stats,
    cross_fold_summary,
    distribution_boxplot,
    mae,
    rmse,
    scatter_report,
)


def _two_pass(values):
    """Independent mean and sample stdev: explicit two-pass loop."""
    n = len(values)
    total = 0.0
    for v in values:
        total += v
    mean = total / n
    if n == 1:
        return mean, 0.0
    ss = 0.0
    for v in values:
        ss += (v - mean) ** 2
    return mean, math.sqrt(ss / (n - 1))


# -- rmse / mae -------------------------------------------------------------


def test_hand_examples():
    assert rmse([0, 0], [3, 4]) == math.sqrt(12.5)
    assert mae([0, 0], [3, 4]) == 3.5
    assert rmse([1, 2, 3], [1, 2, 3]) == 0 == mae([1, 2, 3], [1, 2, 3])
    assert mae([3], [10]) == 7


def test_constant_error_gives_equal_metrics():
    y = np.linspace(0, 500, 17)
    assert rmse(y + 4.0, y) == pytest.approx(4.0) == mae(y + 4.0, y)


@pytest.mark.parametrize("fn", [rmse, mae])
def test_metric_errors(fn):
    with pytest.raises(ValueError, match="empty"):
        fn([], [])
    with pytest.raises(ValueError, match="length"):
        fn([1, 2], [1])
    with pytest.raises(ValueError, match="finite"):
        fn([1, math.nan], [1, 2])
    with pytest.raises(ValueError, match="finite"):
        fn([1, 2], [1, math.inf])


# values on a 1e-6 grid: squared differences never underflow
_val = st.floats(-1e4, 1e4).map(lambda x: round(x, 6))
_vec = st.lists(_val, min_size=1, max_size=50)


@settings(max_examples=150)
@given(_vec, st.data())
def test_rmse_bounds_mae(preds, data):
    targets = data.draw(st.lists(_val, min_size=len(preds), max_size=len(preds)))
    r, m = rmse(preds, targets), mae(preds, targets)
    assert r >= m * (1 - 1e-12) >= 0


@settings(max_examples=100)
@given(_vec, st.data())
def test_rmse_equals_mae_iff_equal_absolute_errors(preds, data):
    errs = np.abs(np.subtract(preds, data.draw(st.lists(_val, min_size=len(preds), max_size=len(preds)))))
    targets = np.asarray(preds) - errs
    equal = np.ptp(errs) <= 1e-9 * max(1.0, errs.max())
    r, m = rmse(preds, targets), mae(preds, targets)
    if equal:
        assert r == pytest.approx(m, rel=1e-9, abs=1e-9)
    else:
        assume(np.ptp(errs) > 1e-3)
        assert r > m


@settings(max_examples=100)
@given(_vec, st.randoms(use_true_random=False), st.floats(-1e3, 1e3))
def test_permutation_invariance_and_translation_covariance(preds, rnd, c):
    targets = [p * 0.5 + 3 for p in preds]
    idx = list(range(len(preds)))
    rnd.shuffle(idx)
    p2, t2 = [preds[i] for i in idx], [targets[i] for i in idx]
    assert rmse(p2, t2) == pytest.approx(rmse(preds, targets), rel=1e-12)
    assert mae(p2, t2) == pytest.approx(mae(preds, targets), rel=1e-12)
    shifted = rmse([p + c for p in preds], [t + c for t in targets])
    assert shifted == pytest.approx(rmse(preds, targets), rel=1e-9, abs=1e-6)
    assert mae([p + c for p in preds], [t + c for t in targets]) == pytest.approx(mae(preds, targets), rel=1e-9, abs=1e-6)


# -- cross-fold summary -----------------------------------------------------


def test_summary_examples():
    s = cross_fold_summary([FoldMetrics(6, 5, 10), FoldMetrics(8, 6, 10)])
    assert s.mean_rmse == 7 and s.mean_mae == 5.5
    assert s.std_rmse == pytest.approx(math.sqrt(2))
    same = cross_fold_summary([FoldMetrics(3, 2, 4)] * 4)
    assert same.std_rmse == 0 and same.std_mae == 0
    one = cross_fold_summary([FoldMetrics(3, 2, 4)])
    assert (one.mean_rmse, one.std_rmse) == (3, 0)
    with pytest.raises(ValueError):
        cross_fold_summary([])


def test_summary_matches_two_pass_oracle():
    rng = np.random.default_rng(3)
    folds = []
    for _ in range(10):
        e = rng.normal(0, 50, 30)
        folds.append(FoldMetrics.from_predictions(e, np.zeros(30)))
    s = cross_fold_summary(folds)
    for metric, mean, std in (("rmse", s.mean_rmse, s.std_rmse), ("mae", s.mean_mae, s.std_mae)):
        m, sd = _two_pass([getattr(f, metric) for f in folds])
        assert mean == pytest.approx(m, rel=1e-12)
        assert std == pytest.approx(sd, rel=1e-12)


def test_fold_metrics_invariants():
    f = FoldMetrics.from_predictions([1, 2, 9], [0, 0, 0])
    assert f.n == 3 and f.rmse >= f.mae >= 0
    with pytest.raises(ValueError):
        FoldMetrics(1.0, 2.0, 3)
    with pytest.raises(ValueError):
        FoldMetrics(1.0, 1.0, 0)


def test_metrics_report_json(tmp_path):
    rep = MetricsReport("S2_subject_disjoint", "NIR", "toy_cnn", "none", [FoldMetrics(6, 5, 10), FoldMetrics(8, 6, 12)])
    data = json.loads(rep.to_json())
    assert list(data) == ["scenario", "band", "backbone", "balancing", "folds", "mean_rmse", "std_rmse", "mean_mae", "std_mae"]
    assert data["folds"][1] == {"rmse": 8, "mae": 6, "n": 12}
    assert data["mean_rmse"] == 7
    loaded = MetricsReport.load(rep.save(tmp_path / "m.json"))
    assert loaded == rep
    assert loaded.to_json() == rep.to_json()


# -- box statistics and plots ----------------------------------------------


def test_box_stats_examples():
    assert box_stats([5, 10, 15]).median == 10
    a = box_stats([3, 1, 2, 8])
    assert a == box_stats([3, 1, 2, 8])
    values = [7, 1, 3, 9, 4, 12, 6]
    s = box_stats(values)
    # sorted 1 3 4 6 7 9 12; positions 1.5, 3, 4.5
    assert (s.min, s.q1, s.median, s.q3, s.max) == (1, 3.5, 6, 8, 12)
    with pytest.raises(ValueError):
        box_stats([])


def test_scatter_sidecar_points(tmp_path):
    pts = [("a", 10.0, 12.0), ("b", 30.5, 30.5), ("c", 0.0, 4.0)]
    payload = scatter_report(pts, tmp_path / "sc", title="t")
    side = json.loads((tmp_path / "sc.json").read_text())
    assert side == payload
    assert [(p["id"], p["y_pred"], p["y_true"]) for p in side["points"]] == pts
    assert (tmp_path / "sc.png").stat().st_size > 0 and (tmp_path / "sc.svg").stat().st_size > 0


def test_scatter_perfect_and_count(tmp_path):
    y = np.random.default_rng(0).uniform(0, 1000, 100)
    side = scatter_report([(f"i{k}", v, v) for k, v in enumerate(y)], tmp_path / "p.png")
    assert len(side["points"]) == 100
    assert all(p["y_pred"] == p["y_true"] for p in side["points"])
    with pytest.raises(ValueError):
        scatter_report([], tmp_path / "e")


def test_boxplot_sidecar(tmp_path):
    values = [7, 1, 3, 9, 4, 12, 6]
    side = distribution_boxplot({"train": values, "test": values, "other": [5, 10, 15]}, tmp_path / "bx")
    assert side["groups"]["train"] == side["groups"]["test"]
    assert side["groups"]["other"]["median"] == 10
    assert side["groups"]["train"]["q1"] == 3.5
    assert json.loads((tmp_path / "bx.json").read_text()) == side
    with pytest.raises(ValueError):
        distribution_boxplot({"a": []}, tmp_path / "bad")
