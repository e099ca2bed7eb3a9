"""Regression metrics, cross-fold aggregation and plot artifacts."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def _check_pair(preds: Sequence[float], targets: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0 or t.size == 0:
        raise ValueError("metrics need a non-empty prediction set")
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValueError("predictions and targets must be finite")
    return p, t


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    p, t = _check_pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    p, t = _check_pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


@dataclass(frozen=True)
class FoldMetrics:
    rmse: float
    mae: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"fold metrics need n >= 1, got {self.n}")
        # RMSE >= MAE always holds; allow for rounding in the last bit
        if not 0 <= self.mae <= self.rmse * (1 + 1e-12):
            raise ValueError(f"inconsistent fold metrics: rmse={self.rmse}, mae={self.mae}")

    @classmethod
    def from_predictions(cls, preds: Sequence[float], targets: Sequence[float]) -> "FoldMetrics":
        return cls(rmse(preds, targets), mae(preds, targets), len(preds))


@dataclass(frozen=True)
class CrossFoldSummary:
    mean_rmse: float
    std_rmse: float
    mean_mae: float
    std_mae: float


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = statistics.fmean(values)
    # sample (n-1) convention; a single fold has no spread
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def cross_fold_summary(fold_metrics: Sequence[FoldMetrics]) -> CrossFoldSummary:
    if not fold_metrics:
        raise ValueError("cross_fold_summary needs at least one fold")
    mean_rmse, std_rmse = _mean_std([f.rmse for f in fold_metrics])
    mean_mae, std_mae = _mean_std([f.mae for f in fold_metrics])
    return CrossFoldSummary(mean_rmse, std_rmse, mean_mae, std_mae)


@dataclass
class MetricsReport:
    scenario: str
    band: str
    backbone: str
    balancing: str
    folds: list[FoldMetrics] = field(default_factory=list)

    @property
    def summary(self) -> CrossFoldSummary:
        return cross_fold_summary(self.folds)

    def to_dict(self) -> dict:
        s = self.summary
        return {
            "scenario": self.scenario,
            "band": self.band,
            "backbone": self.backbone,
            "balancing": self.balancing,
            "folds": [{"rmse": float(f.rmse), "mae": float(f.mae), "n": int(f.n)} for f in self.folds],
            "mean_rmse": s.mean_rmse,
            "std_rmse": s.std_rmse,
            "mean_mae": s.mean_mae,
            "std_mae": s.std_mae,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(
            scenario=data["scenario"],
            band=data["band"],
            backbone=data["backbone"],
            balancing=data["balancing"],
            folds=[FoldMetrics(float(f["rmse"]), float(f["mae"]), int(f["n"])) for f in data["folds"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Box statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxStats:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def box_stats(values: Iterable[float]) -> BoxStats:
    """Five-number summary; quartiles use linear interpolation between order statistics."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("box_stats needs at least one value")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return BoxStats(int(v.size), float(v.min()), float(q1), float(med), float(q3), float(v.max()))


# ---------------------------------------------------------------------------
# Plots. Every figure gets a JSON sidecar so nothing downstream parses pixels.
# ---------------------------------------------------------------------------


def _figure_paths(out_path: str | Path) -> tuple[Path, Path, Path]:
    base = Path(out_path)
    if base.suffix.lower() in (".png", ".svg", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    return base.with_suffix(".png"), base.with_suffix(".svg"), base.with_suffix(".json")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def scatter_report(predictions: Sequence, out_path: str | Path, title: str | None = None) -> dict:
    """Predicted-vs-actual scatter with an identity line.

    ``predictions`` holds ``(id, y_pred, y_true)`` triples or objects with
    ``item_id``/``y_pred``/``y_true`` attributes.
    """
    points = []
    for p in predictions:
        if hasattr(p, "y_pred"):
            item_id, y_pred, y_true = p.item_id, p.y_pred, p.y_true
        else:
            item_id, y_pred, y_true = p
        points.append({"id": str(item_id), "y_true": float(y_true), "y_pred": float(y_pred)})
    if not points:
        raise ValueError("scatter_report needs at least one prediction")

    png, svg, sidecar = _figure_paths(out_path)
    plt = _pyplot()
    y_true = [p["y_true"] for p in points]
    y_pred = [p["y_pred"] for p in points]
    lo = min(min(y_true), min(y_pred), 0.0)
    hi = max(max(y_true), max(y_pred))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(y_true, y_pred, s=8, alpha=0.6)
    ax.plot([lo, hi], [lo, hi], "k--", lw=1, label="y = x")
    ax.set_xlabel("Actual PMI (hours)")
    ax.set_ylabel("Predicted PMI (hours)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    fig.savefig(svg)
    plt.close(fig)

    payload = {"kind": "scatter", "title": title, "points": points}
    sidecar.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return payload


def distribution_boxplot(
    groups: Mapping[str, Sequence[float]],
    out_path: str | Path,
    title: str | None = None,
) -> dict:
    if not groups or any(len(v) == 0 for v in groups.values()):
        raise ValueError("distribution_boxplot needs non-empty groups")
    stats = {name: box_stats(values).to_dict() for name, values in groups.items()}

    png, svg, sidecar = _figure_paths(out_path)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1.6 * len(groups) + 2, 4))
    ax.boxplot([list(v) for v in groups.values()], whis=(0, 100))
    ax.set_xticks(range(1, len(groups) + 1), list(groups))
    ax.set_ylabel("PMI (hours)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    fig.savefig(svg)
    plt.close(fig)

    payload = {"kind": "boxplot", "title": title, "groups": stats}
    sidecar.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return payload
