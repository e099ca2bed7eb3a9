"""Adam training loop, test-time prediction and prediction files."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import preprocess
from .balance import BalancingPlan
from .data import ImageCache, Item, expand_plan, make_items, to_tensor
from .errors import TrainingError
from .evaluate import mae, rmse
from .models import FusionRegressor, PmiRegressor
from .protocol import fingerprint

LOGGER = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    epochs: int = 500
    loss: str = "mse"
    seed: int = 0
    normalize_target: bool = False
    augment: bool = True
    augment_policy: preprocess.AugmentPolicy = field(default_factory=preprocess.AugmentPolicy)
    margin_factor: float = 1.1

    def __post_init__(self) -> None:
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"loss must be mse or mae, got {self.loss!r}")
        if isinstance(self.augment_policy, dict):
            self.augment_policy = preprocess.AugmentPolicy(**self.augment_policy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    steps: int = 0

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Prediction:
    item_id: str
    y_pred: float
    y_true: float


Model = PmiRegressor | FusionRegressor


def _as_items(data, root=None) -> list[Item]:
    data = list(data)
    if data and not isinstance(data[0], Item):
        return make_items(data, root)
    return data


def _check_bands(model: Model, items: Sequence[Item]) -> None:
    for it in items:
        if it.bands != model.bands:
            raise TrainingError(
                f"item {it.item_id!r} provides bands {it.bands}, model expects {model.bands}"
            )


def _batch_inputs(
    model: Model,
    items: Sequence[Item],
    cache: ImageCache,
    augment_keys: Sequence[str] | None = None,
    config: TrainConfig | None = None,
    epoch: int = 0,
) -> list[torch.Tensor]:
    inputs = []
    for v, side in enumerate(model.sides):
        tensors = []
        for j, it in enumerate(items):
            arr = cache.get(it.views[v], side)
            if augment_keys is not None:
                rng = preprocess.sample_rng(config.seed, f"{augment_keys[j]}/{v}", epoch)
                arr = preprocess.augment(arr, config.augment_policy, rng)
            tensors.append(to_tensor(arr))
        inputs.append(torch.stack(tensors))
    return inputs


def train(
    model: Model,
    train_set,
    balancing_plan: BalancingPlan | None = None,
    config: TrainConfig | None = None,
    *,
    val_set=None,
    cache: ImageCache | None = None,
    root: str | Path | None = None,
) -> tuple[Model, TrainHistory]:
    """Fit ``model`` with Adam on ``train_set`` (items, records or pairs).

    A balancing plan replaces the training multiset with its entries; it must
    have been planned from exactly this training set.
    """
    config = config or TrainConfig()
    items = _as_items(train_set, root)
    if not items:
        raise TrainingError("training set is empty")
    _check_bands(model, items)

    if balancing_plan is not None:
        if balancing_plan.train_fingerprint != fingerprint(items):
            raise TrainingError("balancing plan was built from a different training set (fingerprint drift)")
        items = expand_plan(balancing_plan, items)
        _check_bands(model, items)

    val_items = _as_items(val_set, root) if val_set is not None else None
    cache = cache or ImageCache(config.margin_factor)

    targets = np.array([it.pmi_hours for it in items], dtype=np.float64)
    if config.normalize_target:
        std = float(targets.std()) or 1.0
        model.set_target_scaling(float(targets.mean()), std)
    else:
        model.set_target_scaling(0.0, 1.0)
    scaled = (targets - float(model.target_mean)) / float(model.target_std)

    # duplicated entries get distinct augmentation streams
    seen: dict[str, int] = {}
    aug_keys = []
    for it in items:
        n = seen.get(it.item_id, 0)
        seen[it.item_id] = n + 1
        aug_keys.append(f"{it.item_id}#{n}")

    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = F.mse_loss if config.loss == "mse" else F.l1_loss
    history = TrainHistory()

    for epoch in range(config.epochs):
        start = time.perf_counter()
        model.train()
        order = order_rng.permutation(len(items))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = [items[i] for i in idx]
            keys = [aug_keys[i] for i in idx] if config.augment else None
            inputs = _batch_inputs(model, batch, cache, keys, config, epoch)
            y = torch.as_tensor(scaled[idx], dtype=torch.float32).unsqueeze(1)
            optimizer.zero_grad()
            loss = loss_fn(model(*inputs), y)
            loss.backward()
            optimizer.step()
            history.steps += 1
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.train_loss.append(total / count)
        if val_items:
            preds = predict(model, val_items, cache)
            history.val_rmse.append(rmse([p.y_pred for p in preds], [p.y_true for p in preds]))
            history.val_mae.append(mae([p.y_pred for p in preds], [p.y_true for p in preds]))
        history.epoch_seconds.append(time.perf_counter() - start)
        LOGGER.debug("epoch %d loss %.4f", epoch + 1, history.train_loss[-1])

    model.eval()
    return model, history


def predict(
    model: Model,
    test_set,
    cache: ImageCache | None = None,
    batch_size: int = 64,
    root: str | Path | None = None,
) -> list[Prediction]:
    """One prediction per test item; crops only, never augmentation."""
    items = _as_items(test_set, root)
    _check_bands(model, items)
    cache = cache or ImageCache()
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for lo in range(0, len(items), batch_size):
                batch = items[lo : lo + batch_size]
                hours = model.to_hours(model(*_batch_inputs(model, batch, cache))).reshape(-1)
                for it, y_hat in zip(batch, hours.tolist()):
                    if not math.isfinite(y_hat):
                        raise TrainingError(f"non-finite prediction for item {it.item_id!r}")
                    out.append(Prediction(it.item_id, float(y_hat), float(it.pmi_hours)))
    finally:
        model.train(was_training)
    return out


def write_predictions(path: str | Path, predictions: Sequence[Prediction]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_true_hours", "y_pred_hours"])
        for p in predictions:
            writer.writerow([p.item_id, f"{p.y_true:.6f}", f"{p.y_pred:.6f}"])
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            Prediction(row["id"], float(row["y_pred_hours"]), float(row["y_true_hours"]))
            for row in csv.DictReader(fh)
        ]
