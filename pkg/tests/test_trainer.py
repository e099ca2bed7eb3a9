from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from irispmi import preprocess
from irispmi.balance import plan_real_upsampling
from irispmi.data import ImageCache, make_items
from irispmi.errors import TrainingError
from irispmi.manifest import pair_multispectral
from irispmi.models import BackboneSpec, build_fusion_model, build_narrowband_model
from irispmi.synth import write_stub_corpus
from irispmi.trainer import (
    Prediction,
    TrainConfig,
    predict,
    read_predictions,
    train,
    write_predictions,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    counts = {c: 4 for c in range(1, 17)}  # 64 samples
    records = write_stub_corpus(root, counts, n_subjects=8, bands=("NIR", "RGB"), side=64, seed=0)
    nir = [r for r in records if r.band == "NIR"]
    pairs = pair_multispectral(records).pairs
    return {
        "root": root,
        "nir": nir,
        "items": make_items(nir, root),
        "pairs": make_items(pairs, root),
        "cache": ImageCache(),
    }


def _toy(band="NIR", seed=0):
    return build_narrowband_model(BackboneSpec("toy_cnn", band), seed=seed)


def _mse(model, items, cache):
    preds = predict(model, items, cache)
    return float(np.mean([(p.y_pred - p.y_true) ** 2 for p in preds]))


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.optimizer, cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.epochs, cfg.loss) == (
        "adam",
        1e-4,
        1e-6,
        32,
        500,
        "mse",
    )
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"epochs": 0}, {"loss": "huber"}, {"optimizer": "sgd"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_training_reduces_loss(corpus):
    cfg = TrainConfig(learning_rate=1e-3, epochs=30, normalize_target=True, seed=0)
    model, hist = train(_toy(), corpus["items"], None, cfg, cache=corpus["cache"])
    assert len(hist) == 30 == len(hist.epoch_seconds)
    assert hist.train_loss[-1] < hist.train_loss[0]


def test_single_full_batch_epoch_is_one_step(corpus):
    items = corpus["items"]
    cfg = TrainConfig(epochs=1, batch_size=len(items), augment=False)
    _, hist = train(_toy(), items, None, cfg, cache=corpus["cache"])
    assert hist.steps == 1 and len(hist) == 1


def test_same_seed_gives_identical_loss_curves(corpus):
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=16, seed=7)
    runs = [train(_toy(seed=1), corpus["items"][:32], None, cfg, cache=corpus["cache"])[1] for _ in range(2)]
    assert runs[0].train_loss == runs[1].train_loss


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_adam_step_lowers_batch_loss(corpus, seed):
    items = corpus["items"][:32]
    model = _toy(seed=seed)
    before = _mse(model, items, corpus["cache"])
    train(model, items, None, TrainConfig(epochs=1, batch_size=32, augment=False, seed=seed), cache=corpus["cache"])
    assert _mse(model, items, corpus["cache"]) < before


def test_fusion_training_runs(corpus):
    model = build_fusion_model("toy_cnn", hidden_dim=16, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=16, normalize_target=True)
    model, hist = train(model, corpus["pairs"][:24], None, cfg, cache=corpus["cache"])
    assert len(hist) == 2
    assert len(predict(model, corpus["pairs"][:5], corpus["cache"])) == 5


def test_validation_history(corpus):
    cfg = TrainConfig(epochs=2, batch_size=16)
    _, hist = train(_toy(), corpus["items"][:16], None, cfg, val_set=corpus["items"][16:24], cache=corpus["cache"])
    assert len(hist.val_rmse) == len(hist.val_mae) == 2
    assert all(r >= m for r, m in zip(hist.val_rmse, hist.val_mae))


def test_records_are_accepted_directly(corpus):
    cfg = TrainConfig(epochs=1, batch_size=64, augment=False)
    _, hist = train(_toy(), corpus["nir"][:8], None, cfg, root=corpus["root"])
    assert hist.steps == 1


# -- errors -----------------------------------------------------------------


def test_band_mismatch_and_empty_set(corpus):
    with pytest.raises(TrainingError, match="bands"):
        train(_toy("RGB"), corpus["items"][:4], None, TrainConfig(epochs=1))
    with pytest.raises(TrainingError, match="bands"):
        predict(_toy("RGB"), corpus["items"][:4], corpus["cache"])
    with pytest.raises(TrainingError, match="empty"):
        train(_toy(), [], None, TrainConfig(epochs=1))


def test_plan_drift_rejected(corpus):
    plan = plan_real_upsampling(corpus["nir"][:10], 0)
    with pytest.raises(TrainingError, match="fingerprint"):
        train(_toy(), corpus["items"][:9], plan, TrainConfig(epochs=1))


def test_plan_sets_training_multiplicity(corpus):
    nir = corpus["nir"][:12]
    plan = plan_real_upsampling(nir, 0)
    seen = []
    cfg = TrainConfig(epochs=1, batch_size=1000, augment=False)
    model = _toy()
    hook = model.register_forward_hook(lambda m, inp, out: seen.append(inp[0].shape[0]))
    _, hist = train(model, make_items(nir, corpus["root"]), plan, cfg, cache=corpus["cache"])
    hook.remove()
    assert hist.steps == 1
    assert seen[0] == len(plan.flat()) == plan.target_count * sum(1 for n in plan.class_counts().values() if n)


# -- prediction -------------------------------------------------------------


def test_five_item_prediction(corpus):
    preds = predict(_toy(), corpus["items"][:5], corpus["cache"])
    assert len(preds) == 5
    assert [p.item_id for p in preds] == [it.item_id for it in corpus["items"][:5]]
    assert [p.y_true for p in preds] == [it.pmi_hours for it in corpus["items"][:5]]


def test_constant_head_predicts_its_bias(corpus):
    model = _toy()
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.fill_(12.0)
    assert {p.y_pred for p in predict(model, corpus["items"][:6], corpus["cache"])} == {12.0}
    fusion = build_fusion_model("toy_cnn", hidden_dim=4, seed=0)
    with torch.no_grad():
        fusion.head.fc2.weight.zero_()
        fusion.head.fc2.bias.fill_(12.0)
    assert {p.y_pred for p in predict(fusion, corpus["pairs"][:3], corpus["cache"])} == {12.0}


def test_normalized_target_is_inverted(corpus):
    model = _toy()
    cfg = TrainConfig(epochs=1, normalize_target=True, augment=False)
    train(model, corpus["items"][:20], None, cfg, cache=corpus["cache"])
    targets = np.array([it.pmi_hours for it in corpus["items"][:20]])
    assert float(model.target_mean) == pytest.approx(targets.mean())
    assert float(model.target_std) == pytest.approx(targets.std())
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.fill_(1.0)
    (p,) = predict(model, corpus["items"][:1], corpus["cache"])
    assert p.y_pred == pytest.approx(targets.mean() + targets.std())


def test_predict_never_augments(corpus, monkeypatch):
    calls = []
    real = preprocess.augment
    monkeypatch.setattr(preprocess, "augment", lambda *a, **k: calls.append(1) or real(*a, **k))
    model = _toy()
    train(model, corpus["items"][:4], None, TrainConfig(epochs=1, batch_size=4), cache=corpus["cache"])
    assert len(calls) == 4  # the counter is live during training
    calls.clear()
    predict(model, corpus["items"], corpus["cache"])
    assert calls == []


def test_non_finite_prediction_names_item(corpus):
    model = _toy()
    with torch.no_grad():
        model.head.bias.fill_(math.nan)
    with pytest.raises(TrainingError, match=corpus["items"][0].item_id):
        predict(model, corpus["items"][:2], corpus["cache"])


def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    preds = [Prediction(f"id{i}", round(float(rng.uniform(0, 1700)), 6), round(float(rng.uniform(0, 1700)), 6)) for i in range(50)]
    path = write_predictions(tmp_path / "p.csv", preds)
    assert path.read_text().splitlines()[0] == "id,y_true_hours,y_pred_hours"
    back = read_predictions(path)
    assert back == preds
