from __future__ import annotations

import csv

import numpy as np
import pytest

from irispmi.errors import InventoryError
from irispmi.synth import (
    SIDECAR_COLUMNS,
    SIDECAR_NAME,
    draw,
    load_inventory,
    radial_edge_contrast,
    stub_degradation,
    stub_generate,
    write_stub_corpus,
    write_stub_inventory,
)
from irispmi.preprocess import save_png


def _sidecar(root, rows):
    with (root / SIDECAR_NAME).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SIDECAR_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def _fixture_inventory(root, n_rows):
    rows = []
    img = np.zeros((4, 4), np.uint8)
    for i in range(n_rows):
        band = "NIR" if i % 2 else "RGB"
        rel = f"f/{i}.png"
        save_png(root / rel, img)
        rows.append({"synthetic_id": f"s{i}", "band": band, "pmi_class": 1 + i % 18, "image_path": rel})
    _sidecar(root, rows)
    return rows


def test_two_bands_eighteen_classes_one_file(tmp_path):
    inv = write_stub_inventory(tmp_path, per_class=1, side=32)
    assert len(inv) == 36
    assert all(inv.serves(b, c) for b in ("NIR", "RGB") for c in range(1, 19))


def test_inventory_count_equals_sidecar_rows(tmp_path):
    rows = _fixture_inventory(tmp_path, 100)
    inv = load_inventory(tmp_path)
    assert len(inv) == len(rows) == 100
    for (band, c), descs in inv.index.items():
        assert all(d.band == band and d.pmi_class == c for d in descs)


def test_missing_file_listed(tmp_path):
    _fixture_inventory(tmp_path, 3)
    (tmp_path / "f" / "1.png").unlink()
    with pytest.raises(InventoryError, match=r"1 inventory image\(s\) missing: .*f/1.png"):
        load_inventory(tmp_path)


@pytest.mark.parametrize(
    "row, pattern",
    [
        ({"synthetic_id": "a", "band": "UV", "pmi_class": 1, "image_path": "x.png"}, "band"),
        ({"synthetic_id": "a", "band": "NIR", "pmi_class": 19, "image_path": "x.png"}, "pmi_class"),
        ({"synthetic_id": "a", "band": "NIR", "pmi_class": "one", "image_path": "x.png"}, "integer"),
        ({"synthetic_id": "", "band": "NIR", "pmi_class": 1, "image_path": "x.png"}, "required"),
    ],
)
def test_malformed_sidecar(tmp_path, row, pattern):
    _sidecar(tmp_path, [row])
    with pytest.raises(InventoryError, match=pattern):
        load_inventory(tmp_path)


def test_missing_sidecar(tmp_path):
    with pytest.raises(InventoryError, match="sidecar not found"):
        load_inventory(tmp_path)


def test_draw_semantics(tmp_path):
    inv = write_stub_inventory(tmp_path, per_class=5, bands=("NIR",), side=32, classes=[3])
    three = draw(inv, "NIR", 3, 3, seed=0)
    assert len({d.synthetic_id for d in three}) == 3
    assert draw(inv, "NIR", 3, 3, seed=0) == three
    assert all(d.pmi_class == 3 and d.band == "NIR" for d in three)
    assert draw(inv, "NIR", 3, 0, seed=0) == []
    with pytest.raises(InventoryError):
        draw(inv, "RGB", 3, 1, seed=0)


def test_draw_past_bucket_size_repeats(tmp_path):
    inv = write_stub_inventory(tmp_path, per_class=2, bands=("RGB",), side=32, classes=[9])
    five = inv.draw("RGB", 9, 5, seed=4)
    ids = [d.synthetic_id for d in five]
    assert len(ids) == 5 and len(set(ids)) == 2  # every original once, then repeats


def test_stub_is_deterministic_and_band_shaped():
    a, info = stub_generate("NIR", 4, seed=11, side=64)
    b, _ = stub_generate("NIR", 4, seed=11, side=64)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (64, 64) and a.dtype == np.uint8
    assert stub_generate("RGB", 4, seed=11, side=64)[0].shape == (64, 64, 3)
    assert info.circle == (31.5, 31.5, 64 / 2.2)
    with pytest.raises(ValueError):
        stub_generate("NIR", 19, 0)


def test_degradation_schedule():
    assert stub_degradation(1) == (0.0, 1.0)
    sigma, contrast = stub_degradation(18)
    assert sigma == pytest.approx(3.0) and contrast == pytest.approx(0.12)


@pytest.mark.parametrize("band", ["NIR", "RGB"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_edge_contrast_decreases_with_class(band, seed):
    stats = []
    for c in range(1, 19):
        img, info = stub_generate(band, c, seed, side=96)
        stats.append(radial_edge_contrast(img, info.circle))
    assert stats[-1] < stats[0]
    assert all(later <= earlier for earlier, later in zip(stats, stats[1:]))


def test_stub_corpus_records(tmp_path):
    recs = write_stub_corpus(tmp_path, {1: 3, 18: 2}, n_subjects=2, bands=("NIR", "RGB"), side=48)
    assert len(recs) == 10
    assert {r.subject_id for r in recs} == {"stub_subj000", "stub_subj001"}
    for r in recs:
        assert (tmp_path / r.image_path).is_file()
        assert r.iris_circle is not None
    nir = [r for r in recs if r.band == "NIR"]
    rgb = [r for r in recs if r.band == "RGB"]
    assert [r.pmi_hours for r in nir] == [r.pmi_hours for r in rgb]
    assert all(r.pmi_hours <= 24 for r in nir[:3]) and all(r.pmi_hours >= 409 for r in nir[3:])
