"""Model-ready training/test items and a cropped-image cache.

An ``Item`` is what the trainer consumes: an id, a PMI label and one view per
band (one for narrow-band models, NIR then RGB for fusion). Items come from
manifest records, multispectral pairs, or synthetic balancing inserts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .balance import BalancingPlan
from .errors import TrainingError
from .manifest import Manifest, MultispectralPair, SampleRecord
from .preprocess import CropSpec, crop_iris, load_image, resize_square

# fixed intensity scaling; no dataset statistics are involved
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class View:
    band: str
    image_path: str
    circle: tuple[float, float, float] | None = None  # None: image is already an iris crop


@dataclass(frozen=True)
class Item:
    item_id: str
    pmi_hours: float
    views: tuple[View, ...]
    is_synthetic: bool = False

    @property
    def bands(self) -> tuple[str, ...]:
        return tuple(v.band for v in self.views)


def _view(rec: SampleRecord, root: Path) -> View:
    path = Path(rec.image_path)
    path = path if path.is_absolute() else root / path
    circle = rec.iris_circle.as_tuple() if rec.iris_circle else None
    return View(rec.band, str(path), circle)


def make_items(units: Manifest | Iterable[SampleRecord | MultispectralPair], root: str | Path | None = None) -> list[Item]:
    if isinstance(units, Manifest):
        root = units.root if root is None else root
        units = units.records
    root = Path(root or ".")
    items = []
    for u in units:
        if isinstance(u, MultispectralPair):
            items.append(Item(u.unit_id, u.pmi_hours, (_view(u.nir, root), _view(u.rgb, root)), u.nir.is_synthetic))
        else:
            items.append(Item(u.sample_id, u.pmi_hours, (_view(u, root),), u.is_synthetic))
    return items


def expand_plan(plan: BalancingPlan, items: Sequence[Item]) -> list[Item]:
    """Resolve a balancing plan against the training items it was built from."""
    by_id = {it.item_id: it for it in items}
    out = []
    for entry in plan.flat():
        if entry.kind == "real_ref":
            if entry.sample_id not in by_id:
                raise TrainingError(f"balancing plan references {entry.sample_id!r}, which is not in the training set")
            out.append(by_id[entry.sample_id])
        else:
            views = tuple(View(d.band, d.image_path, None) for d in entry.synthetic)
            sid = "+".join(d.synthetic_id for d in entry.synthetic)
            out.append(Item(sid, entry.assigned_pmi, views, True))
    return out


class ImageCache:
    """Crops are deterministic, so each (image, side) is decoded and cropped once."""

    def __init__(self, margin_factor: float = 1.1):
        self.margin_factor = margin_factor
        self._store: dict[tuple, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, view: View, side: int) -> np.ndarray:
        key = (view.image_path, view.circle, side)
        arr = self._store.get(key)
        if arr is None:
            image = load_image(view.image_path, view.band)
            if view.circle is None:
                arr = resize_square(image, side)
            else:
                arr = crop_iris(image, view.circle, CropSpec(side, self.margin_factor))
            arr.setflags(write=False)
            self._store[key] = arr
        return arr


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W) or (H, W, C) -> float32 (C, H, W), scaled to roughly zero mean."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy((arr - PIXEL_MEAN) / PIXEL_STD)
