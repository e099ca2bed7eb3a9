"""Pre-generated synthetic iris inventory and a procedural stand-in generator.

An inventory is a directory of images plus a sidecar CSV
(``synthetic_id,band,pmi_class,image_path``). ``stub_generate`` renders
iris-like images whose blur and contrast collapse grow with the PMI class,
which gives desk-scale experiments a learnable signal without a GAN.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import InventoryError
from .preprocess import save_png

LOGGER = logging.getLogger(__name__)

SIDECAR_NAME = "inventory.csv"
SIDECAR_COLUMNS = ("synthetic_id", "band", "pmi_class", "image_path")
N_CLASSES = 18
BANDS = ("NIR", "RGB")

# stub degradation schedule: class 1 is pristine, class 18 is heavily decomposed
STUB_MAX_BLUR = 3.0
STUB_MIN_CONTRAST = 0.12


@dataclass(frozen=True)
class SyntheticDescriptor:
    synthetic_id: str
    band: str
    pmi_class: int
    image_path: str

    def to_dict(self) -> dict:
        return {
            "synthetic_id": self.synthetic_id,
            "band": self.band,
            "pmi_class": self.pmi_class,
            "image_path": self.image_path,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticDescriptor":
        return cls(str(d["synthetic_id"]), str(d["band"]), int(d["pmi_class"]), str(d["image_path"]))


@dataclass
class SyntheticInventory:
    root: Path
    index: dict[tuple[str, int], list[SyntheticDescriptor]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.index.values())

    def serves(self, band: str, class_index: int) -> bool:
        return bool(self.index.get((band, class_index)))

    def draw(self, band: str, class_index: int, n: int, seed: int) -> list[SyntheticDescriptor]:
        return draw(self, band, class_index, n, seed)


def load_inventory(root: str | Path, sidecar: str = SIDECAR_NAME) -> SyntheticInventory:
    root = Path(root)
    sidecar_path = root / sidecar
    if not sidecar_path.is_file():
        raise InventoryError(f"sidecar not found: {sidecar_path}")

    index: dict[tuple[str, int], list[SyntheticDescriptor]] = defaultdict(list)
    missing: list[str] = []
    seen: set[str] = set()
    with sidecar_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in SIDECAR_COLUMNS):
            raise InventoryError(f"{sidecar_path}: header must contain {', '.join(SIDECAR_COLUMNS)}")
        for row in reader:
            where = f"{sidecar_path.name} row {reader.line_num}"
            sid, band, cls_raw, rel = (str(row[c] or "").strip() for c in SIDECAR_COLUMNS)
            if not sid or not rel:
                raise InventoryError(f"{where}: synthetic_id and image_path are required")
            if sid in seen:
                raise InventoryError(f"{where}: duplicate synthetic_id {sid!r}")
            seen.add(sid)
            if band not in BANDS:
                raise InventoryError(f"{where}: band must be NIR or RGB, got {band!r}")
            try:
                class_index = int(cls_raw)
            except ValueError:
                raise InventoryError(f"{where}: pmi_class is not an integer: {cls_raw!r}") from None
            if not 1 <= class_index <= N_CLASSES:
                raise InventoryError(f"{where}: pmi_class must be in 1..{N_CLASSES}, got {class_index}")
            path = Path(rel) if Path(rel).is_absolute() else root / rel
            if not path.is_file():
                missing.append(str(path))
                continue
            index[(band, class_index)].append(SyntheticDescriptor(sid, band, class_index, str(path)))

    if missing:
        raise InventoryError(f"{len(missing)} inventory image(s) missing: " + ", ".join(missing))
    return SyntheticInventory(root, dict(index))


def draw(inventory: SyntheticInventory, band: str, class_index: int, n: int, seed: int) -> list[SyntheticDescriptor]:
    """Seeded draw: without replacement while the bucket lasts, then with replacement."""
    bucket = inventory.index.get((band, class_index), [])
    if not bucket:
        raise InventoryError(f"inventory has no {band} images for PMI class {class_index}")
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(bucket))
    picks = list(order[: min(n, len(bucket))])
    if n > len(bucket):
        picks.extend(rng.integers(0, len(bucket), size=n - len(bucket)))
    return [bucket[i] for i in picks]


# ---------------------------------------------------------------------------
# Procedural stub
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StubInfo:
    band: str
    pmi_class: int
    seed: int
    circle: tuple[float, float, float]
    blur_sigma: float
    contrast: float


def stub_degradation(class_index: int) -> tuple[float, float]:
    """(blur sigma in px, contrast factor) for a PMI class."""
    t = (class_index - 1) / (N_CLASSES - 1)
    return STUB_MAX_BLUR * t, STUB_MIN_CONTRAST**t


def _stub_base(side: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2
    rho = np.hypot(xx - c, yy - c) / radius
    theta = np.arctan2(yy - c, xx - c)

    pupil = rng.uniform(0.28, 0.42)
    texture = np.zeros_like(rho)
    for _ in range(6):
        freq_a = rng.integers(6, 40)
        freq_r = rng.uniform(8, 30)
        texture += np.sin(freq_a * theta + rng.uniform(0, 2 * np.pi)) * np.cos(
            freq_r * rho + rng.uniform(0, 2 * np.pi)
        )
    texture /= 6
    texture += 0.35 * rng.standard_normal(rho.shape)

    iris_level = rng.uniform(100, 150)
    img = np.full_like(rho, rng.uniform(180, 215))  # sclera / skin
    annulus = (rho >= pupil) & (rho <= 1.0)
    img[annulus] = iris_level + 45 * texture[annulus]
    img[rho < pupil] = rng.uniform(15, 40)
    return img


def stub_generate(
    band: str,
    class_index: int,
    seed: int,
    side: int = 224,
    radius: float | None = None,
) -> tuple[np.ndarray, StubInfo]:
    """Deterministic iris-like raster for (band, PMI class, seed).

    Texture comes from ``seed`` alone; degradation comes from the class alone,
    so at a fixed seed the images differ only in blur and contrast.
    """
    if band not in BANDS:
        raise ValueError(f"band must be NIR or RGB, got {band!r}")
    if not 1 <= class_index <= N_CLASSES:
        raise ValueError(f"class_index must be in 1..{N_CLASSES}, got {class_index}")
    radius = side / 2.2 if radius is None else float(radius)

    rng = np.random.default_rng(seed)
    base = _stub_base(side, radius, rng)
    tint = rng.uniform(0.75, 1.15, size=3)

    sigma, contrast = stub_degradation(class_index)
    mean = base.mean()
    img = mean + contrast * (base - mean)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    if band == "RGB":
        img = img[..., None] * tint[None, None, :]
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    c = (side - 1) / 2
    info = StubInfo(band, class_index, seed, (c, c, radius), sigma, contrast)
    return img, info


def radial_edge_contrast(image: np.ndarray, circle: Sequence[float]) -> float:
    """Mean absolute radial intensity derivative inside the iris circle."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    cx, cy, r = circle
    gy, gx = np.gradient(img)
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    dist = np.hypot(dx, dy)
    inside = (dist > 0) & (dist <= r)
    radial = (gx[inside] * dx[inside] + gy[inside] * dy[inside]) / dist[inside]
    return float(np.mean(np.abs(radial)))


def write_stub_inventory(
    root: str | Path,
    per_class: int,
    bands: Iterable[str] = BANDS,
    seed: int = 0,
    side: int = 224,
    classes: Iterable[int] = range(1, N_CLASSES + 1),
) -> SyntheticInventory:
    """Render a stub inventory on disk (images + sidecar) and load it back."""
    root = Path(root)
    rows = []
    for band in bands:
        for c in classes:
            for j in range(per_class):
                sid = f"syn_{band.lower()}_c{c:02d}_{j:04d}"
                img_seed = int(np.random.default_rng([seed, BANDS.index(band), c, j]).integers(2**31))
                img, _ = stub_generate(band, c, img_seed, side=side)
                rel = f"{band.lower()}/c{c:02d}/{sid}.png"
                save_png(root / rel, img)
                rows.append({"synthetic_id": sid, "band": band, "pmi_class": c, "image_path": rel})
    root.mkdir(parents=True, exist_ok=True)
    with (root / SIDECAR_NAME).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SIDECAR_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    LOGGER.info("wrote %d stub images to %s", len(rows), root)
    return load_inventory(root)


def write_stub_corpus(
    root: str | Path,
    class_counts: Mapping[int, int],
    n_subjects: int,
    dataset_id: str = "stub",
    bands: Iterable[str] = ("NIR",),
    seed: int = 0,
    side: int = 256,
    prefix: str | None = None,
) -> list:
    """Render a "real" stub corpus: images on disk plus manifest records.

    Samples are dealt round-robin over ``n_subjects`` subjects. Each subject
    contributes its own iris texture; every sample gets fresh noise, a PMI
    label drawn uniformly inside its class, and an iris-circle annotation.
    When both bands are requested, each sample yields a same-session
    NIR/RGB pair with identical PMI.
    """
    from .balance import sample_pmi_within_class
    from .manifest import IrisCircle, SampleRecord

    root = Path(root)
    prefix = prefix or dataset_id
    bands = tuple(bands)
    rng = np.random.default_rng(seed)
    records = []
    k = 0
    for c in sorted(class_counts):
        for _ in range(class_counts[c]):
            subject = k % n_subjects
            eye = "L" if (k // n_subjects) % 2 == 0 else "R"
            session = f"s{k // n_subjects:03d}"
            pmi = sample_pmi_within_class(c, rng)
            img_seed = int(rng.integers(2**31))
            for band in bands:
                sid = f"{prefix}_{k:05d}_{band.lower()}"
                img, info = stub_generate(band, c, img_seed, side=side)
                rel = f"images/{sid}.png"
                save_png(root / rel, img)
                cx, cy, r = info.circle
                records.append(
                    SampleRecord(
                        sample_id=sid,
                        dataset_id=dataset_id,
                        subject_id=f"{prefix}_subj{subject:03d}",
                        eye=eye,
                        session_id=session,
                        band=band,
                        pmi_hours=pmi,
                        image_path=rel,
                        iris_circle=IrisCircle(cx, cy, r),
                    )
                )
            k += 1
    return records
