"""Dataset data model: manifest parsing, validation and NIR/RGB pairing."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ManifestError
from .evaluate import BoxStats, box_stats

LOGGER = logging.getLogger(__name__)

BANDS = ("NIR", "RGB")
EYES = ("L", "R")

REQUIRED_COLUMNS = (
    "sample_id",
    "dataset_id",
    "subject_id",
    "eye",
    "session_id",
    "band",
    "pmi_hours",
    "image_path",
)
OPTIONAL_COLUMNS = ("iris_cx", "iris_cy", "iris_r", "is_synthetic")
COLUMNS = REQUIRED_COLUMNS + OPTIONAL_COLUMNS

DEFAULT_PMI_TOLERANCE = 1.0


@dataclass(frozen=True)
class IrisCircle:
    cx: float
    cy: float
    r: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cx, self.cy, self.r)


@dataclass(frozen=True)
class SampleRecord:
    """One iris image and its metadata.

    ``extra`` carries columns the pipeline does not interpret (gender, age,
    death reason, ...) so they survive a load/write round trip.
    """

    sample_id: str
    dataset_id: str
    subject_id: str
    eye: str
    session_id: str
    band: str
    pmi_hours: float
    image_path: str
    iris_circle: IrisCircle | None = None
    is_synthetic: bool = False
    extra: Mapping[str, str] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        problems = record_problems(self)
        if problems:
            raise ManifestError(f"sample {self.sample_id!r}: " + "; ".join(problems))

    @property
    def unit_id(self) -> str:
        return self.sample_id

    @property
    def subject_key(self) -> str:
        # subject ids are only unique within a collection site
        return f"{self.dataset_id}/{self.subject_id}"


def record_problems(rec: SampleRecord) -> list[str]:
    problems = []
    if not rec.sample_id:
        problems.append("sample_id is empty")
    if rec.eye not in EYES:
        problems.append(f"eye must be one of {EYES}, got {rec.eye!r}")
    if rec.band not in BANDS:
        problems.append(f"band must be one of {BANDS}, got {rec.band!r}")
    if not math.isfinite(rec.pmi_hours) or rec.pmi_hours < 0:
        problems.append(f"pmi_hours must be a finite value >= 0, got {rec.pmi_hours}")
    if rec.iris_circle is not None and not rec.iris_circle.r > 0:
        problems.append(f"iris_r must be > 0, got {rec.iris_circle.r}")
    return problems


@dataclass(frozen=True)
class MultispectralPair:
    nir: SampleRecord
    rgb: SampleRecord
    pmi_hours: float

    def __post_init__(self) -> None:
        if self.nir.band != "NIR" or self.rgb.band != "RGB":
            raise ManifestError("pair members must be one NIR and one RGB record")
        for attr in ("dataset_id", "subject_id", "eye", "session_id"):
            if getattr(self.nir, attr) != getattr(self.rgb, attr):
                raise ManifestError(
                    f"pair {self.unit_id}: members differ in {attr}"
                )
        if self.pmi_hours != self.nir.pmi_hours:
            raise ManifestError(f"pair {self.unit_id}: PMI must come from the NIR member")

    @property
    def unit_id(self) -> str:
        return f"{self.nir.sample_id}+{self.rgb.sample_id}"

    @property
    def subject_key(self) -> str:
        return self.nir.subject_key

    @property
    def dataset_id(self) -> str:
        return self.nir.dataset_id


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    source_path: Path | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ManifestError("manifest is empty")
        seen: set[str] = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def root(self) -> Path:
        return self.source_path.parent if self.source_path else Path(".")

    def image_file(self, rec: SampleRecord) -> Path:
        path = Path(rec.image_path)
        return path if path.is_absolute() else self.root / path

    def by_band(self, band: str) -> list[SampleRecord]:
        return [r for r in self.records if r.band == band]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}

    @property
    def dataset_ids(self) -> list[str]:
        return sorted({r.dataset_id for r in self.records})


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_row(row: Mapping[str, Any], where: str) -> SampleRecord:
    def text(col: str) -> str:
        value = row.get(col)
        return "" if value is None else str(value).strip()

    for col in REQUIRED_COLUMNS:
        if col not in row:
            raise ManifestError(f"{where}: missing column {col!r}")
        if text(col) == "":
            raise ManifestError(f"{where}, column {col!r}: value is empty")

    try:
        pmi = float(text("pmi_hours"))
    except ValueError:
        raise ManifestError(
            f"{where}, column 'pmi_hours': not a number: {text('pmi_hours')!r}"
        ) from None
    if not math.isfinite(pmi):
        raise ManifestError(f"{where}, column 'pmi_hours': must be finite")
    if pmi < 0:
        raise ManifestError(f"{where}, column 'pmi_hours': must be >= 0, got {pmi}")

    circle_raw = [text(c) for c in ("iris_cx", "iris_cy", "iris_r")]
    circle = None
    if any(circle_raw):
        if not all(circle_raw):
            raise ManifestError(
                f"{where}, columns iris_cx/iris_cy/iris_r: give all three or none"
            )
        try:
            cx, cy, r = (float(v) for v in circle_raw)
        except ValueError:
            raise ManifestError(f"{where}, columns iris_cx/iris_cy/iris_r: not numeric") from None
        if not r > 0:
            raise ManifestError(f"{where}, column 'iris_r': must be > 0, got {r}")
        circle = IrisCircle(cx, cy, r)

    synth_raw = text("is_synthetic") or "0"
    if synth_raw not in ("0", "1"):
        raise ManifestError(f"{where}, column 'is_synthetic': expected 0 or 1, got {synth_raw!r}")

    eye = text("eye")
    if eye not in EYES:
        raise ManifestError(f"{where}, column 'eye': expected L or R, got {eye!r}")
    band = text("band")
    if band not in BANDS:
        raise ManifestError(f"{where}, column 'band': expected NIR or RGB, got {band!r}")

    extra = {k: ("" if v is None else str(v)) for k, v in row.items() if k not in COLUMNS}
    return SampleRecord(
        sample_id=text("sample_id"),
        dataset_id=text("dataset_id"),
        subject_id=text("subject_id"),
        eye=eye,
        session_id=text("session_id"),
        band=band,
        pmi_hours=pmi,
        image_path=text("image_path"),
        iris_circle=circle,
        is_synthetic=synth_raw == "1",
        extra=extra,
    )


def _read_rows(path: Path) -> list[tuple[str, Mapping[str, Any]]]:
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, list) or not all(isinstance(d, dict) for d in data):
            raise ManifestError(f"{path}: expected a JSON array of objects")
        return [(f"{path.name} item {i}", d) for i, d in enumerate(data)]

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: missing header row")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: header lacks required columns {missing}")
        rows = []
        for row in reader:
            if None in row:
                raise ManifestError(f"{path} row {reader.line_num}: more fields than header columns")
            rows.append((f"{path.name} row {reader.line_num}", row))
        return rows


def load_manifest(path: str | Path, check_images: bool = False) -> Manifest:
    """Load a CSV (or ``.json``) manifest, preserving row order.

    With ``check_images`` every image must exist and annotated circle centres
    must fall inside the image bounds (only image headers are read).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    records: list[SampleRecord] = []
    seen: dict[str, str] = {}
    for where, row in _read_rows(path):
        rec = _parse_row(row, where)
        if rec.sample_id in seen:
            raise ManifestError(
                f"{where}, column 'sample_id': duplicate {rec.sample_id!r} (first seen at {seen[rec.sample_id]})"
            )
        seen[rec.sample_id] = where
        records.append(rec)
    if not records:
        raise ManifestError(f"{path}: no records")

    manifest = Manifest(tuple(records), path)
    if check_images:
        check_image_bounds(manifest)
    return manifest


def check_image_bounds(manifest: Manifest) -> None:
    from PIL import Image

    for rec in manifest.records:
        image_file = manifest.image_file(rec)
        if not image_file.is_file():
            raise ManifestError(f"sample {rec.sample_id!r}: image not found: {image_file}")
        if rec.iris_circle is None:
            continue
        with Image.open(image_file) as im:
            width, height = im.size
        c = rec.iris_circle
        if not (0 <= c.cx < width and 0 <= c.cy < height):
            raise ManifestError(
                f"sample {rec.sample_id!r}: iris centre ({c.cx}, {c.cy}) outside {width}x{height} image"
            )


def _record_row(rec: SampleRecord) -> dict[str, str]:
    c = rec.iris_circle
    row = {
        "sample_id": rec.sample_id,
        "dataset_id": rec.dataset_id,
        "subject_id": rec.subject_id,
        "eye": rec.eye,
        "session_id": rec.session_id,
        "band": rec.band,
        "pmi_hours": repr(float(rec.pmi_hours)),
        "image_path": rec.image_path,
        "iris_cx": "" if c is None else repr(float(c.cx)),
        "iris_cy": "" if c is None else repr(float(c.cy)),
        "iris_r": "" if c is None else repr(float(c.r)),
        "is_synthetic": "1" if rec.is_synthetic else "0",
    }
    row.update(rec.extra)
    return row


def write_manifest(records: Manifest | Iterable[SampleRecord], path: str | Path) -> Path:
    path = Path(path)
    rows = [_record_row(r) for r in records]
    extra_cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in COLUMNS and key not in extra_cols:
                extra_cols.append(key)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
        return path
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(COLUMNS) + extra_cols, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------


@dataclass
class PairingResult:
    pairs: list[MultispectralPair]
    unpaired: list[tuple[SampleRecord, str]]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def pair_multispectral(
    manifest: Manifest | Sequence[SampleRecord],
    pmi_tolerance: float = DEFAULT_PMI_TOLERANCE,
) -> PairingResult:
    """Match NIR and RGB captures of the same eye in the same session.

    Within each (dataset, subject, eye, session) group candidate pairs are
    taken greedily by smallest PMI gap, ties broken by sample ids.
    """
    if pmi_tolerance < 0:
        raise ValueError("pmi_tolerance must be >= 0")

    groups: dict[tuple, dict[str, list[SampleRecord]]] = defaultdict(lambda: {"NIR": [], "RGB": []})
    order: list[tuple] = []
    for rec in manifest:
        key = (rec.dataset_id, rec.subject_id, rec.eye, rec.session_id)
        if key not in groups:
            order.append(key)
        groups[key][rec.band].append(rec)

    pairs: list[MultispectralPair] = []
    unpaired: list[tuple[SampleRecord, str]] = []
    for key in order:
        nirs, rgbs = groups[key]["NIR"], groups[key]["RGB"]
        candidates = sorted(
            (abs(n.pmi_hours - r.pmi_hours), n.sample_id, r.sample_id, n, r)
            for n in nirs
            for r in rgbs
            if abs(n.pmi_hours - r.pmi_hours) <= pmi_tolerance
        )
        used: set[str] = set()
        for _, _, _, n, r in candidates:
            if n.sample_id in used or r.sample_id in used:
                continue
            used.update((n.sample_id, r.sample_id))
            pairs.append(MultispectralPair(nir=n, rgb=r, pmi_hours=n.pmi_hours))
        for rec in nirs + rgbs:
            if rec.sample_id in used:
                continue
            other = rgbs if rec.band == "NIR" else nirs
            if not other:
                reason = f"no {'RGB' if rec.band == 'NIR' else 'NIR'} capture in the same session"
            elif all(o.sample_id in used for o in other):
                reason = "all counterpart captures already paired"
            else:
                reason = f"no counterpart within {pmi_tolerance} h"
            unpaired.append((rec, reason))

    if unpaired:
        LOGGER.info("pairing left %d records unpaired", len(unpaired))
    return PairingResult(pairs, unpaired)


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------


@dataclass
class DatasetSummary:
    groups: dict[tuple[str, str], BoxStats]

    @property
    def dataset_ids(self) -> list[str]:
        return sorted({d for d, _ in self.groups})

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {f"{d}/{b}": s.to_dict() for (d, b), s in sorted(self.groups.items())}


def summarize(manifest: Manifest | Sequence[SampleRecord]) -> DatasetSummary:
    values: dict[tuple[str, str], list[float]] = defaultdict(list)
    for rec in manifest:
        values[(rec.dataset_id, rec.band)].append(rec.pmi_hours)
    return DatasetSummary({key: box_stats(v) for key, v in sorted(values.items())})
