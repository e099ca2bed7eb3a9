"""Train/test split plans for the three evaluation scenarios.

S1 deals samples into k folds, S2 deals whole subjects into k folds, S3
trains on one collection site and tests on another. Splits operate on
"units": single records for narrow-band runs, NIR/RGB pairs for
multispectral runs, so both members of a pair always travel together.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FingerprintMismatch, SplitError
from .manifest import Manifest, MultispectralPair, SampleRecord

S1 = "S1_sample_disjoint"
S2 = "S2_subject_disjoint"
S3 = "S3_cross_dataset"
SCENARIOS = (S1, S2, S3)

_ALIASES = {"S1": S1, "S2": S2, "S3": S3}

Unit = SampleRecord | MultispectralPair


def normalize_scenario(name: str) -> str:
    name = _ALIASES.get(name.upper(), name) if name else name
    if name not in SCENARIOS:
        raise SplitError(f"unknown scenario {name!r}; expected one of S1, S2, S3")
    return name


def as_units(source: Manifest | Iterable[Unit]) -> list[Unit]:
    units = list(source.records if isinstance(source, Manifest) else source)
    ids = [u.unit_id for u in units]
    if len(set(ids)) != len(ids):
        raise SplitError("unit ids are not unique")
    return units


def fingerprint(items: Iterable) -> str:
    """sha256 over the sorted ``id|pmi`` list of units (or ``(id, pmi)`` tuples)."""
    lines = []
    for item in items:
        if isinstance(item, tuple):
            uid, pmi = item
        else:
            uid = getattr(item, "unit_id", None) or item.item_id
            pmi = item.pmi_hours
        lines.append(f"{uid}|{float(pmi)!r}")
    lines.sort()
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(sorted(self.train)))
        object.__setattr__(self, "test", tuple(sorted(self.test)))


@dataclass(frozen=True)
class SplitPlan:
    scenario: str
    folds: tuple[Fold, ...]
    seed: int | None
    manifest_fingerprint: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        data = {
            "scenario": self.scenario,
            "seed": self.seed,
            "fingerprint": self.manifest_fingerprint,
            "folds": [{"train": list(f.train), "test": list(f.test)} for f in self.folds],
        }
        if self.meta:
            data["meta"] = dict(sorted(self.meta.items()))
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        return cls(
            scenario=normalize_scenario(data["scenario"]),
            folds=tuple(Fold(tuple(f["train"]), tuple(f["test"])) for f in data["folds"]),
            seed=data.get("seed"),
            manifest_fingerprint=data["fingerprint"],
            meta=dict(data.get("meta", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def make_sample_disjoint_folds(source: Manifest | Iterable[Unit], k: int = 10, seed: int = 0) -> SplitPlan:
    units = as_units(source)
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if k > len(units):
        raise SplitError(f"k={k} exceeds the number of samples ({len(units)})")

    ids = np.array([u.unit_id for u in units], dtype=object)
    perm = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(ids[perm], k)
    all_ids = set(ids.tolist())
    folds = tuple(Fold(tuple(all_ids - set(c.tolist())), tuple(c.tolist())) for c in chunks)
    return SplitPlan(S1, folds, seed, fingerprint(units))


def make_subject_disjoint_folds(source: Manifest | Iterable[Unit], k: int = 10, seed: int = 0) -> SplitPlan:
    """Deal shuffled subjects largest-first into the currently smallest fold."""
    units = as_units(source)
    by_subject: dict[str, list[str]] = defaultdict(list)
    for u in units:
        by_subject[u.subject_key].append(u.unit_id)
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if k > len(by_subject):
        raise SplitError(f"k={k} exceeds the number of subjects ({len(by_subject)})")

    subjects = sorted(by_subject)
    perm = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in perm]
    # stable sort keeps the shuffled order among equal-sized subjects
    ordered = sorted(shuffled, key=lambda s: -len(by_subject[s]))

    fold_ids: list[list[str]] = [[] for _ in range(k)]
    for subject in ordered:
        target = min(range(k), key=lambda i: (len(fold_ids[i]), i))
        fold_ids[target].extend(by_subject[subject])

    all_ids = {u.unit_id for u in units}
    folds = tuple(Fold(tuple(all_ids - set(t)), tuple(t)) for t in fold_ids)
    return SplitPlan(S2, folds, seed, fingerprint(units))


def make_cross_dataset_split(
    source: Manifest | Iterable[Unit],
    train_dataset_id: str,
    test_dataset_id: str,
) -> SplitPlan:
    units = as_units(source)
    present = {u.dataset_id for u in units}
    for ds in (train_dataset_id, test_dataset_id):
        if ds not in present:
            raise SplitError(f"unknown dataset_id {ds!r}; present: {sorted(present)}")
    if train_dataset_id == test_dataset_id:
        raise SplitError("train and test dataset_id must differ")
    train = tuple(u.unit_id for u in units if u.dataset_id == train_dataset_id)
    test = tuple(u.unit_id for u in units if u.dataset_id == test_dataset_id)
    return SplitPlan(
        S3,
        (Fold(train, test),),
        None,
        fingerprint(units),
        meta={"train_dataset": train_dataset_id, "test_dataset": test_dataset_id},
    )


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    counterexamples: tuple[str, ...] = ()


@dataclass
class AuditReport:
    scenario: str
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


def _check(name: str, bad: Iterable[str]) -> Check:
    bad = tuple(sorted(set(bad)))
    return Check(name, not bad, bad[:20])


def verify_split(plan: SplitPlan, source: Manifest | Iterable[Unit]) -> AuditReport:
    """Check every invariant of the plan's scenario; S2 also gets the S1 checks."""
    units = as_units(source)
    if fingerprint(units) != plan.manifest_fingerprint:
        raise FingerprintMismatch("split plan fingerprint does not match the manifest")

    by_id = {u.unit_id: u for u in units}
    all_ids = set(by_id)
    checks: list[Check] = []

    checks.append(_check("known_ids", (i for f in plan.folds for i in f.train + f.test if i not in by_id)))
    checks.append(_check("fold_disjoint", (i for f in plan.folds for i in set(f.train) & set(f.test))))

    if plan.scenario in (S1, S2):
        counts: dict[str, int] = defaultdict(int)
        for f in plan.folds:
            for i in f.test:
                counts[i] += 1
        missing = all_ids - set(counts)
        repeated = {i for i, n in counts.items() if n > 1}
        checks.append(_check("test_partition", missing | repeated))
        checks.append(
            _check(
                "train_complement",
                (i for f in plan.folds for i in all_ids ^ (set(f.train) | set(f.test))),
            )
        )

    if plan.scenario in (S2, S3):
        leaked = []
        for f in plan.folds:
            train_subjects = {by_id[i].subject_key for i in f.train if i in by_id}
            test_subjects = {by_id[i].subject_key for i in f.test if i in by_id}
            leaked.extend(train_subjects & test_subjects)
        checks.append(_check("subject_disjoint", leaked))

    if plan.scenario == S3:
        checks.append(Check("single_fold", plan.k == 1, () if plan.k == 1 else (f"{plan.k} folds",)))
        shared = []
        for f in plan.folds:
            train_ds = {by_id[i].dataset_id for i in f.train if i in by_id}
            test_ds = {by_id[i].dataset_id for i in f.test if i in by_id}
            shared.extend(train_ds & test_ds)
        checks.append(_check("dataset_disjoint", shared))
        train_ds, test_ds = plan.meta.get("train_dataset"), plan.meta.get("test_dataset")
        if train_ds and test_ds and plan.folds:
            f = plan.folds[0]
            expected_train = {i for i, u in by_id.items() if u.dataset_id == train_ds}
            expected_test = {i for i, u in by_id.items() if u.dataset_id == test_ds}
            checks.append(
                _check("dataset_complete", (expected_train ^ set(f.train)) | (expected_test ^ set(f.test)))
            )

    return AuditReport(plan.scenario, checks)


def select(units: Sequence[Unit], ids: Iterable[str]) -> list[Unit]:
    by_id = {u.unit_id: u for u in units}
    return [by_id[i] for i in ids]
