"""18-class PMI binning and the two training-set balancing strategies.

Classes are 24 h wide: class 1 is 0-24 h, class 2 is 25-48 h, and so on up
to class 17 (385-408 h); class 18 is everything above, with its synthetic
labels drawn up to a configurable cap (1674 h, the largest PMI in the NIJ
collection). Fractional PMIs between integer labels fall to the upper class,
e.g. 24.5 h is class 2 and 408.5 h is class 18.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import BalanceError
from .manifest import MultispectralPair
from .protocol import fingerprint
from .synth import SyntheticDescriptor

N_CLASSES = 18
CLASS_WIDTH = 24
CLASS_18_THRESHOLD = 409.0
DEFAULT_PMI_CAP = 1674.0

STRATEGIES = ("none", "real_upsample", "synthetic_supplement")


class SyntheticProvider(Protocol):
    def serves(self, band: str, class_index: int) -> bool: ...

    def draw(self, band: str, class_index: int, n: int, seed: int) -> list[SyntheticDescriptor]: ...


def pmi_to_class(pmi_hours: float) -> int:
    if pmi_hours < 0 or math.isnan(pmi_hours):
        raise ValueError(f"pmi_hours must be >= 0, got {pmi_hours}")
    if pmi_hours <= CLASS_WIDTH:
        return 1
    if pmi_hours >= CLASS_18_THRESHOLD:
        return N_CLASSES
    return min(N_CLASSES, math.ceil((pmi_hours - CLASS_WIDTH) / CLASS_WIDTH) + 1)


def class_range(class_index: int, cap: float = DEFAULT_PMI_CAP) -> tuple[float, float]:
    """Inclusive PMI label range of a class; class 18 is closed at ``cap``."""
    if not 1 <= class_index <= N_CLASSES:
        raise ValueError(f"class_index must be in 1..{N_CLASSES}, got {class_index}")
    if class_index == 1:
        return 0.0, float(CLASS_WIDTH)
    if class_index == N_CLASSES:
        if cap <= CLASS_18_THRESHOLD:
            raise ValueError(f"class 18 cap must exceed {CLASS_18_THRESHOLD}, got {cap}")
        return CLASS_18_THRESHOLD, float(cap)
    return float(CLASS_WIDTH * (class_index - 1) + 1), float(CLASS_WIDTH * class_index)


def sample_pmi_within_class(class_index: int, draw: np.random.Generator, cap: float = DEFAULT_PMI_CAP) -> float:
    lo, hi = class_range(class_index, cap)
    return float(draw.uniform(lo, hi))


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    kind: str  # "real_ref" | "synthetic_insert"
    assigned_pmi: float
    sample_id: str | None = None
    synthetic: tuple[SyntheticDescriptor, ...] = ()

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "assigned_pmi": self.assigned_pmi}
        if self.kind == "real_ref":
            d["sample_id"] = self.sample_id
        else:
            d["synthetic"] = [s.to_dict() for s in self.synthetic]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlanEntry":
        return cls(
            kind=d["kind"],
            assigned_pmi=float(d["assigned_pmi"]),
            sample_id=d.get("sample_id"),
            synthetic=tuple(SyntheticDescriptor.from_dict(s) for s in d.get("synthetic", ())),
        )


@dataclass
class BalancingPlan:
    strategy: str
    entries: dict[int, list[PlanEntry]]
    target_count: int
    seed: int
    train_fingerprint: str
    pmi_cap: float = DEFAULT_PMI_CAP
    bands: tuple[str, ...] = field(default_factory=tuple)

    def class_counts(self) -> dict[int, int]:
        return {c: len(self.entries.get(c, [])) for c in range(1, N_CLASSES + 1)}

    def flat(self) -> list[PlanEntry]:
        return [e for c in sorted(self.entries) for e in self.entries[c]]

    def real_ids(self) -> list[str]:
        return [e.sample_id for e in self.flat() if e.kind == "real_ref"]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "target_count": self.target_count,
            "seed": self.seed,
            "train_fingerprint": self.train_fingerprint,
            "pmi_cap": self.pmi_cap,
            "bands": list(self.bands),
            "classes": {str(c): [e.to_dict() for e in self.entries[c]] for c in sorted(self.entries)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "BalancingPlan":
        return cls(
            strategy=d["strategy"],
            entries={int(c): [PlanEntry.from_dict(e) for e in es] for c, es in d["classes"].items()},
            target_count=int(d["target_count"]),
            seed=int(d["seed"]),
            train_fingerprint=d["train_fingerprint"],
            pmi_cap=float(d.get("pmi_cap", DEFAULT_PMI_CAP)),
            bands=tuple(d.get("bands", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> "BalancingPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _by_class(units: Sequence) -> dict[int, list]:
    if not units:
        raise BalanceError("balancing needs at least one training record")
    groups: dict[int, list] = defaultdict(list)
    for u in units:
        groups[pmi_to_class(u.pmi_hours)].append(u)
    return groups


def _real(u) -> PlanEntry:
    return PlanEntry("real_ref", float(u.pmi_hours), sample_id=u.unit_id)


def _bands_of(units: Sequence) -> tuple[str, ...]:
    if all(isinstance(u, MultispectralPair) for u in units):
        return ("NIR", "RGB")
    bands = sorted({u.band for u in units})
    if len(bands) != 1:
        raise BalanceError(f"training records mix bands {bands}; balance each band separately")
    return tuple(bands)


def plan_identity(train_records: Sequence, seed: int = 0) -> BalancingPlan:
    units = list(train_records)
    groups = _by_class(units)
    entries = {c: [_real(u) for u in groups[c]] for c in sorted(groups)}
    target = max(len(v) for v in groups.values())
    return BalancingPlan("none", entries, target, seed, fingerprint(units), bands=_bands_of(units))


def plan_real_upsampling(train_records: Sequence, seed: int = 0) -> BalancingPlan:
    """Top every non-empty class up to the largest class by resampling its own records.

    Originals are kept once each; only the deficit is drawn with replacement.
    """
    units = list(train_records)
    groups = _by_class(units)
    target = max(len(v) for v in groups.values())
    rng = np.random.default_rng(seed)
    entries: dict[int, list[PlanEntry]] = {}
    for c in sorted(groups):
        own = groups[c]
        extra = rng.integers(0, len(own), size=target - len(own))
        entries[c] = [_real(u) for u in own] + [_real(own[i]) for i in extra]
    return BalancingPlan("real_upsample", entries, target, seed, fingerprint(units), bands=_bands_of(units))


def plan_synthetic_supplement(
    train_records: Sequence,
    provider: SyntheticProvider,
    seed: int = 0,
    target_count: int | None = None,
    pmi_cap: float = DEFAULT_PMI_CAP,
) -> BalancingPlan:
    """Top all 18 classes up to ``target_count`` with synthetic images.

    For multispectral training sets each insert carries one NIR and one RGB
    synthetic image from the same class, sharing one assigned PMI.
    """
    units = list(train_records)
    groups = _by_class(units)
    bands = _bands_of(units)
    max_real = max(len(v) for v in groups.values())
    target = max_real if target_count is None else int(target_count)
    if target < max_real:
        raise BalanceError(f"target_count {target} is below the largest real class ({max_real})")

    deficits = {c: target - len(groups.get(c, [])) for c in range(1, N_CLASSES + 1)}
    lacking = [(b, c) for c, n in deficits.items() if n > 0 for b in bands if not provider.serves(b, c)]
    if lacking:
        raise BalanceError(
            "synthetic provider has no inventory for " + ", ".join(f"{b}/class {c}" for b, c in lacking)
        )

    rng = np.random.default_rng(seed)
    entries: dict[int, list[PlanEntry]] = {}
    for c in range(1, N_CLASSES + 1):
        row = [_real(u) for u in groups.get(c, [])]
        n = deficits[c]
        if n > 0:
            draws = [provider.draw(b, c, n, int(rng.integers(2**31))) for b in bands]
            for i in range(n):
                pmi = sample_pmi_within_class(c, rng, pmi_cap)
                row.append(PlanEntry("synthetic_insert", pmi, synthetic=tuple(d[i] for d in draws)))
        entries[c] = row
    return BalancingPlan(
        "synthetic_supplement", entries, target, seed, fingerprint(units), pmi_cap=pmi_cap, bands=bands
    )


def class_histogram(pmis: Iterable[float]) -> dict[int, int]:
    counts = Counter(pmi_to_class(p) for p in pmis)
    return {c: counts.get(c, 0) for c in range(1, N_CLASSES + 1)}
