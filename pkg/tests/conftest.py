from __future__ import annotations

import numpy as np
import pytest
import torch

from irispmi.manifest import IrisCircle, SampleRecord

torch.set_num_threads(1)


def make_record(
    sample_id: str,
    pmi: float = 10.0,
    *,
    dataset: str = "warsaw",
    subject: str = "s1",
    eye: str = "L",
    session: str = "1",
    band: str = "NIR",
    path: str | None = None,
    circle: tuple[float, float, float] | None = None,
    synthetic: bool = False,
) -> SampleRecord:
    return SampleRecord(
        sample_id=sample_id,
        dataset_id=dataset,
        subject_id=subject,
        eye=eye,
        session_id=session,
        band=band,
        pmi_hours=float(pmi),
        image_path=path or f"img/{sample_id}.png",
        iris_circle=IrisCircle(*circle) if circle else None,
        is_synthetic=synthetic,
    )


def random_records(
    rng: np.random.Generator,
    n_samples: int,
    n_subjects: int,
    datasets: tuple[str, ...] = ("warsaw",),
) -> list[SampleRecord]:
    """Toy manifest: every subject gets at least one sample, datasets own disjoint subjects."""
    n_subjects = min(n_subjects, n_samples)
    subject_of = list(range(n_subjects)) + list(rng.integers(0, n_subjects, size=n_samples - n_subjects))
    rng.shuffle(subject_of)
    records = []
    for i, s in enumerate(subject_of):
        ds = datasets[s % len(datasets)]
        records.append(
            make_record(
                f"x{i:04d}",
                float(rng.uniform(0, 1700)),
                dataset=ds,
                subject=f"subj{s:03d}",
                eye="L" if rng.random() < 0.5 else "R",
                session=str(int(rng.integers(1, 4))),
            )
        )
    return records


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# -- acceptance verdicts ------------------------------------------------------

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; returns whether it passed."""

    def record(number: int, passed: bool, detail: str, seconds: float, limit: float) -> bool:
        ok = passed and seconds < limit
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail} | {seconds:.1f} s (limit {limit:.0f} s)"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
