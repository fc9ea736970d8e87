from __future__ import annotations

import pytest

from rebalance_forge.manifest import LabelStats, Manifest, ManifestRecord

CXR_COUNTS = {"COVID-19": 3616, "Normal": 10192, "Viral Pneumonia": 1345, "Lung Opacity": 6012}


def make_manifest(counts: dict[str, int], synthetic: dict[str, int] | None = None) -> Manifest:
    records = []
    for label, n in counts.items():
        records += [ManifestRecord(f"{label}-{i}", label, "real") for i in range(n)]
    for label, n in (synthetic or {}).items():
        records += [ManifestRecord(f"{label}-syn-{i}", label, "synthetic") for i in range(n)]
    return Manifest.from_records(records)


@pytest.fixture
def cxr_stats() -> LabelStats:
    return LabelStats.from_counts(CXR_COUNTS)


@pytest.fixture(scope="session")
def cxr_manifest() -> Manifest:
    return make_manifest(CXR_COUNTS)


# acceptance lines, repeated after the run so they survive output capture
_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, line: str) -> None:
    _ACCEPTANCE[number] = line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
