"""Dataset manifests (one record per image) and per-label frequency tables."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

from rebalance_forge.errors import EmptyPopulationError, ManifestError

Source = Literal["real", "synthetic"]
SOURCES: tuple[str, ...] = ("real", "synthetic")
MANIFEST_HEADER = ("id", "label", "source")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    label: str
    source: Source = "real"


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...]
    label_set: tuple[str, ...] = field(default=())

    @classmethod
    def from_records(cls, records: Iterable[ManifestRecord]) -> Manifest:
        """Build a manifest, checking id uniqueness and deriving the label order."""
        records = tuple(records)
        seen: set[str] = set()
        labels: dict[str, None] = {}
        for row, rec in enumerate(records, start=1):
            if not rec.id:
                raise ManifestError(f"record {row}: empty id")
            if rec.id in seen:
                raise ManifestError(f"record {row}: duplicate id {rec.id!r}")
            if not rec.label:
                raise ManifestError(f"record {row}: empty label")
            if rec.source not in SOURCES:
                raise ManifestError(f"record {row}: unknown source {rec.source!r}")
            seen.add(rec.id)
            labels.setdefault(rec.label, None)
        return cls(records=records, label_set=tuple(labels))

    def __len__(self) -> int:
        return len(self.records)

    def filter(self, source: str | None) -> list[ManifestRecord]:
        if source is None or source == "all":
            return list(self.records)
        return [r for r in self.records if r.source == source]


@dataclass(frozen=True)
class LabelStats:
    """Per-label frequencies and ratios, iterated in manifest label order."""

    frequencies: dict[str, int]
    total: int

    @property
    def labels(self) -> list[str]:
        return list(self.frequencies)

    @property
    def ratios(self) -> dict[str, float]:
        return {k: v / self.total for k, v in self.frequencies.items()}

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> LabelStats:
        if any(v < 0 for v in counts.values()):
            raise ValueError("label frequencies must be non-negative")
        total = sum(counts.values())
        if total == 0:
            raise EmptyPopulationError("empty population")
        return cls(frequencies=dict(counts), total=total)


def load_manifest(path: str | Path) -> Manifest:
    """Read a manifest CSV with header ``id,label,source``.

    Row numbers in error messages count the header as row 1, so they match
    what a spreadsheet or ``sed -n`` shows.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if header[:3] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        records = []
        seen: set[str] = set()
        for row, raw in enumerate(reader, start=2):
            rid = (raw.get("id") or "").strip()
            label = (raw.get("label") or "").strip()
            source = (raw.get("source") or "").strip()
            if not rid:
                raise ManifestError(f"{path}: row {row}: missing id")
            if rid in seen:
                raise ManifestError(f"{path}: row {row}: duplicate id {rid!r}")
            if not label:
                raise ManifestError(f"{path}: row {row}: missing label")
            if source not in SOURCES:
                raise ManifestError(f"{path}: row {row}: unknown source {source!r} (expected real or synthetic)")
            seen.add(rid)
            records.append(ManifestRecord(rid, label, source))  # type: ignore[arg-type]
    return Manifest.from_records(records)


def write_manifest(manifest: Manifest | Iterable[ManifestRecord], path: str | Path) -> None:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            writer.writerow((rec.id, rec.label, rec.source))


def compute_label_stats(manifest: Manifest, source_filter: str | None = None) -> LabelStats:
    """Count records per label after an optional ``real``/``synthetic`` filter.

    Labels absent from the filtered records still appear (with zero count)
    so downstream tables keep the manifest's label order.
    """
    if source_filter not in (None, "all", *SOURCES):
        raise ValueError(f"unknown source filter {source_filter!r}")
    counts = Counter(r.label for r in manifest.filter(source_filter))
    if not counts:
        raise EmptyPopulationError("empty population")
    return LabelStats.from_counts({label: counts.get(label, 0) for label in manifest.label_set})


def format_stats_table(stats: LabelStats, digits: int = 4) -> str:
    width = max([len("Labels"), len("Total"), *(len(k) for k in stats.labels)])
    lines = [f"{'Labels':<{width}}  {'Frequency':>9}  {'Ratio':>{digits + 2}}"]
    for label, n in stats.frequencies.items():
        lines.append(f"{label:<{width}}  {n:>9}  {n / stats.total:>{digits + 2}.{digits}f}")
    lines.append(f"{'Total':<{width}}  {stats.total:>9}  {1.0:>{digits + 2}.{digits}f}")
    return "\n".join(lines)
