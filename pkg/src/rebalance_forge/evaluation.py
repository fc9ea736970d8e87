"""Stratified k-fold planning, confusion matrices and macro one-vs-rest metrics.

Only real records ever enter a test fold. Synthetic records, when present,
are split between train and validation at the same ratio as the real
remainder in every fold.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from rebalance_forge.errors import FoldPlanError, MetricsError
from rebalance_forge.manifest import Manifest, ManifestRecord
from rebalance_forge.rebalance import InjectionPlan, as_fraction, largest_remainder, round_half_away

METRICS = ("recall", "specificity", "f1", "precision", "accuracy")
PREDICTIONS_HEADER = ("fold", "id", "true_label", "predicted_label")


@dataclass(frozen=True)
class Fold:
    test: tuple[str, ...]
    train: tuple[str, ...]
    val: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    val_ratio: float
    seed: int
    folds: tuple[Fold, ...]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "val_ratio": self.val_ratio,
            "seed": self.seed,
            "folds": [{"test": list(f.test), "train": list(f.train), "val": list(f.val)} for f in self.folds],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> FoldPlan:
        try:
            folds = tuple(Fold(tuple(f["test"]), tuple(f["train"]), tuple(f["val"])) for f in data["folds"])
            return cls(int(data["k"]), float(data["val_ratio"]), int(data["seed"]), folds)
        except (KeyError, TypeError, ValueError) as exc:
            raise FoldPlanError(f"malformed fold plan: {exc}") from exc


def _select_synthetic(manifest: Manifest, plan: InjectionPlan | None) -> list[ManifestRecord]:
    synthetic = [r for r in manifest.records if r.source == "synthetic"]
    if plan is None:
        return synthetic
    by_label: dict[str, list[ManifestRecord]] = defaultdict(list)
    for r in synthetic:
        by_label[r.label].append(r)
    chosen = []
    for label, n in plan.per_label.items():
        available = by_label.get(label, [])
        if len(available) < n:
            raise FoldPlanError(f"label {label!r}: plan asks for {n} synthetic records, manifest has {len(available)}")
        chosen += available[:n]
    keep = {r.id for r in chosen}
    return [r for r in synthetic if r.id in keep]


def plan_folds(
    manifest: Manifest,
    k: int = 10,
    val_ratio: float = 0.15,
    seed: int = 0,
    plan: InjectionPlan | None = None,
) -> FoldPlan:
    """Stratified k-fold assignment of the real records.

    Each label's real records are shuffled and dealt round-robin into the k
    test folds, continuing the deal where the previous label stopped, so both
    per-label and total test sizes differ by at most one across folds. Within
    a fold, the non-test real records plus the synthetic records are split so
    that val / (train + val) rounds to ``val_ratio``; the validation count is
    spread over (source, label) groups by largest remainder.

    With an injection ``plan``, only the first ``per_label[label]`` synthetic
    records of each label (in manifest order) are used.
    """
    if k < 2:
        raise FoldPlanError("k must be >= 2")
    if not 0 < val_ratio < 1:
        raise FoldPlanError("val_ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    # record positions in the manifest, grouped by (source, label)
    real_by_label: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(manifest.records):
        if r.source == "real":
            real_by_label[r.label].append(i)
    if not real_by_label:
        raise FoldPlanError("manifest has no real records")
    for label in manifest.label_set:
        n = len(real_by_label.get(label, []))
        if n < k:
            raise FoldPlanError(f"label {label!r} has {n} real records, fewer than k={k}")
    position = {r.id: i for i, r in enumerate(manifest.records)}
    synthetic_by_label: dict[str, list[int]] = defaultdict(list)
    for r in _select_synthetic(manifest, plan):
        synthetic_by_label[r.label].append(position[r.id])

    groups: list[np.ndarray] = []
    fold_of: list[np.ndarray | None] = []
    cursor = 0
    for label in manifest.label_set:
        idx = np.array(real_by_label[label], dtype=np.int64)
        groups.append(idx[rng.permutation(len(idx))])
        fold_of.append((cursor + np.arange(len(idx))) % k)
        cursor += len(idx)
    for label, idx in synthetic_by_label.items():
        groups.append(np.array(idx, dtype=np.int64))
        fold_of.append(None)

    ids = np.array([r.id for r in manifest.records], dtype=object)
    ratio = as_fraction(val_ratio)
    folds = []
    for f in range(k):
        test, pools = [], []
        for members, assigned in zip(groups, fold_of):
            if assigned is not None:
                in_test = assigned == f
                test.append(members[in_test])
                members = members[~in_test]
            pools.append(members)
        n_val = round_half_away(ratio * sum(len(m) for m in pools))
        val_counts = largest_remainder([ratio * len(m) for m in pools], n_val)
        train, val = [], []
        for members, n in zip(pools, val_counts):
            picked = members[rng.permutation(len(members))]
            val.append(picked[:n])
            train.append(picked[n:])
        folds.append(Fold(*(tuple(ids[np.sort(np.concatenate(part))].tolist()) for part in (test, train, val))))
    return FoldPlan(k=k, val_ratio=val_ratio, seed=seed, folds=tuple(folds))


def check_fold_plan(plan: FoldPlan, manifest: Manifest) -> list[str]:
    """Return every violated fold-plan invariant (empty when the plan is sound)."""
    problems = []
    real = {r.id for r in manifest.records if r.source == "real"}
    synthetic = {r.id for r in manifest.records if r.source == "synthetic"}
    seen: set[str] = set()
    for i, fold in enumerate(plan.folds):
        test = set(fold.test)
        if test & seen:
            problems.append(f"fold {i}: test ids overlap an earlier fold")
        seen |= test
        if test & synthetic:
            problems.append(f"fold {i}: synthetic ids in test split")
        if set(fold.train) & set(fold.val):
            problems.append(f"fold {i}: train and val overlap")
        if (set(fold.train) | set(fold.val)) & test:
            problems.append(f"fold {i}: test ids reused for training")
        n = len(fold.train) + len(fold.val)
        if n and abs(len(fold.val) / n - plan.val_ratio) > 1 / n:
            problems.append(f"fold {i}: val ratio {len(fold.val) / n:.4f} off target")
    if seen != real:
        problems.append("test folds do not cover exactly the real records")
    return problems


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist()}


def confusion_matrix(truths: Sequence[str], predictions: Sequence[str], labels: Sequence[str]) -> ConfusionMatrix:
    """Rows are true labels, columns predicted labels."""
    if len(truths) != len(predictions):
        raise MetricsError(f"{len(truths)} truths but {len(predictions)} predictions")
    index = {label: i for i, label in enumerate(labels)}
    if len(index) != len(labels):
        raise MetricsError("duplicate labels")
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(truths, predictions):
        if t not in index or p not in index:
            raise MetricsError(f"unknown label in pair ({t!r}, {p!r})")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)


@dataclass(frozen=True)
class MetricsReport:
    recall: float
    specificity: float
    f1: float
    precision: float
    accuracy: float
    # (metric, label) pairs whose per-class denominator was zero, scored as 0
    undefined: tuple[tuple[str, str], ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    """Macro-averaged one-vs-rest recall, specificity, precision and F1, plus accuracy."""
    counts = np.asarray(cm.counts, dtype=float)
    total = counts.sum()
    if counts.size == 0 or total <= 0:
        raise MetricsError("confusion matrix is empty")
    per_class: dict[str, list[float]] = {m: [] for m in METRICS[:4]}
    undefined = []
    for i, label in enumerate(cm.labels):
        tp = counts[i, i]
        fn = counts[i].sum() - tp
        fp = counts[:, i].sum() - tp
        tn = total - tp - fn - fp
        rec = _ratio(tp, tp + fn)
        spec = _ratio(tn, tn + fp)
        prec = _ratio(tp, tp + fp)
        if rec is None or prec is None:
            f1 = None
        else:
            f1 = _ratio(2 * prec * rec, prec + rec)
            if f1 is None:
                f1 = 0.0
        for name, value in (("recall", rec), ("specificity", spec), ("precision", prec), ("f1", f1)):
            if value is None:
                undefined.append((name, label))
                value = 0.0
            per_class[name].append(value)
    return MetricsReport(
        recall=float(np.mean(per_class["recall"])),
        specificity=float(np.mean(per_class["specificity"])),
        f1=float(np.mean(per_class["f1"])),
        precision=float(np.mean(per_class["precision"])),
        accuracy=float(np.trace(counts) / total),
        undefined=tuple(undefined),
    )


@dataclass
class CrossValSummary:
    labels: tuple[str, ...]
    mean: dict[str, float]
    std: dict[str, float]
    fold_reports: list[MetricsReport]
    averaged_matrix: np.ndarray
    normalized_matrix: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metrics": {m: {"mean": self.mean[m], "std": self.std[m]} for m in METRICS},
            "labels": list(self.labels),
            "averaged_matrix": self.averaged_matrix.tolist(),
            "normalized_matrix": self.normalized_matrix.tolist(),
            "folds": [r.as_dict() for r in self.fold_reports],
        }

    def format(self, digits: int = 2) -> str:
        """Percentages with population STD, one row per run."""
        cells = [f"{m}: {100 * self.mean[m]:.{digits}f}±{100 * self.std[m]:.{digits}f}" for m in METRICS]
        return "  ".join(cells)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=1, keepdims=True)
    out = np.zeros_like(matrix, dtype=float)
    np.divide(matrix, sums, out=out, where=sums > 0)
    return out


def aggregate_folds(reports: Sequence[MetricsReport], matrices: Sequence[ConfusionMatrix]) -> CrossValSummary:
    """Mean and population standard deviation of each metric across folds."""
    if not reports:
        raise MetricsError("no fold reports to aggregate")
    if not matrices:
        raise MetricsError("no confusion matrices to aggregate")
    labels = matrices[0].labels
    if any(m.labels != labels for m in matrices):
        raise MetricsError("confusion matrices use different label orders")
    table = np.array([[r.as_dict()[m] for m in METRICS] for r in reports])
    averaged = np.mean([np.asarray(m.counts, dtype=float) for m in matrices], axis=0)
    return CrossValSummary(
        labels=labels,
        mean=dict(zip(METRICS, table.mean(axis=0).tolist())),
        std=dict(zip(METRICS, table.std(axis=0, ddof=0).tolist())),
        fold_reports=list(reports),
        averaged_matrix=averaged,
        normalized_matrix=normalize_rows(averaged),
    )


@dataclass(frozen=True)
class PredictionRow:
    fold: int
    id: str
    true_label: str
    predicted_label: str


def load_predictions(path: str | Path) -> list[PredictionRow]:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"predictions file not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ())[:4] != PREDICTIONS_HEADER:
            raise MetricsError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        for n, raw in enumerate(reader, start=2):
            try:
                fold = int(raw["fold"])
            except (TypeError, ValueError):
                raise MetricsError(f"{path}: row {n}: fold must be an integer") from None
            if not raw["true_label"] or not raw["predicted_label"]:
                raise MetricsError(f"{path}: row {n}: missing label")
            rows.append(PredictionRow(fold, raw["id"], raw["true_label"], raw["predicted_label"]))
    return rows


def write_predictions(rows: Iterable[PredictionRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for r in rows:
            writer.writerow((r.fold, r.id, r.true_label, r.predicted_label))


def evaluate_predictions(rows: Sequence[PredictionRow], labels: Sequence[str] | None = None) -> tuple[CrossValSummary, list[ConfusionMatrix]]:
    """Per-fold confusion matrices and their cross-validated summary.

    Labels default to first appearance among true labels, then any labels
    that occur only as predictions.
    """
    if not rows:
        raise MetricsError("no predictions")
    if labels is None:
        seen: dict[str, None] = {}
        for r in rows:
            seen.setdefault(r.true_label, None)
        for r in rows:
            seen.setdefault(r.predicted_label, None)
        labels = list(seen)
    by_fold: dict[int, list[PredictionRow]] = defaultdict(list)
    for r in rows:
        by_fold[r.fold].append(r)
    matrices, reports = [], []
    for fold in sorted(by_fold):
        fold_rows = by_fold[fold]
        cm = confusion_matrix([r.true_label for r in fold_rows], [r.predicted_label for r in fold_rows], labels)
        matrices.append(cm)
        reports.append(metrics_from_confusion(cm))
    return aggregate_folds(reports, matrices), matrices
