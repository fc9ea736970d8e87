"""Desk-scale stand-ins for the GPU pipeline.

A seeded imbalanced Gaussian-blob dataset plays the role of the X-ray
corpus, a per-label diagonal Gaussian plays the per-class ProGAN, and a
softmax regression with input dropout plays the CNN classifier. The
validation loss of that classifier is the objective handed to the SMA
optimizer, and everything downstream (injection plan, folds, metrics) is the
real library code.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from rebalance_forge.errors import InjectionError, RebalanceForgeError
from rebalance_forge.evaluation import (
    ConfusionMatrix,
    CrossValSummary,
    FoldPlan,
    aggregate_folds,
    confusion_matrix,
    metrics_from_confusion,
    plan_folds,
)
from rebalance_forge.manifest import LabelStats, Manifest, ManifestRecord
from rebalance_forge.rebalance import InjectionConfig, as_fraction, plan_from_stats, round_half_away
from rebalance_forge.sma import OptimizationResult, SmaConfig, optimize

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
# per-sample loss assigned when training diverges
DIVERGED = math.inf


@dataclass(frozen=True)
class ToyDatasetConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"Normal": 800, "Lung Opacity": 470, "COVID-19": 280, "Viral Pneumonia": 105})
    feature_dim: int = 8
    separation: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.counts) < 2:
            raise ValueError("a toy dataset needs at least two labels")
        if any(n < 10 for n in self.counts.values()):
            raise ValueError("every label needs at least 10 records")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")


@dataclass(eq=False)
class FeatureRecord:
    id: str
    label: str
    source: str
    features: np.ndarray

    def as_manifest_record(self) -> ManifestRecord:
        return ManifestRecord(self.id, self.label, self.source)  # type: ignore[arg-type]


def write_features(records: Iterable[FeatureRecord], path: str | Path) -> None:
    records = list(records)
    dim = len(records[0].features) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "source", *(f"f{j}" for j in range(dim))])
        for r in records:
            writer.writerow([r.id, r.label, r.source, *(repr(float(v)) for v in r.features)])


def load_features(path: str | Path) -> list[FeatureRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "label", "source"]:
        raise RebalanceForgeError(f"{path}: header must start with id,label,source")
    dim = len(rows[0]) - 3
    records = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 3:
            raise RebalanceForgeError(f"{path}: row {n} has {len(row)} fields, expected {dim + 3}")
        if row[2] not in ("real", "synthetic"):
            raise RebalanceForgeError(f"{path}: row {n}: unknown source {row[2]!r}")
        try:
            x = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise RebalanceForgeError(f"{path}: row {n}: {exc}") from None
        if not np.all(np.isfinite(x)):
            raise RebalanceForgeError(f"{path}: row {n}: non-finite feature")
        records.append(FeatureRecord(row[0], row[1], row[2], x))
    return records


def generate_toy_dataset(config: ToyDatasetConfig) -> list[FeatureRecord]:
    """Unit-variance Gaussian blobs whose means sit ``separation`` from the origin
    along random directions. All records are real."""
    rng = np.random.default_rng(config.seed)
    records = []
    for label, n in config.counts.items():
        direction = rng.normal(size=config.feature_dim)
        direction /= np.linalg.norm(direction)
        X = config.separation * direction + rng.normal(size=(n, config.feature_dim))
        records += [FeatureRecord(f"{label}-{i}", label, "real", X[i]) for i in range(n)]
    return records


@dataclass(frozen=True)
class GaussianSynthesizer:
    label: str
    mean: np.ndarray
    variance: np.ndarray


def fit_synthesizer(records: Iterable[FeatureRecord], label: str, floor: float = VARIANCE_FLOOR) -> GaussianSynthesizer:
    X = np.array([r.features for r in records if r.label == label and r.source == "real"])
    if len(X) < 2:
        raise RebalanceForgeError(f"label {label!r}: need at least two real records to fit a synthesizer")
    return GaussianSynthesizer(label, X.mean(axis=0), np.maximum(X.var(axis=0, ddof=1), floor))


def sample_synthetic(synth: GaussianSynthesizer, n: int, seed: int, prefix: str | None = None) -> list[FeatureRecord]:
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    X = synth.mean + np.sqrt(synth.variance) * rng.normal(size=(n, len(synth.mean)))
    prefix = prefix or f"{synth.label}-syn"
    return [FeatureRecord(f"{prefix}-{i}", synth.label, "synthetic", X[i]) for i in range(n)]


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 7.26e-5
    dropout_rate: float = 0.17
    siir: float = 0.20

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0 <= self.siir < 1:
            raise ValueError("siir must lie in [0, 1)")

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> Hyperparameters:
        return cls(float(x[0]), float(x[1]), float(x[2]))


# reference optimum (lr 7.26e-5, dropout 0.17, siir 0.20) and the no-injection baseline built from it
OPTIMIZED_HP = Hyperparameters()
BASELINE_HP = Hyperparameters(siir=0.0)


@dataclass
class SoftmaxModel:
    labels: tuple[str, ...]
    weights: np.ndarray
    bias: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    def logits(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.center) / self.scale) @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> list[str]:
        return [self.labels[i] for i in np.argmax(self.logits(X), axis=1)]

    def loss(self, X: np.ndarray, y: np.ndarray) -> float:
        if len(X) == 0:
            return math.nan
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-log_p[np.arange(len(y)), y].mean())


@dataclass
class TrainResult:
    val_loss: float
    model: SoftmaxModel
    diverged: bool = False


def _stack(records: Sequence[FeatureRecord], labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    index = {label: i for i, label in enumerate(labels)}
    if not records:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.array([r.features for r in records]), np.array([index[r.label] for r in records])


def train_classifier(
    train: Sequence[FeatureRecord],
    val: Sequence[FeatureRecord],
    hp: Hyperparameters,
    epochs: int = 15,
    batch_size: int = 128,
    seed: int = 0,
    labels: Sequence[str] | None = None,
) -> TrainResult:
    """Softmax regression trained by seeded mini-batch gradient descent.

    Inputs are standardized with training statistics and dropped out at
    ``hp.dropout_rate`` (inverted scaling, training only). Gradients are
    summed over the batch, so the learning rate is per sample. Weights start
    at zero, so ``learning_rate == 0`` leaves the uniform predictor.
    """
    labels = tuple(labels) if labels is not None else tuple(dict.fromkeys(r.label for r in train))
    missing = set(labels) - {r.label for r in train}
    if missing:
        raise RebalanceForgeError(f"no training samples for labels {sorted(missing)}")
    X, y = _stack(train, labels)
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    model = SoftmaxModel(labels, np.zeros((X.shape[1], len(labels))), np.zeros(len(labels)), center, scale)
    Z = (X - center) / scale
    onehot = np.eye(len(labels))[y]
    rng = np.random.default_rng(seed)
    keep = 1.0 - hp.dropout_rate
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(len(Z))
            for start in range(0, len(Z), batch_size):
                idx = order[start : start + batch_size]
                xb = Z[idx]
                if hp.dropout_rate > 0:
                    xb = xb * (rng.random(xb.shape) < keep) / keep
                logits = xb @ model.weights + model.bias
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                p /= p.sum(axis=1, keepdims=True)
                err = p - onehot[idx]
                model.weights -= hp.learning_rate * (xb.T @ err)
                model.bias -= hp.learning_rate * err.sum(axis=0)
            if not (np.all(np.isfinite(model.weights)) and np.all(np.isfinite(model.bias))):
                diverged = True
                break
        Xv, yv = _stack(val, labels)
        val_loss = model.loss(Xv, yv) if len(val) else math.nan
    if diverged or (len(val) and not math.isfinite(val_loss)):
        logger.warning("training diverged at learning rate %g; returning worst fitness", hp.learning_rate)
        return TrainResult(DIVERGED, model, diverged=True)
    return TrainResult(val_loss, model)


def inject_synthetic(
    train: Sequence[FeatureRecord],
    val: Sequence[FeatureRecord],
    siir: float,
    seed: int,
    tuning: Mapping[str, float] | None = None,
) -> tuple[list[FeatureRecord], list[FeatureRecord], dict[str, int]]:
    """Add synthetic records to train and val per the weighted injection plan.

    Real label frequencies of train+val set the plan; each label's
    synthesizer is fitted on its real training records only. Synthetic
    records are split between train and val at the real split's ratio.
    """
    real = [r for r in (*train, *val) if r.source == "real"]
    labels = list(dict.fromkeys(r.label for r in real))
    counts = {label: 0 for label in labels}
    for r in real:
        counts[r.label] += 1
    if siir == 0:
        return list(train), list(val), {label: 0 for label in labels}
    try:
        plan = plan_from_stats(LabelStats.from_counts(counts), InjectionConfig(siir, dict(tuning or {})))
    except InjectionError:
        # balanced real data: nothing to inject
        return list(train), list(val), {label: 0 for label in labels}
    ratio = as_fraction(len(val) / (len(train) + len(val))) if (train or val) else as_fraction(0)
    new_train, new_val = list(train), list(val)
    for i, (label, n) in enumerate(plan.per_label.items()):
        if n == 0:
            continue
        synth = fit_synthesizer(train, label)
        batch = sample_synthetic(synth, n, seed=seed * 1009 + i)
        n_val = round_half_away(ratio * n)
        new_val += batch[:n_val]
        new_train += batch[n_val:]
    return new_train, new_val, dict(plan.per_label)


def pipeline_objective(
    dataset: Sequence[FeatureRecord],
    fold: tuple[Sequence[str], Sequence[str]],
    hp: Hyperparameters,
    epochs: int = 15,
    batch_size: int = 128,
    seed: int = 0,
) -> float:
    """Validation loss of the classifier trained on one fold's train split
    after weighted synthetic injection at ``hp.siir``."""
    by_id = {r.id: r for r in dataset}
    train = [by_id[i] for i in fold[0]]
    val = [by_id[i] for i in fold[1]]
    labels = tuple(dict.fromkeys(r.label for r in dataset))
    train, val, _ = inject_synthetic(train, val, hp.siir, seed)
    return train_classifier(train, val, hp, epochs, batch_size, seed, labels).val_loss


def cross_validate(
    dataset: Sequence[FeatureRecord],
    folds: FoldPlan,
    hp: Hyperparameters,
    epochs: int = 15,
    batch_size: int = 128,
    seed: int = 0,
) -> tuple[CrossValSummary, list[ConfusionMatrix]]:
    """Train one classifier per fold and score it on that fold's real test split."""
    by_id = {r.id: r for r in dataset}
    labels = tuple(dict.fromkeys(r.label for r in dataset))
    reports, matrices = [], []
    for f, fold in enumerate(folds.folds):
        test = [by_id[i] for i in fold.test]
        if any(r.source != "real" for r in test):
            raise RebalanceForgeError(f"fold {f}: synthetic record in test split")
        train = [by_id[i] for i in fold.train]
        val = [by_id[i] for i in fold.val]
        train, val, _ = inject_synthetic(train, val, hp.siir, seed + f)
        # injected records are fresh objects, never in by_id or the test list
        result = train_classifier(train, val, hp, epochs, batch_size, seed + f, labels)
        X = np.array([r.features for r in test])
        cm = confusion_matrix([r.label for r in test], result.model.predict(X), labels)
        matrices.append(cm)
        reports.append(metrics_from_confusion(cm))
    return aggregate_folds(reports, matrices), matrices


@dataclass(frozen=True)
class ToyRunConfig:
    dataset: ToyDatasetConfig = field(default_factory=ToyDatasetConfig)
    sma: SmaConfig = field(default_factory=lambda: SmaConfig.hyperparameter_box(population_size=8, epochs=10))
    k: int = 10
    val_ratio: float = 0.15
    seed: int = 0
    epochs: int = 15
    batch_size: int = 128

    def to_json(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "sma": self.sma.to_json(),
            "k": self.k,
            "val_ratio": self.val_ratio,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> ToyRunConfig:
        data = dict(data)
        unknown = set(data) - {"dataset", "sma", "k", "val_ratio", "seed", "epochs", "batch_size"}
        if unknown:
            raise ValueError(f"unknown toy config keys: {sorted(unknown)}")
        dataset = ToyDatasetConfig(**data.pop("dataset", {}))
        sma_data = data.pop("sma", None)
        sma = cls().sma
        if sma_data is not None:
            # partial SMA blocks inherit the hyperparameter box unless they set bounds
            base = {} if {"lower_bounds", "upper_bounds"} & set(sma_data) else sma.to_json()
            sma = SmaConfig.from_json({**base, **sma_data})
        return cls(dataset=dataset, sma=sma, **data)


@dataclass
class ToyRunResult:
    config: ToyRunConfig
    optimization: OptimizationResult
    tuned_hp: Hyperparameters
    tuned: CrossValSummary
    baseline: CrossValSummary
    injection: dict[str, int]

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "optimization": self.optimization.to_json(),
            "tuned_hyperparameters": asdict(self.tuned_hp),
            "baseline_hyperparameters": asdict(BASELINE_HP),
            "fold0_injection": self.injection,
            "tuned": self.tuned.to_json(),
            "baseline": self.baseline.to_json(),
        }


def run_toy_experiment(config: ToyRunConfig) -> ToyRunResult:
    """Generate -> fold -> SMA-tune on fold 0 -> cross-validate tuned and baseline."""
    dataset = generate_toy_dataset(config.dataset)
    manifest = Manifest.from_records(r.as_manifest_record() for r in dataset)
    folds = plan_folds(manifest, config.k, config.val_ratio, config.seed)
    tune_fold = (folds.folds[0].train, folds.folds[0].val)

    def objective(x: np.ndarray) -> float:
        hp = Hyperparameters.from_vector(x)
        return pipeline_objective(dataset, tune_fold, hp, config.epochs, config.batch_size, config.seed)

    opt = optimize(objective, config.sma)
    tuned_hp = Hyperparameters.from_vector(opt.best_position)
    by_id = {r.id: r for r in dataset}
    _, _, injection = inject_synthetic([by_id[i] for i in tune_fold[0]], [by_id[i] for i in tune_fold[1]], tuned_hp.siir, config.seed)
    tuned, _ = cross_validate(dataset, folds, tuned_hp, config.epochs, config.batch_size, config.seed)
    baseline, _ = cross_validate(dataset, folds, BASELINE_HP, config.epochs, config.batch_size, config.seed)
    return ToyRunResult(config, opt, tuned_hp, tuned, baseline, injection)
