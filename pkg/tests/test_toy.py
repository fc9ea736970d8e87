from __future__ import annotations

import math

import numpy as np
import pytest

from rebalance_forge.errors import RebalanceForgeError
from rebalance_forge.evaluation import plan_folds
from rebalance_forge.manifest import Manifest, compute_label_stats
from rebalance_forge.rebalance import InjectionConfig, plan_from_stats
from rebalance_forge.toy import (
    OPTIMIZED_HP,
    FeatureRecord,
    GaussianSynthesizer,
    Hyperparameters,
    ToyDatasetConfig,
    cross_validate,
    fit_synthesizer,
    generate_toy_dataset,
    inject_synthetic,
    load_features,
    pipeline_objective,
    sample_synthetic,
    train_classifier,
    write_features,
)

IMBALANCED = {"A": 900, "B": 90, "C": 45}


def manifest_of(records):
    return Manifest.from_records(r.as_manifest_record() for r in records)


def split(records, val_every=5):
    return [r for i, r in enumerate(records) if i % val_every], records[::val_every]


def test_dataset_counts_and_determinism():
    cfg = ToyDatasetConfig(counts={"A": 400, "B": 50}, feature_dim=3, seed=7)
    a, b = generate_toy_dataset(cfg), generate_toy_dataset(cfg)
    assert len(a) == 450
    assert sum(r.label == "A" for r in a) == 8 * sum(r.label == "B" for r in a)
    assert all(r.source == "real" for r in a)
    assert [r.id for r in a] == [r.id for r in b]
    assert np.array_equal([r.features for r in a], [r.features for r in b])


@pytest.mark.parametrize("counts", [{"A": 100}, {"A": 100, "B": 9}])
def test_dataset_config_validation(counts):
    with pytest.raises(ValueError):
        ToyDatasetConfig(counts=counts)


def test_zero_separation_gives_majority_accuracy():
    data = generate_toy_dataset(ToyDatasetConfig(counts={"A": 800, "B": 200}, separation=0.0, seed=3))
    train, val = split(data)
    result = train_classifier(train, val, Hyperparameters(1e-3, 0.0, 0.0), epochs=30)
    acc = np.mean([p == r.label for p, r in zip(result.model.predict(np.array([r.features for r in val])), val)])
    assert acc == pytest.approx(0.8, abs=0.05)


def test_fit_constant_features():
    recs = [FeatureRecord(f"x{i}", "A", "real", np.array([2.5, -1.0])) for i in range(4)]
    synth = fit_synthesizer(recs, "A", floor=1e-6)
    assert synth.mean.tolist() == [2.5, -1.0]
    assert synth.variance.tolist() == [1e-6, 1e-6]


def test_fit_two_points_midpoint():
    recs = [FeatureRecord("a", "A", "real", np.array([0.0, 4.0])), FeatureRecord("b", "A", "real", np.array([2.0, 8.0]))]
    assert fit_synthesizer(recs, "A").mean.tolist() == [1.0, 6.0]


def test_fit_needs_two_real_records():
    recs = [FeatureRecord("a", "A", "real", np.zeros(2)), FeatureRecord("b", "A", "synthetic", np.ones(2))]
    with pytest.raises(RebalanceForgeError):
        fit_synthesizer(recs, "A")


def test_fit_mean_standard_error():
    rng = np.random.default_rng(0)
    mu, sigma, n = np.array([1.0, -3.0, 0.5]), np.array([2.0, 0.5, 1.0]), 5000
    X = mu + sigma * rng.normal(size=(n, 3))
    synth = fit_synthesizer([FeatureRecord(str(i), "A", "real", x) for i, x in enumerate(X)], "A")
    assert np.all(np.abs(synth.mean - mu) < 3 * sigma / math.sqrt(n))


def test_sample_synthetic():
    synth = GaussianSynthesizer("A", np.array([1.0, 2.0]), np.array([4.0, 0.25]))
    assert sample_synthetic(synth, 0, seed=1) == []
    draws = sample_synthetic(synth, 10_000, seed=1)
    assert all(r.source == "synthetic" and r.label == "A" for r in draws)
    X = np.array([r.features for r in draws])
    assert np.all(np.abs(X.mean(axis=0) - synth.mean) < 3 * np.sqrt(synth.variance) / 100)
    again = sample_synthetic(synth, 10_000, seed=1)
    assert np.array_equal(X, [r.features for r in again])


def test_sampling_fulfills_plan():
    data = generate_toy_dataset(ToyDatasetConfig(counts=IMBALANCED, seed=1))
    plan = plan_from_stats(compute_label_stats(manifest_of(data)), InjectionConfig(0.2))
    drawn = {label: len(sample_synthetic(fit_synthesizer(data, label), n, seed=0)) for label, n in plan.per_label.items()}
    assert drawn == plan.per_label


def test_zero_learning_rate_keeps_untrained_loss():
    data = generate_toy_dataset(ToyDatasetConfig(counts={"A": 60, "B": 40, "C": 20}, seed=2))
    train, val = split(data)
    result = train_classifier(train, val, Hyperparameters(0.0, 0.3, 0.0))
    # zero weights predict uniformly
    assert result.val_loss == pytest.approx(math.log(3), abs=1e-15)


def test_separable_blobs():
    data = generate_toy_dataset(ToyDatasetConfig(counts={"A": 200, "B": 200}, feature_dim=2, separation=4.0, seed=0))
    train, val = split(data)
    result = train_classifier(train, val, Hyperparameters(1e-2, 0.0, 0.0), epochs=200)
    preds = result.model.predict(np.array([r.features for r in val]))
    assert np.mean([p == r.label for p, r in zip(preds, val)]) > 0.95


def test_heavy_dropout_hurts():
    data = generate_toy_dataset(ToyDatasetConfig(seed=4))
    train, val = split(data)
    plain = train_classifier(train, val, Hyperparameters(1e-3, 0.0, 0.0), seed=4)
    noisy = train_classifier(train, val, Hyperparameters(1e-3, 0.99, 0.0), seed=4)
    assert noisy.val_loss >= plain.val_loss


def test_divergence_returns_worst_fitness(caplog):
    data = generate_toy_dataset(ToyDatasetConfig(seed=0))
    train, val = split(data)
    result = train_classifier(train, val, Hyperparameters(1e308, 0.0, 0.0), epochs=3)
    assert result.val_loss == math.inf and result.diverged
    assert "diverged" in caplog.text


def test_missing_label_in_train():
    data = generate_toy_dataset(ToyDatasetConfig(counts={"A": 20, "B": 20}))
    with pytest.raises(RebalanceForgeError):
        train_classifier([r for r in data if r.label == "A"], [], OPTIMIZED_HP, labels=("A", "B"))


@pytest.fixture(scope="module")
def tuning_setup():
    data = generate_toy_dataset(ToyDatasetConfig(counts=IMBALANCED, seed=5))
    folds = plan_folds(manifest_of(data), 10, 0.15, seed=5)
    return data, folds


def test_objective_zero_siir_is_real_only(tuning_setup):
    data, folds = tuning_setup
    fold = (folds.folds[0].train, folds.folds[0].val)
    hp = Hyperparameters(1e-3, 0.1, 0.0)
    by_id = {r.id: r for r in data}
    direct = train_classifier([by_id[i] for i in fold[0]], [by_id[i] for i in fold[1]], hp, labels=("A", "B", "C"))
    assert pipeline_objective(data, fold, hp) == direct.val_loss


def test_objective_deterministic_and_finite_at_default(tuning_setup):
    data, folds = tuning_setup
    fold = (folds.folds[1].train, folds.folds[1].val)
    first = pipeline_objective(data, fold, OPTIMIZED_HP, seed=3)
    assert math.isfinite(first)
    assert pipeline_objective(data, fold, OPTIMIZED_HP, seed=3) == first


def test_injection_touches_train_and_val_only(tuning_setup):
    data, folds = tuning_setup
    by_id = {r.id: r for r in data}
    fold = folds.folds[2]
    train, val, counts = inject_synthetic([by_id[i] for i in fold.train], [by_id[i] for i in fold.val], 0.2, seed=0)
    syn = [r for r in (*train, *val) if r.source == "synthetic"]
    assert len(syn) == sum(counts.values()) > 0
    assert counts["A"] == 0
    assert not {r.id for r in syn} & set(fold.test)
    # synthetic split follows the real val share
    real_share = len(fold.val) / (len(fold.train) + len(fold.val))
    assert sum(r.source == "synthetic" for r in val) == pytest.approx(real_share * len(syn), abs=1)


def test_cross_validate_rejects_synthetic_test(tuning_setup):
    data, folds = tuning_setup
    fake = FeatureRecord(folds.folds[0].test[0], "A", "synthetic", np.zeros(8))
    tampered = [fake if r.id == fake.id else r for r in data]
    with pytest.raises(RebalanceForgeError, match="synthetic record in test"):
        cross_validate(tampered, folds, OPTIMIZED_HP)


def test_weighted_injection_helps_minorities():
    with_inj, without = [], []
    for seed in range(5):
        data = generate_toy_dataset(ToyDatasetConfig(counts=IMBALANCED, seed=seed))
        folds = plan_folds(manifest_of(data), 10, 0.15, seed)
        with_inj.append(cross_validate(data, folds, Hyperparameters(1e-4, 0.17, 0.2), seed=seed)[0].mean["f1"])
        without.append(cross_validate(data, folds, Hyperparameters(1e-4, 0.17, 0.0), seed=seed)[0].mean["f1"])
    assert np.median(with_inj) >= np.median(without)


def test_feature_csv_roundtrip(tmp_path):
    data = generate_toy_dataset(ToyDatasetConfig(counts={"A": 12, "B": 10}, feature_dim=3))
    path = tmp_path / "f.csv"
    write_features(data, path)
    back = load_features(path)
    assert [(r.id, r.label, r.source) for r in back] == [(r.id, r.label, r.source) for r in data]
    assert np.array_equal([r.features for r in back], [r.features for r in data])
    assert path.read_text().splitlines()[0] == "id,label,source,f0,f1,f2"


def test_feature_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("id,label,source,f0\na,A,real,1.0\nb,A,real,nan\n")
    with pytest.raises(RebalanceForgeError, match="row 3"):
        load_features(path)
