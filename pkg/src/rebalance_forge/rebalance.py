"""Weighted synthetic-injection arithmetic.

Labels below the most frequent one get a complementary frequency (the gap to
the reference label), weights proportional to that gap, and a share of the
total synthetic budget implied by the injection ratio (SIIR). All quota
arithmetic runs on exact rationals; floats appear only in reported weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import floor
from typing import Mapping, Sequence

from rebalance_forge.errors import InjectionError
from rebalance_forge.manifest import LabelStats


def as_fraction(x: float | int | Fraction) -> Fraction:
    """Exact rational for a user-facing decimal (0.2 -> 1/5, not the binary float)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


def round_half_away(x: Fraction) -> int:
    if x >= 0:
        return floor(x + Fraction(1, 2))
    return -floor(-x + Fraction(1, 2))


def largest_remainder(quotas: Sequence[Fraction], total: int) -> list[int]:
    """Integerize ``quotas`` so the result sums to ``total``.

    Every entry starts at floor(quota); the leftover units go to the largest
    fractional parts, ties resolved by position. Quotas must be non-negative
    and floor-sum no greater than ``total``.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    if any(q < 0 for q in quotas):
        raise ValueError("quotas must be non-negative")
    counts = [floor(q) for q in quotas]
    leftover = total - sum(counts)
    if leftover < 0:
        raise ValueError(f"floors of quotas already exceed total {total}")
    if leftover > len(quotas):
        raise ValueError(f"quotas sum far below total {total}")
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class InjectionConfig:
    siir: float
    tuning: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.siir < 1:
            raise InjectionError(f"siir={self.siir}: ratio must be below one and non-negative")
        for label, a in self.tuning.items():
            if not a > 0:
                raise InjectionError(f"tuning factor for {label!r} must be positive, got {a}")

    def factor(self, label: str) -> float:
        return self.tuning.get(label, 1.0)


@dataclass(frozen=True)
class CfTable:
    reference_label: str
    cf: dict[str, int]
    total: int


@dataclass(frozen=True)
class WeightTable:
    weights: dict[str, float]
    # exact rationals behind ``weights``; used for apportionment
    exact: dict[str, Fraction]


@dataclass(frozen=True)
class InjectionPlan:
    siir: float
    n_f_total: int
    per_label: dict[str, int]
    weights: dict[str, float] = field(default_factory=dict)
    cf: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "siir": self.siir,
            "n_f_total": self.n_f_total,
            "per_label": dict(self.per_label),
            "weights": dict(self.weights),
            "cf": dict(self.cf),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> InjectionPlan:
        try:
            per_label = {str(k): int(v) for k, v in data["per_label"].items()}
            plan = cls(
                siir=float(data["siir"]),
                n_f_total=int(data["n_f_total"]),
                per_label=per_label,
                weights={str(k): float(v) for k, v in data.get("weights", {}).items()},
                cf={str(k): int(v) for k, v in data.get("cf", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InjectionError(f"malformed injection plan: {exc}") from exc
        if any(v < 0 for v in per_label.values()):
            raise InjectionError("injection plan has negative counts")
        return plan


def complementary_frequencies(stats: LabelStats) -> CfTable:
    if not stats.frequencies:
        raise InjectionError("label statistics are empty")
    # max() keeps the first maximal label, i.e. ties go to label-set order
    reference = max(stats.frequencies, key=lambda k: stats.frequencies[k])
    n_ref = stats.frequencies[reference]
    cf = {label: n_ref - n for label, n in stats.frequencies.items()}
    return CfTable(reference_label=reference, cf=cf, total=sum(cf.values()))


def injection_weights(cf: CfTable, config: InjectionConfig | None = None) -> WeightTable:
    """w_label = cf_label / total_cf * a_label, left unnormalized when a != 1."""
    if cf.total <= 0:
        raise InjectionError("nothing to inject: labels are perfectly balanced")
    exact = {}
    for label, n_cf in cf.cf.items():
        a = as_fraction(config.factor(label)) if config is not None else Fraction(1)
        exact[label] = Fraction(n_cf, cf.total) * a
    return WeightTable(weights={k: float(v) for k, v in exact.items()}, exact=exact)


def total_synthetic_count(siir: float, n_real: int) -> int:
    """Synthetic images needed so they make up ``siir`` of the combined set."""
    if siir >= 1:
        raise InjectionError(f"siir={siir}: ratio must be below one")
    if siir < 0:
        raise InjectionError(f"siir={siir}: ratio must be non-negative")
    if n_real <= 0:
        raise InjectionError("n_real must be positive")
    s = as_fraction(siir)
    return round_half_away(s * n_real / (1 - s))


def build_injection_plan(weights: WeightTable, siir: float, n_real: int, cf: CfTable | None = None) -> InjectionPlan:
    n_f = total_synthetic_count(siir, n_real)
    labels = list(weights.exact)
    quotas = [n_f * weights.exact[k] for k in labels]
    target = round_half_away(sum(quotas, Fraction(0)))
    counts = largest_remainder(quotas, target)
    return InjectionPlan(
        siir=siir,
        n_f_total=n_f,
        per_label=dict(zip(labels, counts)),
        weights=dict(weights.weights),
        cf=dict(cf.cf) if cf is not None else {},
    )


def plan_from_stats(stats: LabelStats, config: InjectionConfig) -> InjectionPlan:
    """Complementary frequencies -> weights -> per-label synthetic counts."""
    cf = complementary_frequencies(stats)
    weights = injection_weights(cf, config)
    return build_injection_plan(weights, config.siir, stats.total, cf=cf)
