"""Slime Mould Algorithm for bounded continuous minimization.

Each epoch sorts the population by fitness, assigns every agent a weight per
dimension from its rank, then moves it by one of three rules: a uniform
restart with probability ``z``, an approach toward the best-so-far position
scaled by the difference of two random agents, or a contraction toward the
origin whose strength anneals to zero over the run.

Dimensions flagged ``log`` are searched in log10 space and exponentiated
before the objective sees them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]

HP_LOWER = (1e-5, 0.05, 0.0)
HP_UPPER = (1e-3, 0.25, 0.5)
HP_NAMES = ("learning_rate", "dropout_rate", "siir")


@dataclass(frozen=True)
class SmaConfig:
    population_size: int = 15
    epochs: int = 250
    lower_bounds: tuple[float, ...] = HP_LOWER
    upper_bounds: tuple[float, ...] = HP_UPPER
    z: float = 0.03
    seed: int = 0
    scales: tuple[str, ...] | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower_bounds", tuple(float(x) for x in self.lower_bounds))
        object.__setattr__(self, "upper_bounds", tuple(float(x) for x in self.upper_bounds))
        if self.scales is None:
            object.__setattr__(self, "scales", ("linear",) * len(self.lower_bounds))
        else:
            object.__setattr__(self, "scales", tuple(self.scales))
        if len(self.lower_bounds) != len(self.upper_bounds) or len(self.scales) != len(self.lower_bounds):
            raise ValueError("bounds and scales must have equal dimension")
        if not self.lower_bounds:
            raise ValueError("at least one dimension is required")
        if any(lo >= hi for lo, hi in zip(self.lower_bounds, self.upper_bounds)):
            raise ValueError("every lower bound must be below its upper bound")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.z <= 1.0:
            raise ValueError("z must lie in [0, 1]")
        for lo, scale in zip(self.lower_bounds, self.scales):
            if scale not in ("linear", "log"):
                raise ValueError(f"unknown scale {scale!r}")
            if scale == "log" and lo <= 0:
                raise ValueError("log-scaled dimensions need positive bounds")

    @classmethod
    def hyperparameter_box(cls, **overrides) -> SmaConfig:
        """Population 15, 250 epochs, learning rate searched in log space."""
        params = dict(scales=("log", "linear", "linear"))
        params.update(overrides)
        return cls(**params)

    @property
    def dim(self) -> int:
        return len(self.lower_bounds)

    def search_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.lower_bounds)
        hi = np.array(self.upper_bounds)
        logs = np.array([s == "log" for s in self.scales])
        lo[logs] = np.log10(lo[logs])
        hi[logs] = np.log10(hi[logs])
        return lo, hi

    def to_natural(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=float)
        logs = np.array([s == "log" for s in self.scales])
        out[..., logs] = 10.0 ** out[..., logs]
        return np.clip(out, self.lower_bounds, self.upper_bounds)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lower_bounds"] = list(self.lower_bounds)
        d["upper_bounds"] = list(self.upper_bounds)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_json(cls, data: dict) -> SmaConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SMA config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Candidate:
    position: np.ndarray
    fitness: float = math.nan


@dataclass
class OptimizationResult:
    best_position: np.ndarray
    best_fitness: float
    history: list[float]
    evaluations: int
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "best_position": [float(x) for x in self.best_position],
            "best_fitness": float(self.best_fitness),
            "history": [float(h) for h in self.history],
            "evaluations": self.evaluations,
            "warnings": list(self.warnings),
        }


def fitness_weights(sorted_fitnesses: Sequence[float], rng: np.random.Generator, dim: int | None = None) -> np.ndarray:
    """Rank-based weights, one row per agent (best first).

    The better half gets ``1 + r*log10(q + 1)``, the worse half
    ``1 - r*log10(q + 1)`` with ``q = (best - f) / (best - worst)`` and a fresh
    uniform ``r`` per entry. Non-finite fitnesses count as the worst value.
    ``r`` is drawn even for a flat population so the random stream does not
    depend on fitness values.
    """
    f = np.asarray(sorted_fitnesses, dtype=float)
    n = len(f)
    if n < 2:
        raise ValueError("need at least two fitness values")
    shape = (n,) if dim is None else (n, dim)
    r = rng.random(shape)
    finite = np.isfinite(f)
    best = f[0] if finite[0] else math.inf
    worst = f[finite].max() if finite.any() else math.inf
    if not math.isfinite(best) or worst == best:
        # flat population: log term vanishes
        return np.ones(shape)
    q = np.where(finite, (best - f) / (best - worst), 1.0)
    term = np.log10(q + 1.0)
    if dim is not None:
        term = term[:, None]
    sign = np.where(np.arange(n) < n / 2, 1.0, -1.0)
    if dim is not None:
        sign = sign[:, None]
    return 1.0 + sign * r * term


def sma_step(
    population: Sequence[Candidate],
    t: int,
    config: SmaConfig,
    rng: np.random.Generator,
    best: Candidate | None = None,
) -> list[Candidate]:
    """Move every agent once; returns unevaluated candidates in sorted order.

    Positions are in search space (log10 for log-scaled dimensions). ``best``
    is the best-so-far agent; it defaults to the fittest member of
    ``population``.

    Random draws, in order: the weight matrix, the restart draws (one per
    agent), then restart positions, vb, vc, r, A and B (each agents x dims).
    Every array is drawn in full whichever branch an agent takes.
    """
    if not 1 <= t <= config.epochs:
        raise ValueError(f"epoch {t} outside 1..{config.epochs}")
    pop = sorted(population, key=lambda c: _rank_key(c.fitness))
    n, dim = len(pop), config.dim
    lb, ub = config.search_bounds()
    X = np.array([c.position for c in pop], dtype=float)
    fits = np.array([c.fitness for c in pop], dtype=float)
    if best is None:
        best = pop[0]
    W = fitness_weights(fits, rng, dim)

    frac = t / config.epochs
    a = math.atanh(1.0 - frac) if frac < 1 else 0.0
    b = 1.0 - frac
    restart = rng.random(n) < config.z
    fresh = lb + rng.random((n, dim)) * (ub - lb)
    vb = rng.uniform(-a, a, (n, dim))
    vc = rng.uniform(-b, b, (n, dim))
    r = rng.random((n, dim))
    A = rng.integers(n, size=(n, dim))
    B = rng.integers(n, size=(n, dim))

    with np.errstate(invalid="ignore"):
        gap = np.abs(fits - best.fitness)
    p = np.where(np.isfinite(gap), np.tanh(np.nan_to_num(gap, posinf=0.0)), 1.0)
    cols = np.arange(dim)
    approach = best.position + vb * (W * X[A, cols] - X[B, cols])
    moved = np.where(r < p[:, None], approach, vc * X)
    new = np.clip(np.where(restart[:, None], fresh, moved), lb, ub)
    return [Candidate(row) for row in new]


def _rank_key(f: float) -> float:
    return f if math.isfinite(f) else math.inf


def _evaluate(objective: Objective, candidates: list[Candidate], config: SmaConfig, pool, warnings: list[str]) -> None:
    points = [config.to_natural(c.position) for c in candidates]
    if pool is None:
        values = [objective(x) for x in points]
    else:
        # map() yields results in submission order, keeping runs deterministic
        values = list(pool.map(objective, points))
    for c, x, v in zip(candidates, points, values):
        v = float(v)
        if not math.isfinite(v):
            msg = f"objective returned {v} at {x.tolist()}; ranked worst"
            logger.warning(msg)
            warnings.append(msg)
            v = math.inf
        c.fitness = v


def optimize(objective: Objective, config: SmaConfig, callback: Callable[[int, float], None] | None = None) -> OptimizationResult:
    """Minimize ``objective`` over the configured box.

    The objective gets natural-space vectors. With ``workers > 1`` evaluations
    within one epoch run on a thread pool, so the objective must be reentrant.
    """
    rng = np.random.default_rng(config.seed)
    lb, ub = config.search_bounds()
    n, dim = config.population_size, config.dim
    warnings: list[str] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        pop = [Candidate(lb + rng.random(dim) * (ub - lb)) for _ in range(n)]
        _evaluate(objective, pop, config, pool, warnings)
        evaluations = n
        best = min(pop, key=lambda c: c.fitness)
        best = Candidate(best.position.copy(), best.fitness)
        history = []
        for t in range(1, config.epochs + 1):
            pop = sma_step(pop, t, config, rng, best)
            _evaluate(objective, pop, config, pool, warnings)
            evaluations += n
            leader = min(pop, key=lambda c: c.fitness)
            if leader.fitness < best.fitness:
                best = Candidate(leader.position.copy(), leader.fitness)
            history.append(best.fitness)
            if callback is not None:
                callback(t, best.fitness)
    finally:
        if pool is not None:
            pool.shutdown()
    return OptimizationResult(
        best_position=config.to_natural(best.position),
        best_fitness=best.fitness,
        history=history,
        evaluations=evaluations,
        warnings=warnings,
    )
