"""Differential evolution (rand/1/bin) and anchor-configuration search."""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from detkit.anchors import DEFAULT_OCTAVES, AnchorConfig, all_shapes, best_shape_ious, _gt_shapes

STAGNATION_WINDOW = 10


@dataclass(frozen=True)
class DEParams:
    bounds: tuple[tuple[float, float], ...]
    population_size: int | None = None
    mutation_factor: float = 0.5
    crossover_rate: float = 0.9
    max_generations: int = 200
    tolerance: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        if self.population_size is None:
            object.__setattr__(self, "population_size", 10 * len(self.bounds))
        if self.population_size < 4:
            raise ValueError(f"population_size must be >= 4 for rand/1 mutation, got {self.population_size}")
        if not 0 < self.mutation_factor <= 2:
            raise ValueError(f"mutation_factor must lie in (0, 2], got {self.mutation_factor}")
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError(f"crossover_rate must lie in [0, 1], got {self.crossover_rate}")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError(f"each bound needs lo < hi, got ({lo}, {hi})")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def to_dict(self) -> dict:
        return {
            "bounds": [list(b) for b in self.bounds],
            "population_size": self.population_size,
            "mutation_factor": self.mutation_factor,
            "crossover_rate": self.crossover_rate,
            "max_generations": self.max_generations,
            "tolerance": self.tolerance,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class DEResult:
    best_vector: np.ndarray = field(compare=False)
    best_objective: float
    history: tuple[float, ...]
    evaluations: int
    generations: int

    def __eq__(self, other):
        if not isinstance(other, DEResult):
            return NotImplemented
        return (
            np.array_equal(self.best_vector, other.best_vector)
            and self.best_objective == other.best_objective
            and self.history == other.history
            and self.evaluations == other.evaluations
        )


def de_optimize(
    objective: Callable[[np.ndarray], float],
    params: DEParams,
    dim: int | None = None,
    threads: int = 1,
) -> DEResult:
    """Maximize ``objective`` inside box bounds with DE/rand/1/bin.

    Trial vectors of a generation are all built first, evaluated (optionally
    on a thread pool), then selected greedily: a member is replaced only when
    its trial scores strictly higher. The search stops after
    ``max_generations`` or once the generation best has improved by less than
    ``tolerance`` for 10 generations in a row.
    """
    if dim is not None and dim != params.dim:
        raise ValueError(f"objective dimension {dim} does not match {params.dim} bounds")
    rng = np.random.default_rng(params.seed)
    n, d = params.population_size, params.dim
    lo = np.array([b[0] for b in params.bounds])
    hi = np.array([b[1] for b in params.bounds])

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    mapper = pool.map if pool else map

    def evaluate(vectors: np.ndarray) -> np.ndarray:
        return np.array([float(v) for v in mapper(objective, list(vectors))])

    try:
        pop = lo + rng.random((n, d)) * (hi - lo)
        fitness = evaluate(pop)
        evaluations = n
        history = [float(fitness.max())]
        stagnant = 0
        generation = 0
        others = np.arange(n - 1)
        while generation < params.max_generations:
            trials = np.empty_like(pop)
            for i in range(n):
                a, b, c = rng.choice(others, 3, replace=False)
                # skip index i so that a, b, c are distinct from it
                a, b, c = (k + (k >= i) for k in (a, b, c))
                mutant = pop[a] + params.mutation_factor * (pop[b] - pop[c])
                cross = rng.random(d) < params.crossover_rate
                cross[rng.integers(d)] = True
                trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)
            trial_fitness = evaluate(trials)
            evaluations += n
            better = trial_fitness > fitness
            pop[better] = trials[better]
            fitness[better] = trial_fitness[better]
            generation += 1
            best = float(fitness.max())
            stagnant = stagnant + 1 if best - history[-1] < params.tolerance else 0
            history.append(best)
            if stagnant >= STAGNATION_WINDOW:
                break
    finally:
        if pool:
            pool.shutdown()

    k = int(np.argmax(fitness))
    return DEResult(
        best_vector=pop[k].copy(),
        best_objective=float(fitness[k]),
        history=tuple(history),
        evaluations=evaluations,
        generations=generation,
    )


# Anchor parameter vector: log base size per level, then log of the two
# super-unit ratios. Five ratios decode as {1/r2, 1/r1, 1, r1, r2}.

SIZE_BOUNDS = (8.0, 512.0)
RATIO_BOUNDS = (1.0, 4.0)


def size_bounds_for_stride(stride: float) -> tuple[float, float]:
    """Per-level base-size bounds, scaled with stride and capped to [8, 512]."""
    lo = max(SIZE_BOUNDS[0], stride / 2)
    hi = min(SIZE_BOUNDS[1], stride * 8)
    return lo, hi


def anchor_bounds(base_cfg: AnchorConfig, free_ratios: int = 2) -> tuple[tuple[float, float], ...]:
    bounds = [tuple(math.log(v) for v in size_bounds_for_stride(lv.stride)) for lv in base_cfg.levels]
    if free_ratios == 2:
        bounds += [(math.log(RATIO_BOUNDS[0]), math.log(RATIO_BOUNDS[1]))] * 2
    else:
        bounds += [(-math.log(RATIO_BOUNDS[1]), math.log(RATIO_BOUNDS[1]))] * free_ratios
    return tuple(bounds)


def decode(vector: Sequence[float], base_cfg: AnchorConfig, symmetric: bool = True) -> AnchorConfig:
    """Turn a parameter vector into a config with the base config's strides and octaves.

    In symmetric mode the two ratio parameters are sorted, so the decoded ratio
    list is always ascending.
    """
    vector = np.asarray(vector, dtype=float)
    n_levels = len(base_cfg.levels)
    sizes = np.exp(vector[:n_levels])
    tail = vector[n_levels:]
    if symmetric:
        if len(tail) != 2:
            raise ValueError(f"symmetric decode needs 2 ratio parameters, got {len(tail)}")
        r1, r2 = np.exp(np.sort(tail))
        ratios = (1 / r2, 1 / r1, 1.0, r1, r2)
    else:
        ratios = tuple(sorted(np.exp(tail)))
    return base_cfg.with_sizes(sizes.tolist()).with_ratios([float(r) for r in ratios])


def encode(cfg: AnchorConfig, symmetric: bool = True) -> np.ndarray:
    sizes = [math.log(lv.base_size) for lv in cfg.levels]
    if symmetric:
        sup = sorted(r for r in cfg.ratios if r > 1)
        if len(cfg.ratios) != 5 or len(sup) != 2:
            raise ValueError(f"symmetric encode needs 5 ratios with two above 1, got {cfg.ratios}")
        tail = [math.log(r) for r in sup]
    else:
        tail = [math.log(r) for r in cfg.ratios]
    return np.array(sizes + tail)


class CoverageObjective:
    """Mean best center-aligned IoU of a decoded vector against a fixed corpus.

    GT shapes are precomputed once. Every evaluated vector is checked against
    the search bounds.
    """

    def __init__(self, gt, base_cfg: AnchorConfig, bounds=None, symmetric: bool = True):
        if len(gt) == 0:
            raise ValueError("coverage needs a non-empty ground-truth corpus")
        self.shapes = _gt_shapes(gt)
        self.base_cfg = base_cfg
        self.symmetric = symmetric
        self.bounds = np.asarray(bounds) if bounds is not None else None

    def __call__(self, vector: np.ndarray) -> float:
        if self.bounds is not None:
            if np.any(vector < self.bounds[:, 0]) or np.any(vector > self.bounds[:, 1]):
                raise AssertionError(f"vector {vector} escaped the search bounds")
        cfg = decode(vector, self.base_cfg, self.symmetric)
        return float(best_shape_ious(all_shapes(cfg), self.shapes).mean())


def optimize_anchors(
    gt,
    base_cfg: AnchorConfig,
    params: DEParams | None = None,
    symmetric: bool = True,
    threads: int = 1,
    **overrides,
) -> tuple[AnchorConfig, DEResult]:
    """Search base sizes and ratios that maximize mean best IoU over ``gt``.

    Strides come from ``base_cfg``; octave scales are fixed at 2^0, 2^1/3, 2^2/3.
    When ``params`` is omitted, defaults are built from ``overrides``.
    """
    base_cfg = AnchorConfig(base_cfg.levels, DEFAULT_OCTAVES, base_cfg.ratios)
    free = 2 if symmetric else 5
    if params is None:
        params = DEParams(bounds=anchor_bounds(base_cfg, free), **overrides)
    expected = len(base_cfg.levels) + free
    if params.dim != expected:
        raise ValueError(f"DE bounds have {params.dim} dimensions, anchor vector needs {expected}")
    objective = CoverageObjective(gt, base_cfg, params.bounds, symmetric)
    result = de_optimize(objective, params, threads=threads)
    return decode(result.best_vector, base_cfg, symmetric), result


def grid_search(objective: Callable[[np.ndarray], float], axes: Sequence[Sequence[float]]) -> tuple[np.ndarray, float]:
    """Exhaustive maximization over the Cartesian product of ``axes``."""
    best_v, best_f = None, -math.inf
    for point in itertools.product(*axes):
        v = np.array(point, dtype=float)
        f = objective(v)
        if f > best_f:
            best_v, best_f = v, f
    return best_v, best_f


def load_de_params(path, default_bounds) -> DEParams:
    """Read DE settings from JSON; missing bounds fall back to ``default_bounds``."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    known = {"bounds", "population_size", "mutation_factor", "crossover_rate", "max_generations", "tolerance", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown DE keys {sorted(unknown)}")
    data.setdefault("bounds", default_bounds)
    return DEParams(**data)
