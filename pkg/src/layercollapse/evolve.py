"""Evolutionary search over merge-plan genomes.

Two entry points share the same integer-adapted variation operators:

* :func:`run_ga` searches for the best plan at one exact compression target,
  repairing every genome to the target removed-layer count and penalizing
  the rare repair failures;
* :func:`run_nsga2` runs NSGA-II over the two maximized objectives
  (fitness, compression ratio) and returns the deduplicated first front.

Determinism is a hard requirement. All randomness flows through generators
seeded as ``SeedSequence((seed, generation, index))``, each consumed in a
fixed documented order, so runs are reproducible for any worker count: the
worker pool only parallelizes fitness computation, never decisions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collapse import (
    ResolvedPlan,
    canonical_key,
    decode_genome,
    genome_bounds,
    random_genome,
)
from .errors import InfeasibleRunError, InvalidTargetError
from .fitness import (
    PENALTY_SCORE,
    CalibrationSet,
    FitnessCache,
    FitnessEvaluator,
    FitnessKind,
)
from .model import TransformerModel

logger = logging.getLogger(__name__)


@dataclass
class Individual:
    """One candidate: genome, its decoded plan, and populated objectives.

    ``objectives`` is ``(fitness,)`` for single-objective search and
    ``(fitness, ratio)`` for multi-objective search; every axis is
    maximize-is-better.
    """

    genome: list[int]
    plan: ResolvedPlan
    objectives: tuple[float, ...] = ()
    feasible: bool = True

    @property
    def fitness(self) -> float:
        return self.objectives[0]

    @property
    def key(self) -> str:
        return canonical_key(self.plan)


@dataclass
class GAConfig:
    """Knobs for the single-objective search."""

    target_ratio: float
    population: int = 100
    max_evaluations: int = 10000
    crossover_prob: float = 0.9
    crossover_eta: float = 20.0
    mutation_prob: float | None = None  # defaults to 1 / genome length
    mutation_eta: float = 20.0
    repair_trials: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.population < 4 or self.population % 2 != 0:
            raise ValueError("population must be an even number >= 4")
        if self.max_evaluations < self.population:
            raise ValueError("max_evaluations must cover at least one generation")
        if not (0.0 <= self.crossover_prob <= 1.0):
            raise ValueError("crossover_prob must be in [0, 1]")
        if self.mutation_prob is not None and not (0.0 <= self.mutation_prob <= 1.0):
            raise ValueError("mutation_prob must be in [0, 1]")
        if self.crossover_eta <= 0.0 or self.mutation_eta <= 0.0:
            raise ValueError("distribution indices must be positive")
        if self.repair_trials < 0:
            raise ValueError("repair_trials must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not (0.0 < self.target_ratio < 1.0):
            raise ValueError("target_ratio must be in (0, 1)")


@dataclass
class MOConfig:
    """Knobs for the multi-objective search."""

    population: int = 200
    max_evaluations: int = 30000
    crossover_prob: float = 0.9
    crossover_eta: float = 20.0
    mutation_prob: float | None = None
    mutation_eta: float = 20.0
    seed: int = 0

    def validate(self) -> None:
        if self.population < 4 or self.population % 2 != 0:
            raise ValueError("population must be an even number >= 4")
        if self.max_evaluations < self.population:
            raise ValueError("max_evaluations must cover at least one generation")
        if not (0.0 <= self.crossover_prob <= 1.0):
            raise ValueError("crossover_prob must be in [0, 1]")
        if self.mutation_prob is not None and not (0.0 <= self.mutation_prob <= 1.0):
            raise ValueError("mutation_prob must be in [0, 1]")
        if self.crossover_eta <= 0.0 or self.mutation_eta <= 0.0:
            raise ValueError("distribution indices must be positive")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class ParetoEntry:
    """One member of the returned trade-off front."""

    ratio: float
    fitness: float
    plan: ResolvedPlan
    genome: tuple[int, ...]


def _rng_for(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, generation, index)))


# consecutive generations allowed to produce zero scorable offspring before
# the single-objective loop gives up
_MAX_STALLED_GENERATIONS = 50


def _round_int(value: float) -> int:
    # np.rint rounds halves to even, matching the documented operator contract
    return int(np.rint(value))


def sbx_integer(
    parent_a: Sequence[int],
    parent_b: Sequence[int],
    bounds: Sequence[tuple[int, int]],
    prob: float,
    eta: float,
    rng: np.random.Generator,
) -> tuple[list[int], list[int]]:
    """Simulated binary crossover adapted to integers.

    Draw order: one gate uniform; if it exceeds ``prob`` both parents are
    returned unchanged (as copies). Otherwise one uniform ``u`` per variable:

        beta = (2u)^(1/(eta+1))            if u <= 0.5
             = (1 / (2(1-u)))^(1/(eta+1))  otherwise

        child1 = 0.5 * ((1 + beta) * a + (1 - beta) * b)
        child2 = 0.5 * ((1 - beta) * a + (1 + beta) * b)

    Children are rounded half-to-even and clamped to the variable bounds.
    """
    if len(parent_a) != len(parent_b) or len(parent_a) != len(bounds):
        raise ValueError("parents and bounds must have equal length")
    if rng.random() > prob:
        return list(parent_a), list(parent_b)
    child_a: list[int] = []
    child_b: list[int] = []
    exponent = 1.0 / (eta + 1.0)
    for a, b, (low, high) in zip(parent_a, parent_b, bounds):
        u = rng.random()
        if u <= 0.5:
            beta = (2.0 * u) ** exponent
        else:
            beta = (1.0 / (2.0 * (1.0 - u))) ** exponent
        c1 = 0.5 * ((1.0 + beta) * a + (1.0 - beta) * b)
        c2 = 0.5 * ((1.0 - beta) * a + (1.0 + beta) * b)
        child_a.append(min(max(_round_int(c1), low), high))
        child_b.append(min(max(_round_int(c2), low), high))
    return child_a, child_b


def polynomial_mutation_integer(
    genome: Sequence[int],
    bounds: Sequence[tuple[int, int]],
    prob: float,
    eta: float,
    rng: np.random.Generator,
) -> list[int]:
    """Polynomial mutation adapted to integers.

    Draw order: one gate uniform per variable; for gated variables one more
    uniform ``u``:

        delta = (2u)^(1/(eta+1)) - 1        if u < 0.5
              = 1 - (2(1-u))^(1/(eta+1))    otherwise

    The variable moves by ``delta * (high - low)``, rounded half-to-even and
    clamped to its bounds.
    """
    if len(genome) != len(bounds):
        raise ValueError("genome and bounds must have equal length")
    out: list[int] = []
    exponent = 1.0 / (eta + 1.0)
    for value, (low, high) in zip(genome, bounds):
        if rng.random() < prob:
            u = rng.random()
            if u < 0.5:
                delta = (2.0 * u) ** exponent - 1.0
            else:
                delta = 1.0 - (2.0 * (1.0 - u)) ** exponent
            value = min(max(_round_int(value + delta * (high - low)), low), high)
        out.append(int(value))
    return out


def _active_indices(genome: list[int], n_layers: int) -> list[int]:
    return [i for i in range(n_layers) if genome[3 * i + 2] == 1]


def repair(
    genome: Sequence[int],
    n_layers: int,
    target_removed: int,
    trials: int,
    rng: np.random.Generator,
) -> list[int] | None:
    """Nudge a genome until it removes exactly ``target_removed`` layers.

    A genome already on target is returned unchanged with zero edits. Each
    trial applies one uniformly chosen applicable edit: when removing too much
    it deactivates an operation or shrinks an end; when removing too little it
    extends an end, activates a dormant operation, or writes a fresh random
    operation into an inactive slot. Returns ``None`` when the target is not
    hit within ``trials`` edits.
    """
    if not (1 <= target_removed <= n_layers - 1):
        raise InvalidTargetError(
            f"target of {target_removed} removed layers is outside 1..{n_layers - 1}"
        )
    current = list(genome)
    removed = decode_genome(current, n_layers).removed_count
    if removed == target_removed:
        return current
    for _ in range(trials):
        active = _active_indices(current, n_layers)
        inactive = [i for i in range(n_layers) if i not in active]
        edits: list[tuple[str, list[int]]] = []
        if removed > target_removed:
            if active:
                edits.append(("deactivate", active))
            shrinkable = [i for i in active if current[3 * i + 1] > current[3 * i]]
            if shrinkable:
                edits.append(("shrink", shrinkable))
        else:
            extendable = [i for i in active if current[3 * i + 1] < n_layers - 1]
            if extendable:
                edits.append(("extend", extendable))
            dormant = [i for i in inactive if current[3 * i + 1] > current[3 * i]]
            if dormant:
                edits.append(("activate", dormant))
            if inactive:
                edits.append(("write", inactive))
            if not edits:
                # every slot active with a maxed end; overwrite one outright
                edits.append(("rewrite", list(range(n_layers))))
        name, candidates = edits[int(rng.integers(len(edits)))]
        slot = candidates[int(rng.integers(len(candidates)))]
        if name == "deactivate":
            current[3 * slot + 2] = 0
        elif name == "shrink":
            current[3 * slot + 1] -= 1
        elif name == "extend":
            current[3 * slot + 1] += 1
        elif name == "activate":
            current[3 * slot + 2] = 1
        else:  # write / rewrite
            base = int(rng.integers(0, n_layers - 1))
            end = int(rng.integers(base + 1, n_layers))
            current[3 * slot : 3 * slot + 3] = [base, end, 1]
        removed = decode_genome(current, n_layers).removed_count
        if removed == target_removed:
            return current
    return None


def _better_single(a: Individual, b: Individual) -> Individual:
    if a.fitness != b.fitness:
        return a if a.fitness > b.fitness else b
    if a.feasible != b.feasible:
        return a if a.feasible else b
    if a.key != b.key:
        return a if a.key < b.key else b
    return a


def _history_record(
    generation: int,
    evaluations_used: int,
    best_fitness: float,
    mean_fitness: float,
    run_hits: int,
    run_misses: int,
    started: float,
) -> dict:
    return {
        "generation": generation,
        "evaluations_used": evaluations_used,
        "best_fitness": best_fitness,
        "mean_fitness": mean_fitness,
        "cache_hits": run_hits,
        "cache_misses": run_misses,
        "elapsed_seconds": time.perf_counter() - started,
    }


def _mean_fitness(population: list[Individual]) -> float:
    return float(np.mean([ind.fitness for ind in population]))


def run_ga(
    model: TransformerModel,
    calibration: CalibrationSet,
    kind: FitnessKind,
    config: GAConfig,
    cache: FitnessCache | None = None,
    workers: int = 1,
) -> tuple[Individual, list[dict]]:
    """Single-objective search for the best plan at an exact ratio target.

    The target removed-layer count is ``round(target_ratio * n_layers)``
    (ties to even) and must land in ``1..n_layers - 1``. Selection is binary
    tournament on fitness, replacement is generational, and the best feasible
    individual ever seen is returned, so the reported best is monotone over
    generations. The evaluation budget counts scored individuals (cache hits
    and misses alike); infeasible repairs receive the penalty score without
    spending budget. Raises when the whole run produces no feasible plan.
    """
    config.validate()
    n_layers = model.config.n_layers
    target_removed = _round_int(config.target_ratio * n_layers)
    if not (1 <= target_removed <= n_layers - 2):
        raise InvalidTargetError(
            f"target_ratio {config.target_ratio} maps to {target_removed} removed "
            f"layers, outside 1..{n_layers - 2} (compressed models keep at least "
            f"2 layers)"
        )
    bounds = genome_bounds(n_layers)
    mutation_prob = (
        config.mutation_prob if config.mutation_prob is not None else 1.0 / (3 * n_layers)
    )
    evaluator = FitnessEvaluator(model, calibration, cache=cache, workers=workers)
    started = time.perf_counter()
    base_hits, base_misses = evaluator.cache.hits, evaluator.cache.misses

    def run_counts() -> tuple[int, int]:
        return evaluator.cache.hits - base_hits, evaluator.cache.misses - base_misses

    def build(genome: list[int], rng: np.random.Generator) -> Individual:
        repaired = repair(genome, n_layers, target_removed, config.repair_trials, rng)
        if repaired is None:
            return Individual(
                genome=genome,
                plan=decode_genome(genome, n_layers),
                objectives=(PENALTY_SCORE,),
                feasible=False,
            )
        return Individual(genome=repaired, plan=decode_genome(repaired, n_layers))

    def score(population: list[Individual]) -> int:
        pending = [ind for ind in population if ind.feasible]
        scores = evaluator.evaluate_batch([ind.plan for ind in pending], kind)
        for ind, value in zip(pending, scores):
            ind.objectives = (value,)
        return len(pending)

    population: list[Individual] = []
    for i in range(config.population):
        rng = _rng_for(config.seed, 0, i)
        population.append(build(random_genome(n_layers, rng), rng))
    evaluations_used = score(population)

    best: Individual | None = None
    for ind in population:
        if ind.feasible and (best is None or ind.fitness > best.fitness):
            best = ind

    history: list[dict] = []
    hits, misses = run_counts()
    history.append(
        _history_record(
            0,
            evaluations_used,
            best.fitness if best is not None else PENALTY_SCORE,
            _mean_fitness(population),
            hits,
            misses,
            started,
        )
    )

    generation = 0
    stalled = 0
    while evaluations_used < config.max_evaluations:
        generation += 1
        offspring: list[Individual] = []
        for j in range(config.population // 2):
            rng = _rng_for(config.seed, generation, j)
            picks = [int(rng.integers(config.population)) for _ in range(4)]
            parent_a = _better_single(population[picks[0]], population[picks[1]])
            parent_b = _better_single(population[picks[2]], population[picks[3]])
            child_a, child_b = sbx_integer(
                parent_a.genome,
                parent_b.genome,
                bounds,
                config.crossover_prob,
                config.crossover_eta,
                rng,
            )
            for child in (child_a, child_b):
                mutated = polynomial_mutation_integer(
                    child, bounds, mutation_prob, config.mutation_eta, rng
                )
                offspring.append(build(mutated, rng))
        scored = score(offspring)
        evaluations_used += scored
        population = offspring
        # budget counts scored individuals only, so a pathological config
        # (e.g. repair_trials=0) could breed all-infeasible generations
        # forever; bail out after a long run of them
        stalled = stalled + 1 if scored == 0 else 0
        if stalled >= _MAX_STALLED_GENERATIONS:
            break
        for ind in population:
            if ind.feasible and (best is None or ind.fitness > best.fitness):
                best = ind
        hits, misses = run_counts()
        history.append(
            _history_record(
                generation,
                evaluations_used,
                best.fitness if best is not None else PENALTY_SCORE,
                _mean_fitness(population),
                hits,
                misses,
                started,
            )
        )
        logger.info(
            "generation %d: best %.6f, %d/%d evaluations, %d cache hits",
            generation,
            history[-1]["best_fitness"],
            evaluations_used,
            config.max_evaluations,
            hits,
        )

    if best is None:
        raise InfeasibleRunError(
            f"no genome could be repaired to {target_removed} removed layers"
        )
    return best, history


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """Pareto dominance with every objective maximized."""
    if len(a) != len(b):
        raise ValueError("objective count mismatch")
    at_least = all(x >= y for x, y in zip(a, b))
    strictly = any(x > y for x, y in zip(a, b))
    return at_least and strictly


def non_dominated_sort(population: Sequence[Individual]) -> list[list[int]]:
    """Fast non-dominated sort; returns fronts as index lists, best first."""
    n = len(population)
    if n == 0:
        return []
    width = len(population[0].objectives)
    for ind in population:
        if len(ind.objectives) != width:
            raise ValueError("objective count mismatch within population")
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    domination_count = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(population[i].objectives, population[j].objectives):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(population[j].objectives, population[i].objectives):
                dominated_by[j].append(i)
                domination_count[i] += 1
    fronts: list[list[int]] = [[i for i in range(n) if domination_count[i] == 0]]
    while True:
        nxt: list[int] = []
        for i in fronts[-1]:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        if not nxt:
            break
        fronts.append(sorted(nxt))
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    """Crowding distances for one front.

    Fronts of one or two members are all-infinite. Per objective the extreme
    members get infinity and interior members accumulate the normalized gap
    between their neighbors; an objective with zero spread contributes
    nothing.
    """
    n = len(front)
    if n == 0:
        return []
    if n <= 2:
        return [float("inf")] * n
    width = len(front[0].objectives)
    distance = [0.0] * n
    for k in range(width):
        order = sorted(range(n), key=lambda i: front[i].objectives[k])
        low = front[order[0]].objectives[k]
        high = front[order[-1]].objectives[k]
        if high == low:
            continue
        distance[order[0]] = float("inf")
        distance[order[-1]] = float("inf")
        span = high - low
        for pos in range(1, n - 1):
            i = order[pos]
            if distance[i] != float("inf"):
                gap = front[order[pos + 1]].objectives[k] - front[order[pos - 1]].objectives[k]
                distance[i] += gap / span
    return distance


def _tournament_multi(
    population: list[Individual],
    first: int,
    second: int,
    rank: dict[int, int],
    crowd: dict[int, float],
) -> int:
    if rank[first] != rank[second]:
        return first if rank[first] < rank[second] else second
    if crowd[first] != crowd[second]:
        return first if crowd[first] > crowd[second] else second
    key_a, key_b = population[first].key, population[second].key
    if key_a != key_b:
        return first if key_a < key_b else second
    return first


def run_nsga2(
    model: TransformerModel,
    calibration: CalibrationSet,
    kind: FitnessKind,
    config: MOConfig,
    cache: FitnessCache | None = None,
    workers: int = 1,
) -> tuple[list[ParetoEntry], list[dict]]:
    """NSGA-II over (fitness, compression ratio), both maximized.

    Returns the first front of the final population, deduplicated by
    canonical plan key and sorted by ascending ratio, plus per-generation
    history. The identity plan is a legal candidate, so fronts normally
    include the uncompressed model as their ratio-zero anchor.
    """
    config.validate()
    n_layers = model.config.n_layers
    bounds = genome_bounds(n_layers)
    mutation_prob = (
        config.mutation_prob if config.mutation_prob is not None else 1.0 / (3 * n_layers)
    )
    evaluator = FitnessEvaluator(model, calibration, cache=cache, workers=workers)
    started = time.perf_counter()
    base_hits, base_misses = evaluator.cache.hits, evaluator.cache.misses

    def score(batch: list[Individual]) -> int:
        values = evaluator.evaluate_batch([ind.plan for ind in batch], kind)
        for ind, value in zip(batch, values):
            ind.objectives = (value, ind.plan.removed_count / n_layers)
        return len(batch)

    def make(genome: list[int]) -> Individual:
        return Individual(genome=genome, plan=decode_genome(genome, n_layers))

    population = [
        make(random_genome(n_layers, _rng_for(config.seed, 0, i)))
        for i in range(config.population)
    ]
    evaluations_used = score(population)

    history: list[dict] = []

    def record(generation: int) -> None:
        hits = evaluator.cache.hits - base_hits
        misses = evaluator.cache.misses - base_misses
        best = max(ind.fitness for ind in population)
        history.append(
            _history_record(
                generation,
                evaluations_used,
                best,
                _mean_fitness(population),
                hits,
                misses,
                started,
            )
        )

    record(0)

    generation = 0
    while evaluations_used < config.max_evaluations:
        generation += 1
        fronts = non_dominated_sort(population)
        rank: dict[int, int] = {}
        crowd: dict[int, float] = {}
        for level, front in enumerate(fronts):
            members = [population[i] for i in front]
            for i, dist in zip(front, crowding_distance(members)):
                rank[i] = level
                crowd[i] = dist

        offspring: list[Individual] = []
        for j in range(config.population // 2):
            rng = _rng_for(config.seed, generation, j)
            picks = [int(rng.integers(config.population)) for _ in range(4)]
            parent_a = population[
                _tournament_multi(population, picks[0], picks[1], rank, crowd)
            ]
            parent_b = population[
                _tournament_multi(population, picks[2], picks[3], rank, crowd)
            ]
            child_a, child_b = sbx_integer(
                parent_a.genome,
                parent_b.genome,
                bounds,
                config.crossover_prob,
                config.crossover_eta,
                rng,
            )
            for child in (child_a, child_b):
                mutated = polynomial_mutation_integer(
                    child, bounds, mutation_prob, config.mutation_eta, rng
                )
                offspring.append(make(mutated))
        evaluations_used += score(offspring)
        logger.info(
            "generation %d: %d/%d evaluations",
            generation,
            evaluations_used,
            config.max_evaluations,
        )

        combined = population + offspring
        combined_fronts = non_dominated_sort(combined)
        survivors: list[Individual] = []
        for front in combined_fronts:
            members = [combined[i] for i in front]
            if len(survivors) + len(members) <= config.population:
                survivors.extend(members)
            else:
                dists = crowding_distance(members)
                slots = config.population - len(survivors)
                ordered = sorted(
                    range(len(members)),
                    key=lambda i: (-dists[i], members[i].key),
                )
                survivors.extend(members[i] for i in ordered[:slots])
            if len(survivors) >= config.population:
                break
        population = survivors
        record(generation)

    final_fronts = non_dominated_sort(population)
    entries: dict[str, ParetoEntry] = {}
    for i in final_fronts[0]:
        ind = population[i]
        # full-collapse plans are unbuildable and carry the penalty score
        if ind.plan.final_layer_count < 2:
            continue
        if ind.key not in entries:
            entries[ind.key] = ParetoEntry(
                ratio=ind.objectives[1],
                fitness=ind.objectives[0],
                plan=ind.plan,
                genome=tuple(ind.genome),
            )
    if not entries:
        raise InfeasibleRunError("final front holds no buildable plan")
    front = sorted(entries.values(), key=lambda e: (e.ratio, canonical_key(e.plan)))
    return front, history
