"""Single- and multi-objective search loops and their ranking helpers."""

import numpy as np
import pytest

from layercollapse import (
    FitnessCache,
    FitnessKind,
    GAConfig,
    InfeasibleRunError,
    InvalidTargetError,
    MOConfig,
    canonical_key,
    crowding_distance,
    decode_genome,
    dominates,
    non_dominated_sort,
    run_ga,
    run_nsga2,
)
import layercollapse.evolve as evolve_module
from layercollapse.evolve import Individual, _better_single

from conftest import make_calibration


IDENTITY_4 = decode_genome([0] * 12, 4)


def _point(objectives, key="k"):
    """Individual carrying only objectives, for ranking tests."""
    ind = Individual(genome=[0] * 12, plan=IDENTITY_4, objectives=tuple(objectives))
    if key != "k":
        ind.__dict__["_forced_key"] = key
    return ind


@pytest.fixture(scope="module")
def fast_calibration():
    return make_calibration(8, 16)


class TestDominates:
    def test_strictly_better_both(self):
        assert dominates((0.9, 0.5), (0.7, 0.2))

    def test_better_one_equal_other(self):
        assert dominates((0.9, 0.5), (0.9, 0.2))
        assert dominates((0.9, 0.5), (0.7, 0.5))

    def test_equal_points_do_not_dominate(self):
        assert not dominates((0.9, 0.5), (0.9, 0.5))

    def test_trade_off_incomparable(self):
        assert not dominates((0.9, 0.2), (0.7, 0.5))
        assert not dominates((0.7, 0.5), (0.9, 0.2))

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="objective"):
            dominates((0.9,), (0.9, 0.5))


class TestNonDominatedSort:
    def test_three_point_example(self):
        # objectives are (fitness, ratio), both maximized
        pop = [_point((0.9, 0.2)), _point((0.7, 0.5)), _point((0.9, 0.5))]
        fronts = non_dominated_sort(pop)
        assert fronts == [[2], [0, 1]]

    def test_all_incomparable_single_front(self):
        pop = [_point((0.9, 0.1)), _point((0.8, 0.2)), _point((0.7, 0.3))]
        assert non_dominated_sort(pop) == [[0, 1, 2]]

    def test_chain_gives_singleton_fronts(self):
        pop = [_point((0.5, 0.5)), _point((0.7, 0.7)), _point((0.9, 0.9))]
        assert non_dominated_sort(pop) == [[2], [1], [0]]

    def test_duplicates_share_front(self):
        pop = [_point((0.9, 0.5)), _point((0.9, 0.5))]
        assert non_dominated_sort(pop) == [[0, 1]]

    def test_empty(self):
        assert non_dominated_sort([]) == []

    def test_fronts_partition_population(self):
        rng = np.random.default_rng(0)
        pop = [_point(tuple(rng.random(2))) for _ in range(40)]
        fronts = non_dominated_sort(pop)
        flat = sorted(i for front in fronts for i in front)
        assert flat == list(range(40))
        # no member of a later front dominates a member of an earlier one
        for earlier in range(len(fronts)):
            for later in range(earlier + 1, len(fronts)):
                for i in fronts[later]:
                    for j in fronts[earlier]:
                        assert not dominates(pop[i].objectives, pop[j].objectives)


class TestCrowdingDistance:
    def test_pair_all_infinite(self):
        front = [_point((0.1, 0.9)), _point((0.9, 0.1))]
        assert crowding_distance(front) == [float("inf")] * 2

    def test_single_infinite(self):
        assert crowding_distance([_point((0.5, 0.5))]) == [float("inf")]

    def test_evenly_spaced_middle(self):
        front = [_point((0.0, 1.0)), _point((0.5, 0.5)), _point((1.0, 0.0))]
        got = crowding_distance(front)
        assert got[0] == float("inf")
        assert got[2] == float("inf")
        # one normalized gap per objective
        assert got[1] == pytest.approx(2.0)

    def test_degenerate_objective_contributes_nothing(self):
        front = [_point((0.0, 5.0)), _point((0.5, 5.0)), _point((1.0, 5.0))]
        got = crowding_distance(front)
        assert got[1] == pytest.approx(1.0)

    def test_fully_degenerate_front(self):
        front = [_point((5.0, 5.0)) for _ in range(3)]
        assert crowding_distance(front) == [0.0, 0.0, 0.0]

    def test_empty(self):
        assert crowding_distance([]) == []


class TestBetterSingle:
    def _ind(self, fitness, feasible=True, ops=()):
        from layercollapse import plan_from_ops

        plan = plan_from_ops(list(ops), 8) if ops else decode_genome([0] * 24, 8)
        return Individual(
            genome=[0] * 24, plan=plan, objectives=(fitness,), feasible=feasible
        )

    def test_higher_fitness_wins(self):
        a, b = self._ind(0.9), self._ind(0.7)
        assert _better_single(a, b) is a
        assert _better_single(b, a) is a

    def test_feasible_breaks_fitness_tie(self):
        a, b = self._ind(-1.0, feasible=False), self._ind(-1.0, feasible=True)
        assert _better_single(a, b) is b
        assert _better_single(b, a) is b

    def test_key_breaks_remaining_tie(self):
        a, b = self._ind(0.5, ops=[(1, 2)]), self._ind(0.5, ops=[(2, 3)])
        assert _better_single(a, b) is a
        assert _better_single(b, a) is a

    def test_first_wins_full_tie(self):
        a, b = self._ind(0.5, ops=[(1, 2)]), self._ind(0.5, ops=[(1, 2)])
        assert _better_single(a, b) is a
        assert _better_single(b, a) is b


class TestConfigValidation:
    def test_ga_defaults_valid(self):
        GAConfig(target_ratio=0.25).validate()
        MOConfig().validate()

    @pytest.mark.parametrize("population", [3, 5, 0, 2])
    def test_population_must_be_even_and_big_enough(self, population):
        with pytest.raises(ValueError, match="population"):
            GAConfig(target_ratio=0.25, population=population).validate()

    def test_budget_below_population(self):
        with pytest.raises(ValueError, match="max_evaluations"):
            GAConfig(target_ratio=0.25, population=10, max_evaluations=5).validate()

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5, 1.5])
    def test_target_ratio_open_interval(self, ratio):
        with pytest.raises(ValueError, match="target_ratio"):
            GAConfig(target_ratio=ratio).validate()

    def test_negative_seed(self):
        with pytest.raises(ValueError, match="seed"):
            GAConfig(target_ratio=0.25, seed=-1).validate()

    def test_bad_crossover_prob(self):
        with pytest.raises(ValueError, match="crossover_prob"):
            MOConfig(crossover_prob=1.5).validate()


def _small_ga_config(**overrides):
    base = dict(
        target_ratio=0.25,
        population=8,
        max_evaluations=48,
        repair_trials=50,
        seed=0,
    )
    base.update(overrides)
    return GAConfig(**base)


class TestRunGa:
    def test_finds_exact_target(self, small_model, fast_calibration):
        best, history = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, _small_ga_config()
        )
        assert best.feasible
        assert best.plan.removed_count == 1
        assert -1.0 <= best.fitness <= 1.0
        assert history[0]["generation"] == 0
        assert [h["generation"] for h in history] == list(range(len(history)))

    def test_deterministic(self, small_model, fast_calibration):
        runs = [
            run_ga(
                small_model,
                fast_calibration,
                FitnessKind.MODULE_SIMILARITY,
                _small_ga_config(),
            )
            for _ in range(2)
        ]
        (best_a, hist_a), (best_b, hist_b) = runs
        assert best_a.key == best_b.key
        assert best_a.fitness == best_b.fitness
        assert [h["best_fitness"] for h in hist_a] == [h["best_fitness"] for h in hist_b]
        assert [h["evaluations_used"] for h in hist_a] == [
            h["evaluations_used"] for h in hist_b
        ]

    def test_best_fitness_monotone(self, small_model, fast_calibration):
        _, history = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, _small_ga_config()
        )
        series = [h["best_fitness"] for h in history]
        assert all(b >= a for a, b in zip(series, series[1:]))

    def test_budget_overshoot_bounded(self, small_model, fast_calibration):
        config = _small_ga_config()
        _, history = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config
        )
        used = history[-1]["evaluations_used"]
        assert used >= config.max_evaluations
        assert used <= config.max_evaluations + config.population
        assert used == history[-1]["cache_hits"] + history[-1]["cache_misses"]

    def test_history_counters_are_run_local(self, small_model, fast_calibration):
        cache = FitnessCache()
        config = _small_ga_config()
        _, first = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, cache=cache
        )
        best_warm, second = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, cache=cache
        )
        # second run replays the exact same plans, so it misses nothing new
        assert second[-1]["cache_misses"] == 0
        assert second[-1]["cache_hits"] == first[-1]["evaluations_used"]
        assert best_warm.plan.removed_count == 1

    def test_worker_count_invisible(self, small_model, fast_calibration):
        config = _small_ga_config()
        best_a, hist_a = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, workers=1
        )
        best_b, hist_b = run_ga(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, workers=4
        )
        assert best_a.key == best_b.key
        assert best_a.fitness == best_b.fitness
        assert [h["cache_hits"] for h in hist_a] == [h["cache_hits"] for h in hist_b]

    def test_ratio_rounding_half_to_even(self, toy_model, fast_calibration):
        # 0.1875 * 8 = 1.5 rounds to 2, not 1
        best, _ = run_ga(
            toy_model,
            fast_calibration,
            FitnessKind.MODULE_SIMILARITY,
            GAConfig(
                target_ratio=0.1875,
                population=8,
                max_evaluations=16,
                repair_trials=50,
                seed=1,
            ),
        )
        assert best.plan.removed_count == 2

    @pytest.mark.parametrize("ratio", [0.05, 0.9])
    def test_unreachable_targets_rejected(self, small_model, fast_calibration, ratio):
        # L=4: 0.05 -> 0 removed, 0.9 -> 4 removed; both outside 1..2
        with pytest.raises(InvalidTargetError, match="at least"):
            run_ga(
                small_model,
                fast_calibration,
                FitnessKind.MODULE_SIMILARITY,
                _small_ga_config(target_ratio=ratio),
            )

    def test_all_infeasible_raises(self, fast_calibration, monkeypatch):
        from layercollapse import ModelConfig, init_random

        monkeypatch.setattr(evolve_module, "_MAX_STALLED_GENERATIONS", 3)
        model8 = init_random(ModelConfig(n_layers=8, d_model=16, n_heads=2, d_ff=24), 1)
        with pytest.raises(InfeasibleRunError, match="repaired"):
            run_ga(
                model8,
                fast_calibration,
                FitnessKind.MODULE_SIMILARITY,
                GAConfig(
                    target_ratio=0.75,
                    population=4,
                    max_evaluations=4,
                    repair_trials=0,
                    seed=0,
                ),
            )


@pytest.fixture(scope="module")
def front_and_history(small_model, fast_calibration):
    config = MOConfig(population=8, max_evaluations=48, seed=3)
    return run_nsga2(
        small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config
    )


class TestRunNsga2:
    def test_front_sorted_and_deduplicated(self, front_and_history):
        front, _ = front_and_history
        assert front
        ratios = [e.ratio for e in front]
        assert ratios == sorted(ratios)
        keys = [canonical_key(e.plan) for e in front]
        assert len(keys) == len(set(keys))

    def test_front_mutually_non_dominated(self, front_and_history):
        front, _ = front_and_history
        for i, a in enumerate(front):
            for b in front[i + 1 :]:
                assert not dominates((a.fitness, a.ratio), (b.fitness, b.ratio))
                assert not dominates((b.fitness, b.ratio), (a.fitness, a.ratio))

    def test_fitness_non_increasing_in_ratio(self, front_and_history):
        front, _ = front_and_history
        fitness = [e.fitness for e in front]
        assert all(b <= a for a, b in zip(fitness, fitness[1:]))

    def test_every_entry_buildable(self, front_and_history, small_model):
        front, _ = front_and_history
        n_layers = small_model.config.n_layers
        for entry in front:
            assert entry.plan.final_layer_count >= 2
            assert entry.ratio == entry.plan.removed_count / n_layers
            assert decode_genome(list(entry.genome), n_layers) == entry.plan

    def test_history_shape(self, front_and_history):
        _, history = front_and_history
        assert history[0]["generation"] == 0
        assert history[-1]["evaluations_used"] >= 48
        for record in history:
            assert set(record) == {
                "generation",
                "evaluations_used",
                "best_fitness",
                "mean_fitness",
                "cache_hits",
                "cache_misses",
                "elapsed_seconds",
            }

    def test_deterministic_and_worker_invariant(self, small_model, fast_calibration):
        config = MOConfig(population=8, max_evaluations=48, seed=3)

        def signature(front):
            return [(e.ratio, e.fitness, canonical_key(e.plan)) for e in front]

        front_a, _ = run_nsga2(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, workers=1
        )
        front_b, _ = run_nsga2(
            small_model, fast_calibration, FitnessKind.MODULE_SIMILARITY, config, workers=4
        )
        assert signature(front_a) == signature(front_b)
