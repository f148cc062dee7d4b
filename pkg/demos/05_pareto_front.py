"""Map the whole compression-versus-fidelity trade-off in one search.

Multi-objective search keeps both axes open: it maximizes fitness and the
removed-layer ratio simultaneously under non-dominated sorting with
crowding-distance tie-breaks. One run returns a front of plans from "remove
nothing, keep everything" down to the deepest collapse worth keeping, so
you can pick the operating point after seeing the curve instead of fixing
a ratio up front.
"""

from pathlib import Path

from layercollapse import (
    FitnessCache,
    FitnessKind,
    MOConfig,
    ModelConfig,
    canonical_key,
    init_random,
    load_calibration,
    run_nsga2,
    save_plan,
)

CALIBRATION = Path(__file__).resolve().parents[1] / "data" / "calibration.txt"
OUT = Path(__file__).resolve().parent / "out" / "pareto_front"


def main() -> None:
    model = init_random(
        ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, max_seq_len=64),
        seed=1,
    )
    calibration = load_calibration(CALIBRATION, n_sentences=32, max_len=32, seed=0)

    cache = FitnessCache()
    config = MOConfig(population=40, max_evaluations=800, seed=0)
    print(f"searching: population {config.population}, "
          f"budget {config.max_evaluations} evaluations")

    front, history = run_nsga2(
        model, calibration, FitnessKind.MODULE_SIMILARITY, config, cache=cache
    )
    last = history[-1]
    print(f"finished after {last['generation'] + 1} generations, "
          f"{last['evaluations_used']} evaluations "
          f"(cache hit rate {cache.hit_rate:.2f})")

    print("\nratio    removed  fitness    plan")
    for entry in front:
        print(f"{entry.ratio:<8.4f} {entry.plan.removed_count:<8} "
              f"{entry.fitness:<10.6f} '{canonical_key(entry.plan)}'")

    OUT.mkdir(parents=True, exist_ok=True)
    for entry in front:
        save_plan(entry.plan, OUT / f"ratio_{entry.ratio:.4f}.json")
    print(f"\nwrote {len(front)} plan files to {OUT}")

    # the front is a menu: scan down it until the fidelity cost stops
    # being worth the depth saved
    best_quarter = next((e for e in front if e.ratio >= 0.25), None)
    if best_quarter is not None:
        print(f"example pick: ratio {best_quarter.ratio:.2f} at "
              f"fitness {best_quarter.fitness:.6f}")


if __name__ == "__main__":
    main()
