"""Search for the best fixed-ratio compression with the genetic algorithm.

The GA breeds genomes under simulated binary crossover and polynomial
mutation (both adapted to integers), repairs every offspring to the exact
target removal count, and scores survivors by module similarity. The
evaluation budget counts cache hits and misses alike, so converged
populations finish cheaply. Everything is seeded and the whole run is
reproducible.
"""

from pathlib import Path

from layercollapse import (
    FitnessKind,
    GAConfig,
    ModelConfig,
    apply_plan,
    canonical_key,
    init_random,
    load_calibration,
    run_ga,
    save_checkpoint,
    save_plan,
)

CALIBRATION = Path(__file__).resolve().parents[1] / "data" / "calibration.txt"
OUT = Path(__file__).resolve().parent / "out" / "evolve_compress"


def main() -> None:
    model = init_random(
        ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, max_seq_len=64),
        seed=1,
    )
    calibration = load_calibration(CALIBRATION, n_sentences=32, max_len=32, seed=0)

    config = GAConfig(
        target_ratio=0.25, population=20, max_evaluations=400, seed=0
    )
    print(f"searching: remove {int(config.target_ratio * 8)} of 8 layers, "
          f"budget {config.max_evaluations} evaluations, "
          f"population {config.population}")

    best, history = run_ga(model, calibration, FitnessKind.MODULE_SIMILARITY, config)

    print("\n gen   evals   best       mean       hits")
    for record in history:
        print(f"{record['generation']:>4} {record['evaluations_used']:>7} "
              f"{record['best_fitness']:>10.6f} {record['mean_fitness']:>10.6f} "
              f"{record['cache_hits']:>6}")

    plan = best.plan
    print(f"\nbest plan: key '{canonical_key(plan)}', "
          f"fitness {best.fitness:.6f}, "
          f"{plan.removed_count} layers removed")

    compressed = apply_plan(model, plan)
    save_checkpoint(compressed, OUT / "compressed")
    save_plan(plan, OUT / "plan.json")
    print(f"wrote {OUT / 'compressed'} ({len(compressed.layers)} layers) "
          f"and {OUT / 'plan.json'}")


if __name__ == "__main__":
    main()
