"""Score compression plans against a calibration set, with caching.

Three fitness kinds are available. Module similarity compares attention and
feed-forward projection outputs (plus the final hidden state) between the
original and compressed model, mapping each original layer to whatever
absorbed it. The other two compare next-byte predictions: negated mean KL
divergence and negated perplexity. All are maximize-is-better, so the
identity plan scores 1.0 similarity and 0.0 negated KL by construction.

Evaluations are memoized on the plan's canonical key, so equivalent genomes
cost one model run between them. That cache is what makes the evolutionary
searches in the later demos affordable.
"""

import time
from pathlib import Path

from layercollapse import (
    FitnessCache,
    FitnessEvaluator,
    FitnessKind,
    ModelConfig,
    decode_genome,
    init_random,
    load_calibration,
)

CALIBRATION = Path(__file__).resolve().parents[1] / "data" / "calibration.txt"


def main() -> None:
    model = init_random(
        ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, max_seq_len=64),
        seed=1,
    )
    calibration = load_calibration(CALIBRATION, n_sentences=32, max_len=32, seed=0)
    print(f"calibration: {len(calibration.sequences)} sentences, "
          f"fingerprint {calibration.fingerprint[:12]}...")

    cache = FitnessCache()
    evaluator = FitnessEvaluator(model, calibration, cache=cache)

    identity = decode_genome([0] * 24, 8)
    collapse_mid = decode_genome([3, 5, 1] + [0] * 21, 8)
    collapse_late = decode_genome([5, 7, 1] + [0] * 21, 8)

    print("\nplan        similarity   neg KL       neg perplexity")
    for label, plan in (
        ("identity", identity),
        ("merge 3-5", collapse_mid),
        ("merge 5-7", collapse_late),
    ):
        scores = [
            evaluator.evaluate_plan(plan, kind)
            for kind in (
                FitnessKind.MODULE_SIMILARITY,
                FitnessKind.NEG_KL_DIVERGENCE,
                FitnessKind.NEG_PERPLEXITY,
            )
        ]
        print(f"{label:<11} {scores[0]:>10.6f} {scores[1]:>12.6f} {scores[2]:>14.6f}")

    # same plan through a different genome: resolved from the cache
    start = time.perf_counter()
    redundant = decode_genome([3, 5, 1, 4, 5, 1] + [0] * 18, 8)
    again = evaluator.evaluate_plan(redundant, FitnessKind.MODULE_SIMILARITY)
    hit_time = time.perf_counter() - start
    print(f"\nredundant genome rescored in {hit_time * 1e6:.0f}us "
          f"(score {again:.6f}, from cache)")

    snap = cache.snapshot()
    print(f"cache: {snap['entries']} entries, {snap['hits']} hits, "
          f"{snap['misses']} misses, hit rate {cache.hit_rate:.2f}")
    print(f"time in misses {snap['miss_seconds']:.2f}s, "
          f"in hits {snap['hit_seconds'] * 1e3:.3f}ms")


if __name__ == "__main__":
    main()
