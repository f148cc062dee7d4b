"""Decode genomes into merge plans and collapse layers with them.

A genome is a flat integer vector, three values per layer: base index, end
index, active flag. Decoding walks the active triples in order, resolves
them against what earlier merges already removed, and records the surviving
operations in original layer coordinates. Two genomes that describe the
same collapse decode to the same plan, and the plan's canonical key makes
that visible.
"""

from pathlib import Path

import numpy as np

from layercollapse import (
    ModelConfig,
    apply_plan,
    canonical_key,
    compression_ratio,
    decode_genome,
    init_random,
    load_plan,
    merge_layers,
    save_plan,
    similarity_map,
)

OUT = Path(__file__).resolve().parent / "out" / "collapse_plans"


def main() -> None:
    n_layers = 16
    model = init_random(
        ModelConfig(n_layers=n_layers, d_model=16, n_heads=2, d_ff=24, max_seq_len=32),
        seed=2,
    )

    # one active triple: merge layers 5..7 into layer 5
    genome = [5, 7, 1] + [0] * (3 * n_layers - 3)
    plan = decode_genome(genome, n_layers)
    print(f"genome triples: {[tuple(genome[i:i + 3]) for i in range(0, 9, 3)]} ...")
    print(f"decoded ops: {plan.effective_ops}")
    print(f"removed {plan.removed_count} of {n_layers}, "
          f"ratio {compression_ratio(plan, n_layers):.4f}, "
          f"key '{canonical_key(plan)}'")

    # a second op entirely inside the first adds nothing
    redundant = decode_genome([5, 7, 1, 6, 7, 1] + [0] * (3 * n_layers - 6), n_layers)
    print(f"\nredundant genome decodes to key '{canonical_key(redundant)}' "
          f"(same plan: {canonical_key(redundant) == canonical_key(plan)})")

    compressed = apply_plan(model, plan)
    print(f"\napplied: {n_layers} layers -> {len(compressed.layers)}")

    # merged weights follow the differential rule: base plus the sum of
    # deltas from the layers folded into it
    direct = merge_layers(model.layers, 5, 7)
    match = np.array_equal(compressed.layers[5].attn_q, direct.attn_q)
    print(f"merged layer equals a direct 3-layer merge: {match}")

    mapping = similarity_map(plan, n_layers)
    print(f"\noriginal -> compressed layer map: {mapping}")

    OUT.mkdir(parents=True, exist_ok=True)
    path = OUT / "plan.json"
    save_plan(plan, path)
    print(f"plan file {path} round-trips: {load_plan(path) == plan}")


if __name__ == "__main__":
    main()
