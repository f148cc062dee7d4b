"""Build a byte-level toy transformer, run it, and round-trip a checkpoint.

The package ships its own minimal decoder stack so every other demo can run
on a laptop in seconds. This script shows what one of those models looks
like: its configuration, its per-layer tensors, a forward pass over raw
bytes, and the on-disk checkpoint format.
"""

from pathlib import Path

import numpy as np

from layercollapse import (
    ModelConfig,
    forward,
    init_random,
    load_checkpoint,
    save_checkpoint,
    tokenize_bytes,
)

OUT = Path(__file__).resolve().parent / "out" / "toy_model"


def main() -> None:
    config = ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, max_seq_len=64)
    model = init_random(config, seed=1)

    print(f"config: {config}")
    print(f"layers: {len(model.layers)}, vocab: {config.vocab_size} (raw bytes)")
    first = model.layers[0]
    for name, tensor in first.named_tensors():
        print(f"  layer 0 {name:<10} {tensor.shape} {tensor.dtype}")

    sentence = "The ferry horn echoed twice across the bay."
    tokens = tokenize_bytes(sentence, max_len=config.max_seq_len)
    logits, trace = forward(model, tokens, capture=True)
    print(f"\ninput: {sentence!r}")
    print(f"tokens: {len(tokens)} bytes, logits shape {logits.shape}")

    # an untrained model predicts noise, but the machinery is all there
    last = logits[-1]
    top = np.argsort(last)[-3:][::-1]
    print("top next-byte guesses:", [(int(b), float(last[b])) for b in top])
    assert trace is not None
    print(f"captured activations for {len(trace.layers)} layers plus final hidden")

    save_checkpoint(model, OUT)
    reloaded = load_checkpoint(OUT)
    same = all(
        np.array_equal(getattr(a, name), getattr(b, name))
        for a, b in zip(model.layers, reloaded.layers)
        for name, _ in a.named_tensors()
    )
    print(f"\ncheckpoint written to {OUT}")
    print(f"reload is bit-identical: {same}")


if __name__ == "__main__":
    main()
