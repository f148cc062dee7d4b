"""Layer-merge plans: genome decoding, differential merging, plan replay.

A candidate compression of an ``L``-layer model is encoded as ``3L`` integers,
read as ``L`` triples ``(base, end, active)``. Base and end are *original*
layer indices; an inactive triple or one whose span has already collapsed to
nothing is skipped. Triples are applied in order, and because earlier merges
renumber the remaining layers, an alias table from original to current indices
is maintained while decoding so later triples land on the layers they meant.

Merging layers ``base..end`` produces a single layer whose tensors are the
base tensors plus the sum of the per-layer deltas against the base:

    merged = theta_base + sum_k (theta_{base+k} - theta_base),  k = 1..end-base

applied independently to all nine per-layer tensors, in float32, accumulating
deltas in ascending ``k``. That ordering is part of the contract: two plans
that resolve to the same effective operations produce bitwise identical
models.

The decoded form, :class:`ResolvedPlan`, stores effective operations in
original coordinates. Replaying them through a fresh alias table reproduces
the exact merge sequence, which is what :func:`apply_plan` and
:func:`similarity_map` do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EngineError, InvalidTargetError, PlanMismatchError
from .model import LayerWeights, TransformerModel


class MergeOp(NamedTuple):
    """One effective merge in original layer coordinates, ``base < end``."""

    base: int
    end: int


@dataclass(frozen=True)
class ResolvedPlan:
    """The effective merge sequence decoded from a genome.

    ``removed_count`` is the number of layers eliminated and
    ``final_layer_count`` what remains, so the original depth is their sum.
    """

    effective_ops: tuple[MergeOp, ...]
    removed_count: int
    final_layer_count: int

    @property
    def original_layer_count(self) -> int:
        return self.removed_count + self.final_layer_count

    def is_identity(self) -> bool:
        return not self.effective_ops


def genome_bounds(n_layers: int) -> list[tuple[int, int]]:
    """Inclusive per-variable bounds for a genome over ``n_layers`` layers."""
    if n_layers < 2:
        raise ValueError("need at least 2 layers")
    return [(0, n_layers - 1), (0, n_layers - 1), (0, 1)] * n_layers


def random_genome(n_layers: int, rng: np.random.Generator) -> list[int]:
    """Uniform genome within :func:`genome_bounds`, drawn variable by variable."""
    genome = []
    for low, high in genome_bounds(n_layers):
        genome.append(int(rng.integers(low, high + 1)))
    return genome


def _validate_genome(genome: Sequence[int], n_layers: int) -> None:
    if len(genome) != 3 * n_layers:
        raise ValueError(
            f"genome length {len(genome)} does not match 3 * {n_layers} layers"
        )
    for value, (low, high) in zip(genome, genome_bounds(n_layers)):
        if not (low <= value <= high):
            raise ValueError(f"genome value {value} outside [{low}, {high}]")


def _alias_update(alias: list[int], base: int, end: int, span: int) -> None:
    # collapse originals base..end onto the merged slot, shift everything after
    target = alias[base]
    for j in range(base, end + 1):
        alias[j] = target
    for j in range(end + 1, len(alias)):
        alias[j] = max(0, alias[j] - span)


def decode_genome(genome: Sequence[int], n_layers: int) -> ResolvedPlan:
    """Resolve a genome into its effective merge operations.

    Triples are processed in genome order. A triple is dropped when inactive
    or when, after aliasing, its span no longer covers at least two distinct
    current layers. Effective operations are recorded in original coordinates
    widened to the full current block (smallest and largest original index
    aliased to the span's endpoints), so replaying them reproduces the decode.
    """
    _validate_genome(genome, n_layers)
    alias = list(range(n_layers))
    removed = 0
    ops: list[MergeOp] = []
    for i in range(n_layers):
        base, end, active = genome[3 * i : 3 * i + 3]
        if active == 0:
            continue
        current_count = n_layers - removed
        mapped_base = min(alias[base], current_count - 1)
        mapped_end = min(alias[end], current_count - 1)
        if mapped_end <= mapped_base:
            continue
        span = mapped_end - mapped_base
        orig_base = alias.index(mapped_base)
        orig_end = n_layers - 1 - alias[::-1].index(mapped_end)
        ops.append(MergeOp(orig_base, orig_end))
        _alias_update(alias, orig_base, orig_end, span)
        removed += span
    return ResolvedPlan(
        effective_ops=tuple(ops),
        removed_count=removed,
        final_layer_count=n_layers - removed,
    )


def plan_from_ops(ops: Sequence[tuple[int, int]], n_layers: int) -> ResolvedPlan:
    """Build a plan from explicit effective operations.

    Every operation must survive aliasing with a positive span; this is the
    validating constructor used when reading plans back from disk.
    """
    if n_layers < 2:
        raise ValueError("need at least 2 layers")
    alias = list(range(n_layers))
    removed = 0
    resolved: list[MergeOp] = []
    for base, end in ops:
        if not (0 <= base < n_layers and 0 <= end < n_layers):
            raise ValueError(f"operation ({base}, {end}) outside 0..{n_layers - 1}")
        span = alias[end] - alias[base]
        if span <= 0:
            raise ValueError(f"operation ({base}, {end}) has no effect when replayed")
        resolved.append(MergeOp(base, end))
        _alias_update(alias, base, end, span)
        removed += span
    return ResolvedPlan(
        effective_ops=tuple(resolved),
        removed_count=removed,
        final_layer_count=n_layers - removed,
    )


def canonical_key(plan: ResolvedPlan) -> str:
    """Stable string identity of a plan; ``'identity'`` when nothing merges."""
    if plan.is_identity():
        return "identity"
    return ";".join(f"{op.base}-{op.end}" for op in plan.effective_ops)


def compression_ratio(plan: ResolvedPlan, n_layers: int) -> float:
    if plan.original_layer_count != n_layers:
        raise PlanMismatchError(
            f"plan covers {plan.original_layer_count} layers, model has {n_layers}"
        )
    return plan.removed_count / n_layers


def similarity_map(plan: ResolvedPlan, n_layers: int) -> list[int]:
    """Map each original layer index to its surviving compressed index.

    Entry ``j`` is the compressed-model layer that original layer ``j`` was
    folded into (itself, shifted, when untouched).
    """
    if plan.original_layer_count != n_layers:
        raise PlanMismatchError(
            f"plan covers {plan.original_layer_count} layers, model has {n_layers}"
        )
    alias = list(range(n_layers))
    for op in plan.effective_ops:
        span = alias[op.end] - alias[op.base]
        _alias_update(alias, op.base, op.end, span)
    return alias


def merge_layers(layers: Sequence[LayerWeights], base: int, end: int) -> LayerWeights:
    """Differentially merge ``layers[base..end]`` into one layer.

    The result is the base layer plus the sum of each later layer's delta from
    the base, per tensor, accumulated in ascending order in float32.
    """
    if not (0 <= base < end < len(layers)):
        raise ValueError(f"invalid merge range ({base}, {end}) over {len(layers)} layers")
    base_layer = layers[base]
    merged: dict[str, np.ndarray] = {}
    for name, base_arr in base_layer.named_tensors():
        acc = base_arr.copy()
        for k in range(1, end - base + 1):
            other = getattr(layers[base + k], name)
            if other.shape != base_arr.shape:
                raise ValueError(
                    f"tensor {name!r} shape {other.shape} differs from base {base_arr.shape}"
                )
            acc += other - base_arr
        merged[name] = acc
    return LayerWeights(**merged)


def apply_plan(model: TransformerModel, plan: ResolvedPlan) -> TransformerModel:
    """Materialize the compressed model; the input model is left untouched.

    Layers not covered by any merge are shared by reference with the input,
    so applying a plan is cheap relative to a forward pass.
    """
    n_layers = model.config.n_layers
    if plan.original_layer_count != n_layers:
        raise PlanMismatchError(
            f"plan covers {plan.original_layer_count} layers, model has {n_layers}"
        )
    if plan.final_layer_count < 2:
        raise InvalidTargetError(
            f"plan leaves {plan.final_layer_count} layer(s); models keep at least 2"
        )
    layers = list(model.layers)
    alias = list(range(n_layers))
    for op in plan.effective_ops:
        mapped_base = alias[op.base]
        mapped_end = alias[op.end]
        span = mapped_end - mapped_base
        if span <= 0:
            raise EngineError(f"plan operation {op} has no effect when replayed")
        merged = merge_layers(layers, mapped_base, mapped_end)
        layers = layers[:mapped_base] + [merged] + layers[mapped_end + 1 :]
        _alias_update(alias, op.base, op.end, span)
    if len(layers) != plan.final_layer_count:
        raise EngineError(
            f"plan replay produced {len(layers)} layers, expected {plan.final_layer_count}"
        )
    new_config = replace(model.config, n_layers=len(layers))
    return TransformerModel(
        config=new_config,
        embedding=model.embedding,
        layers=tuple(layers),
        final_norm=model.final_norm,
        lm_head=model.lm_head,
    )


def plan_to_dict(plan: ResolvedPlan) -> dict:
    n_layers = plan.original_layer_count
    return {
        "original_layers": n_layers,
        "effective_ops": [[op.base, op.end] for op in plan.effective_ops],
        "removed": plan.removed_count,
        "ratio": plan.removed_count / n_layers,
        "canonical_key": canonical_key(plan),
    }


def save_plan(plan: ResolvedPlan, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_plan(path: str | Path) -> ResolvedPlan:
    """Read a plan file and revalidate it by replaying its operations."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise EngineError(f"cannot read plan file {path}: {exc}") from exc
    try:
        n_layers = int(data["original_layers"])
        raw_ops = [(int(b), int(e)) for b, e in data["effective_ops"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise EngineError(f"malformed plan file {path}: {exc}") from exc
    try:
        plan = plan_from_ops(raw_ops, n_layers)
    except ValueError as exc:
        raise EngineError(f"invalid plan in {path}: {exc}") from exc
    if "removed" in data and int(data["removed"]) != plan.removed_count:
        raise EngineError(
            f"plan file {path} declares removed={data['removed']} "
            f"but replays to {plan.removed_count}"
        )
    return plan
