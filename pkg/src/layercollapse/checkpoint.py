"""Directory checkpoint format: a JSON manifest plus one raw weight file.

``manifest.json`` holds the flat model config and an ordered tensor index;
``model.bin`` holds every tensor back to back as little-endian float32. The
writer emits tensors in a fixed order (embedding, per-layer tensors, final
norm, lm head) and the reader validates names, shapes and finiteness, so a
round trip is bitwise exact and a truncated or edited checkpoint fails loudly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    MissingTensorError,
    NonFiniteTensorError,
    ShapeMismatchError,
)
from .model import (
    LAYER_TENSOR_NAMES,
    LayerWeights,
    ModelConfig,
    TransformerModel,
    layer_tensor_shape,
)

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "model.bin"
_DTYPE = np.dtype("<f4")


def tensor_order(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) sequence for a checkpoint under ``config``."""
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("embedding", (config.vocab_size, config.d_model))
    ]
    for i in range(config.n_layers):
        for name in LAYER_TENSOR_NAMES:
            entries.append((f"layers.{i}.{name}", layer_tensor_shape(name, config)))
    entries.append(("final_norm", (config.d_model,)))
    entries.append(("lm_head", (config.vocab_size, config.d_model)))
    return entries


def _model_tensors(model: TransformerModel) -> dict[str, np.ndarray]:
    tensors = {"embedding": model.embedding}
    for i, layer in enumerate(model.layers):
        for name, arr in layer.named_tensors():
            tensors[f"layers.{i}.{name}"] = arr
    tensors["final_norm"] = model.final_norm
    tensors["lm_head"] = model.lm_head
    return tensors


def save_checkpoint(model: TransformerModel, path: str | Path) -> None:
    """Write ``model`` to directory ``path``, creating it if needed."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = _model_tensors(model)

    index = []
    offset = 0
    blobs = []
    for name, shape in tensor_order(model.config):
        arr = tensors[name]
        if not np.isfinite(arr).all():
            raise NonFiniteTensorError(f"tensor {name!r} contains non-finite values")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(shape),
                "offset": offset,
                "length": len(raw),
                "file": WEIGHTS_NAME,
            }
        )
        blobs.append(raw)
        offset += len(raw)

    manifest = dict(model.config.to_dict())
    manifest["tensors"] = index
    (root / WEIGHTS_NAME).write_bytes(b"".join(blobs))
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> TransformerModel:
    """Load a checkpoint directory written by :func:`save_checkpoint`."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc

    try:
        config = ModelConfig.from_dict(manifest)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config in manifest: {exc}") from exc

    entries = {e["name"]: e for e in manifest.get("tensors", [])}
    file_cache: dict[str, bytes] = {}
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_order(config):
        entry = entries.get(name)
        if entry is None:
            raise MissingTensorError(f"missing tensor {name!r}")
        got_shape = tuple(entry["shape"])
        if got_shape != shape:
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {list(got_shape)}, expected {list(shape)}"
            )
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        if entry["length"] != nbytes:
            raise ShapeMismatchError(
                f"tensor {name!r} declares {entry['length']} bytes, expected {nbytes}"
            )
        fname = entry["file"]
        if fname not in file_cache:
            fpath = root / fname
            if not fpath.is_file():
                raise MissingTensorError(f"missing tensor file {fname!r}")
            file_cache[fname] = fpath.read_bytes()
        blob = file_cache[fname]
        if entry["offset"] + nbytes > len(blob):
            raise ShapeMismatchError(
                f"tensor {name!r} extends past the end of {fname!r}"
            )
        arr = np.frombuffer(
            blob, dtype=_DTYPE, count=int(np.prod(shape)), offset=entry["offset"]
        ).reshape(shape)
        if not np.isfinite(arr).all():
            raise NonFiniteTensorError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr

    layers = []
    for i in range(config.n_layers):
        layers.append(
            LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LAYER_TENSOR_NAMES})
        )
    return TransformerModel(
        config=config,
        embedding=tensors["embedding"],
        layers=tuple(layers),
        final_norm=tensors["final_norm"],
        lm_head=tensors["lm_head"],
    )
