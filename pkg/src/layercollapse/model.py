"""Minimal decoder-only transformer implemented on numpy.

The architecture is the usual pre-norm rotary decoder: RMSNorm before each
sublayer, rotary position embeddings on queries and keys, causal multi-head
attention, a SwiGLU feed-forward block, and an untied output head. Everything
runs in float32 and the vocabulary is fixed to raw bytes, which keeps models
small enough to evaluate thousands of times during a search.

Models are immutable value objects. A forward pass allocates its own buffers,
so one model instance can serve concurrent evaluations, and the optional
activation trace records every projection output needed to compare two models
module by module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

BYTE_VOCAB_SIZE = 256

ATTN_PROJECTIONS = ("attn_q", "attn_k", "attn_v", "attn_o")
FFN_PROJECTIONS = ("ffn_gate", "ffn_up", "ffn_down")
NORM_WEIGHTS = ("norm_attn", "norm_ffn")
LAYER_TENSOR_NAMES = ATTN_PROJECTIONS + FFN_PROJECTIONS + NORM_WEIGHTS

TokenSequence = list[int]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``d_model`` must divide evenly into heads and the per-head width must be
    even so rotary pairs line up. The byte vocabulary is part of the contract:
    token ids are raw byte values.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int = BYTE_VOCAB_SIZE
    max_seq_len: int = 128
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ValueError("d_model, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("per-head width must be even for rotary pairing")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if self.rope_theta <= 0.0:
            raise ValueError("rope_theta must be positive")
        if self.rms_eps <= 0.0:
            raise ValueError("rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rope_theta": self.rope_theta,
            "rms_eps": self.rms_eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        missing = [k for k in cls.field_names() if k not in data]
        if missing:
            raise ValueError(f"config is missing fields: {missing}")
        return cls(**{k: data[k] for k in cls.field_names()})

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return (
            "n_layers",
            "d_model",
            "n_heads",
            "d_ff",
            "vocab_size",
            "max_seq_len",
            "rope_theta",
            "rms_eps",
        )


def layer_tensor_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    """Expected shape of one per-layer tensor under ``config``."""
    d, f = config.d_model, config.d_ff
    shapes = {
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_o": (d, d),
        "ffn_gate": (f, d),
        "ffn_up": (f, d),
        "ffn_down": (d, f),
        "norm_attn": (d,),
        "norm_ffn": (d,),
    }
    if name not in shapes:
        raise ValueError(f"unknown layer tensor {name!r}")
    return shapes[name]


@dataclass(frozen=True)
class LayerWeights:
    """All learnable tensors of one decoder layer.

    Projection matrices are stored as ``(out_features, in_features)`` and
    applied as ``x @ W.T``.
    """

    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ffn_gate: np.ndarray
    ffn_up: np.ndarray
    ffn_down: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in LAYER_TENSOR_NAMES:
            yield name, getattr(self, name)

    def validate(self, config: ModelConfig) -> None:
        for name, arr in self.named_tensors():
            expected = layer_tensor_shape(name, config)
            if arr.shape != expected:
                raise ValueError(
                    f"layer tensor {name!r} has shape {arr.shape}, expected {expected}"
                )
            if arr.dtype != np.float32:
                raise ValueError(f"layer tensor {name!r} must be float32, got {arr.dtype}")


@dataclass(frozen=True)
class TransformerModel:
    """Immutable bundle of config and weights."""

    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise ValueError(
                f"config declares {cfg.n_layers} layers but {len(self.layers)} were given"
            )
        expected = {
            "embedding": (cfg.vocab_size, cfg.d_model),
            "final_norm": (cfg.d_model,),
            "lm_head": (cfg.vocab_size, cfg.d_model),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if arr.dtype != np.float32:
                raise ValueError(f"{name} must be float32, got {arr.dtype}")
        for layer in self.layers:
            layer.validate(cfg)


@dataclass
class ActivationTrace:
    """Per-layer projection outputs plus the final normalized hidden state.

    ``layers[i]`` maps each projection name in ``ATTN_PROJECTIONS`` and
    ``FFN_PROJECTIONS`` to its raw output for the whole sequence. Query, key
    and value are captured before rotary embedding; the attention output after
    the output projection and the feed-forward output before the residual add.
    """

    layers: list[dict[str, np.ndarray]]
    final_hidden: np.ndarray


def tokenize_bytes(text: str | bytes, max_len: int) -> TokenSequence:
    """Encode ``text`` as its raw byte values, truncated to ``max_len``.

    Strings are encoded as UTF-8 first; token ``i`` is byte ``i`` of the
    encoded text.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data[:max_len])


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))) * weight


def _silu(x: np.ndarray) -> np.ndarray:
    # clip keeps exp() finite in float32; 88 overflows
    z = np.clip(x, -87.0, 87.0)
    return x * (np.float32(1.0) / (np.float32(1.0) + np.exp(-z)))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _rope_tables(config: ModelConfig, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    exponent = np.arange(half, dtype=np.float64) * 2.0 / config.head_dim
    inv_freq = config.rope_theta ** (-exponent)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [seq, heads, head_dim], rotated in half-split pairs (i, i + half)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate((x1 * c - x2 * s, x1 * s + x2 * c), axis=-1)


def forward(
    model: TransformerModel,
    tokens: Sequence[int],
    capture: bool = False,
) -> tuple[np.ndarray, ActivationTrace | None]:
    """Run the model over ``tokens``.

    Returns float32 logits of shape ``(len(tokens), vocab_size)`` and, when
    ``capture`` is set, an :class:`ActivationTrace`. Raises ``ValueError`` for
    an empty sequence, a sequence longer than ``max_seq_len``, or token ids
    outside the vocabulary.
    """
    cfg = model.config
    seq = list(tokens)
    if not seq:
        raise ValueError("token sequence is empty")
    if len(seq) > cfg.max_seq_len:
        raise ValueError(f"sequence length {len(seq)} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.asarray(seq, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")

    n, heads, hd = len(seq), cfg.n_heads, cfg.head_dim
    x = model.embedding[ids]
    cos, sin = _rope_tables(cfg, n)
    mask = np.triu(np.full((n, n), -np.inf, dtype=np.float32), k=1)
    scale = np.float32(1.0 / math.sqrt(hd))
    captured: list[dict[str, np.ndarray]] = []

    for layer in model.layers:
        h = rms_norm(x, layer.norm_attn, cfg.rms_eps)
        q = h @ layer.attn_q.T
        k = h @ layer.attn_k.T
        v = h @ layer.attn_v.T

        qh = _apply_rope(q.reshape(n, heads, hd), cos, sin)
        kh = _apply_rope(k.reshape(n, heads, hd), cos, sin)
        vh = v.reshape(n, heads, hd)
        scores = np.einsum("thd,shd->hts", qh, kh) * scale + mask[None, :, :]
        ctx = np.einsum("hts,shd->thd", _softmax_last(scores), vh)
        attn_out = ctx.reshape(n, cfg.d_model) @ layer.attn_o.T
        x = x + attn_out

        h2 = rms_norm(x, layer.norm_ffn, cfg.rms_eps)
        gate = h2 @ layer.ffn_gate.T
        up = h2 @ layer.ffn_up.T
        down = (_silu(gate) * up) @ layer.ffn_down.T
        x = x + down

        if capture:
            captured.append(
                {
                    "attn_q": q,
                    "attn_k": k,
                    "attn_v": v,
                    "attn_o": attn_out,
                    "ffn_gate": gate,
                    "ffn_up": up,
                    "ffn_down": down,
                }
            )

    final_hidden = rms_norm(x, model.final_norm, cfg.rms_eps)
    logits = final_hidden @ model.lm_head.T
    trace = ActivationTrace(captured, final_hidden) if capture else None
    return logits, trace


def init_random(config: ModelConfig, seed: int) -> TransformerModel:
    """Gaussian(0, 0.02) weights, unit norm gains, fixed draw order per seed."""
    rng = np.random.default_rng(seed)

    def draw(*shape: int) -> np.ndarray:
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    d, f = config.d_model, config.d_ff
    embedding = draw(config.vocab_size, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_q=draw(d, d),
                attn_k=draw(d, d),
                attn_v=draw(d, d),
                attn_o=draw(d, d),
                ffn_gate=draw(f, d),
                ffn_up=draw(f, d),
                ffn_down=draw(d, f),
                norm_attn=np.ones(d, dtype=np.float32),
                norm_ffn=np.ones(d, dtype=np.float32),
            )
        )
    final_norm = np.ones(d, dtype=np.float32)
    lm_head = draw(config.vocab_size, d)
    return TransformerModel(
        config=config,
        embedding=embedding,
        layers=tuple(layers),
        final_norm=final_norm,
        lm_head=lm_head,
    )
