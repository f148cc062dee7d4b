"""Fitness scoring of merge plans against a frozen base model.

Three interchangeable metrics, all oriented so bigger is better:

* module similarity: mean cosine agreement of attention projections, feed
  forward projections and final hidden states between base and compressed
  model over a calibration set;
* negative KL divergence of the compressed next-token distribution from the
  base distribution;
* negative perplexity of the compressed model on the calibration text.

Scores are memoized by the plan's canonical key, the metric, and a
fingerprint of the calibration tokens, so re-encodings of the same effective
plan cost one cache lookup instead of a forward pass. The evaluator resolves
cache state sequentially and only parallelizes the cache misses, which keeps
scores and hit/miss counters independent of the worker count.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collapse import ResolvedPlan, apply_plan, canonical_key, similarity_map
from .errors import CalibrationError
from .model import (
    ATTN_PROJECTIONS,
    FFN_PROJECTIONS,
    ActivationTrace,
    TokenSequence,
    TransformerModel,
    forward,
    tokenize_bytes,
)

logger = logging.getLogger(__name__)

PENALTY_SCORE = -1.0

_NORM_FLOOR = 1e-12
_PROB_FLOOR = 1e-12


class FitnessKind(enum.Enum):
    MODULE_SIMILARITY = "similarity"
    NEG_KL_DIVERGENCE = "kl"
    NEG_PERPLEXITY = "perplexity"


def penalty_score() -> float:
    """Score assigned to infeasible candidates; worse than any real metric."""
    return PENALTY_SCORE


@dataclass(frozen=True)
class CalibrationSet:
    """Tokenized calibration sentences with a content fingerprint."""

    sequences: tuple[TokenSequence, ...]
    fingerprint: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sequences", tuple(list(s) for s in self.sequences))
        if not self.sequences:
            raise CalibrationError("calibration set is empty")
        h = hashlib.sha256()
        for seq in self.sequences:
            if not seq:
                raise CalibrationError("calibration sentence tokenized to nothing")
            h.update(len(seq).to_bytes(4, "little"))
            h.update(bytes(seq))
        object.__setattr__(self, "fingerprint", h.hexdigest())

    def __len__(self) -> int:
        return len(self.sequences)


def load_calibration(
    path: str | Path, n_sentences: int, max_len: int, seed: int
) -> CalibrationSet:
    """Sample ``n_sentences`` non-blank lines from a UTF-8 text file.

    Lines are drawn without replacement with a generator seeded by ``seed``
    and kept in sampled order, then byte-tokenized and truncated to
    ``max_len``. Fails if the file has fewer usable lines than requested.
    """
    if n_sentences < 1:
        raise CalibrationError(f"n_sentences must be >= 1, got {n_sentences}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < n_sentences:
        raise CalibrationError(
            f"need {n_sentences} calibration sentences, file has {len(lines)}"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(lines), size=n_sentences, replace=False)
    sequences = [tokenize_bytes(lines[int(i)], max_len) for i in picks]
    return CalibrationSet(sequences=tuple(sequences))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two same-shape arrays, flattened, in float64.

    Returns 0.0 when either norm is below 1e-12; the result is clamped to
    [-1, 1] so accumulated roundoff cannot leak outside the legal range.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx < _NORM_FLOOR or ny < _NORM_FLOOR:
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityBreakdown:
    """Component scores for one sentence; ``overall`` is their plain mean."""

    attention: float
    ffn: float
    hidden: float

    @property
    def overall(self) -> float:
        return (self.attention + self.ffn + self.hidden) / 3.0


def module_similarity(
    base_trace: ActivationTrace,
    comp_trace: ActivationTrace,
    layer_map: list[int],
) -> SimilarityBreakdown:
    """Compare traces module-wise through an original-to-compressed layer map.

    Each original layer is compared against the compressed layer it collapsed
    into: the attention score averages q/k/v/o projection cosines over all
    original layers, the feed-forward score does the same for gate/up/down,
    and the hidden score is the cosine of the final hidden states.
    """
    n_layers = len(base_trace.layers)
    if len(layer_map) != n_layers:
        raise ValueError(
            f"layer map covers {len(layer_map)} layers, trace has {n_layers}"
        )
    if n_layers and max(layer_map) >= len(comp_trace.layers):
        raise ValueError("layer map points past the compressed trace")

    attn_total = 0.0
    ffn_total = 0.0
    for i in range(n_layers):
        base_layer = base_trace.layers[i]
        comp_layer = comp_trace.layers[layer_map[i]]
        attn_total += sum(
            cosine(base_layer[name], comp_layer[name]) for name in ATTN_PROJECTIONS
        ) / len(ATTN_PROJECTIONS)
        ffn_total += sum(
            cosine(base_layer[name], comp_layer[name]) for name in FFN_PROJECTIONS
        ) / len(FFN_PROJECTIONS)
    attention = attn_total / n_layers
    ffn = ffn_total / n_layers
    hidden = cosine(base_trace.final_hidden, comp_trace.final_hidden)
    return SimilarityBreakdown(attention=attention, ffn=ffn, hidden=hidden)


class FitnessCache:
    """Thread-safe score memo with hit/miss counters and cumulative timings.

    Keys are ``(canonical plan key, metric, calibration fingerprint)``. A key
    is never overwritten: the first inserted value wins, which together with
    deterministic scoring makes concurrent inserts idempotent.
    """

    def __init__(self) -> None:
        self._scores: dict[tuple[str, str, str], float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.hit_seconds = 0.0
        self.miss_seconds = 0.0

    def lookup(self, key: tuple[str, str, str]) -> float | None:
        with self._lock:
            return self._scores.get(key)

    def insert(self, key: tuple[str, str, str], score: float) -> None:
        with self._lock:
            self._scores.setdefault(key, score)

    def note_hit(self, seconds: float) -> None:
        with self._lock:
            self.hits += 1
            self.hit_seconds += seconds

    def note_miss(self, seconds: float) -> None:
        with self._lock:
            self.misses += 1
            self.miss_seconds += seconds

    def __len__(self) -> int:
        with self._lock:
            return len(self._scores)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "hits": self.hits,
                "misses": self.misses,
                "hit_seconds": self.hit_seconds,
                "miss_seconds": self.miss_seconds,
                "entries": len(self._scores),
            }


class FitnessEvaluator:
    """Scores plans against one base model and calibration set.

    Base-model forward passes are run once, lazily, and reused by every
    metric. ``workers`` bounds the thread pool used for batch evaluation;
    results and cache statistics do not depend on it.
    """

    def __init__(
        self,
        model: TransformerModel,
        calibration: CalibrationSet,
        cache: FitnessCache | None = None,
        workers: int = 1,
    ) -> None:
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.model = model
        self.calibration = calibration
        self.cache = cache if cache is not None else FitnessCache()
        self.workers = workers
        self._base_runs: list[tuple[np.ndarray, ActivationTrace]] | None = None
        self._base_lock = threading.Lock()

    def _base(self) -> list[tuple[np.ndarray, ActivationTrace]]:
        with self._base_lock:
            if self._base_runs is None:
                self._base_runs = [
                    forward(self.model, seq, capture=True)
                    for seq in self.calibration.sequences
                ]
            return self._base_runs

    def _key(self, plan: ResolvedPlan, kind: FitnessKind) -> tuple[str, str, str]:
        return (canonical_key(plan), kind.value, self.calibration.fingerprint)

    def evaluate_plan(self, plan: ResolvedPlan, kind: FitnessKind) -> float:
        """Cache-aware scoring of a single plan."""
        key = self._key(plan, kind)
        start = time.perf_counter()
        cached = self.cache.lookup(key)
        if cached is not None:
            self.cache.note_hit(time.perf_counter() - start)
            return cached
        score = self._compute(plan, kind)
        self.cache.note_miss(time.perf_counter() - start)
        self.cache.insert(key, score)
        return score

    def evaluate_batch(
        self, plans: list[ResolvedPlan], kind: FitnessKind
    ) -> list[float]:
        """Score a batch; misses may run in parallel, bookkeeping stays serial.

        Duplicate plans within the batch count as hits for all but the first
        occurrence, exactly as if the batch had been evaluated one by one.
        """
        keys = [self._key(p, kind) for p in plans]
        pending: list[tuple[str, str, str]] = []
        pending_plans: list[ResolvedPlan] = []
        seen: set[tuple[str, str, str]] = set()
        is_hit: list[bool] = []
        for plan, key in zip(plans, keys):
            start = time.perf_counter()
            known = key in seen or self.cache.lookup(key) is not None
            if known:
                self.cache.note_hit(time.perf_counter() - start)
            else:
                seen.add(key)
                pending.append(key)
                pending_plans.append(plan)
            is_hit.append(known)

        if pending:
            if self.workers > 1 and len(pending) > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    timed = list(pool.map(self._timed_compute, pending_plans, [kind] * len(pending_plans)))
            else:
                timed = [self._timed_compute(p, kind) for p in pending_plans]
            for key, (score, seconds) in zip(pending, timed):
                self.cache.note_miss(seconds)
                self.cache.insert(key, score)

        out: list[float] = []
        for key in keys:
            score = self.cache.lookup(key)
            assert score is not None
            out.append(score)
        return out

    def _timed_compute(self, plan: ResolvedPlan, kind: FitnessKind) -> tuple[float, float]:
        start = time.perf_counter()
        score = self._compute(plan, kind)
        return score, time.perf_counter() - start

    def _compute(self, plan: ResolvedPlan, kind: FitnessKind) -> float:
        # a model keeps at least 2 layers; plans collapsing further are unbuildable
        if plan.final_layer_count < 2:
            return PENALTY_SCORE
        compressed = apply_plan(self.model, plan)
        if kind is FitnessKind.MODULE_SIMILARITY:
            score = self._similarity(compressed, plan)
        elif kind is FitnessKind.NEG_KL_DIVERGENCE:
            score = self._neg_kl(compressed)
        elif kind is FitnessKind.NEG_PERPLEXITY:
            score = self._neg_perplexity(compressed)
        else:  # pragma: no cover - enum is closed
            raise ValueError(f"unknown fitness kind {kind!r}")
        if not np.isfinite(score):
            logger.warning(
                "non-finite %s score for plan %s, substituting penalty",
                kind.value,
                canonical_key(plan),
            )
            return PENALTY_SCORE
        return float(score)

    def _similarity(self, compressed: TransformerModel, plan: ResolvedPlan) -> float:
        layer_map = similarity_map(plan, self.model.config.n_layers)
        total = 0.0
        for (seq, (_, base_trace)) in zip(self.calibration.sequences, self._base()):
            _, comp_trace = forward(compressed, seq, capture=True)
            total += module_similarity(base_trace, comp_trace, layer_map).overall
        return total / len(self.calibration)

    def _neg_kl(self, compressed: TransformerModel) -> float:
        total = 0.0
        for seq, (base_logits, _) in zip(self.calibration.sequences, self._base()):
            comp_logits, _ = forward(compressed, seq)
            total += mean_kl(base_logits, comp_logits)
        return -total / len(self.calibration)

    def _neg_perplexity(self, compressed: TransformerModel) -> float:
        return -dataset_perplexity(compressed, self.calibration)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mean_kl(base_logits: np.ndarray, comp_logits: np.ndarray) -> float:
    """Mean over positions of KL(base || compressed), probabilities floored at 1e-12."""
    base_p = np.maximum(np.exp(_log_softmax(base_logits)), _PROB_FLOOR)
    comp_p = np.maximum(np.exp(_log_softmax(comp_logits)), _PROB_FLOOR)
    per_position = np.sum(base_p * (np.log(base_p) - np.log(comp_p)), axis=-1)
    return float(per_position.mean())


def dataset_perplexity(model: TransformerModel, calibration: CalibrationSet) -> float:
    """Next-byte perplexity over all calibration positions, in float64.

    Sentences shorter than two tokens contribute no predictions; at least one
    usable sentence is required.
    """
    nll_sum = 0.0
    count = 0
    for seq in calibration.sequences:
        if len(seq) < 2:
            continue
        logits, _ = forward(model, seq)
        logp = _log_softmax(logits[:-1])
        targets = np.asarray(seq[1:], dtype=np.int64)
        nll_sum -= float(logp[np.arange(len(targets)), targets].sum())
        count += len(targets)
    if count == 0:
        raise CalibrationError(
            "perplexity needs at least one sentence of two or more tokens"
        )
    return float(np.exp(nll_sum / count))


def evaluate(
    model: TransformerModel,
    plan: ResolvedPlan,
    calibration: CalibrationSet,
    kind: FitnessKind,
    cache: FitnessCache | None = None,
) -> float:
    """One-shot convenience wrapper around :class:`FitnessEvaluator`."""
    return FitnessEvaluator(model, calibration, cache=cache).evaluate_plan(plan, kind)
