"""Basket generation, the personal top-frequency baseline, and metrics.

A "system" is any ``predict(history, k) -> RankedBasket`` callable; the
evaluator scores each customer's held-out final basket against the
prediction made from the rest of their history, then aggregates
recall@k / precision@k tables, a rank-matching matrix, and segment
breakdowns by customer tenure and held-out basket size.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import CategoryVocab, CustomerHistory, Session, SplitDataset
from .model import TrexModel
from .sampler import TokenSequence, encoder_sequence

DEFAULT_KS = tuple(range(2, 15))
DEFAULT_RANK_DEPTH = 10
BUCKET_K = 10

GENERATION_MODES = ("one_shot", "autoregressive")

TENURE_BUCKETS = (("1-2", 1, 2), ("3-4", 3, 4), ("5-7", 5, 7), ("8-10", 8, 10), ("10+", 11, None))
BASKET_BUCKETS = (("<5", 0, 4), ("5-14", 5, 14), ("15-29", 15, 29), ("30+", 30, None))


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class RankedBasket:
    """Categories in recommendation order with non-increasing scores."""

    items: tuple[tuple[int, float], ...]

    def __post_init__(self):
        ids = [c for c, _ in self.items]
        if len(set(ids)) != len(ids):
            raise EvalError(f"duplicate categories in ranked basket: {ids}")
        scores = [s for _, s in self.items]
        if any(b > a + 1e-12 for a, b in zip(scores, scores[1:])):
            raise EvalError(f"scores must be non-increasing, got {scores}")

    def top(self, k: int) -> tuple[int, ...]:
        return tuple(c for c, _ in self.items[:k])

    def ids(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.items)

    def __len__(self) -> int:
        return len(self.items)


def ptop(history: CustomerHistory, k: int) -> RankedBasket:
    """Rank categories by how many sessions contained them.

    Ties break toward the smaller category id; scores are the raw session
    counts. Returns fewer than k entries when the customer has fewer
    distinct categories.
    """
    if history.num_sessions == 0:
        raise EvalError(f"customer {history.customer_id!r} has an empty history")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    counts: Counter[int] = Counter()
    for sess in history.sessions:
        counts.update(sess.category_set)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return RankedBasket(tuple((c, float(n)) for c, n in ranked[:k]))


def frequency_ranking(history: CustomerHistory) -> list[int]:
    """All distinct categories in P-Top order (the "true rank" ordering)."""
    return list(ptop(history, k=10**9).ids())


def _real_category_probs(logits_row: np.ndarray, vocab: CategoryVocab) -> np.ndarray:
    """Softmax over real categories only; specials are excluded up front."""
    real = logits_row[: vocab.num_real]
    shifted = real - real.max()
    e = np.exp(shifted)
    return e / e.sum()


def generate_basket(
    ckpt: Checkpoint,
    history: CustomerHistory,
    k: int,
    mode: str = "one_shot",
    prefix: Sequence[int] = (),
) -> RankedBasket:
    """Predict the next basket from a trained model.

    The pivot sits one day after the last session, so the whole history is
    encoder context and the decoder starts at offset 0. ``one_shot`` ranks
    the first step's distribution; ``autoregressive`` greedily feeds picks
    back in, masking already-emitted categories, and scores each pick by
    the probability of the emitted prefix (non-increasing by construction).
    ``prefix`` seeds the decoder with categories already in the basket
    (mid-session generation); those are never re-recommended.
    """
    if mode not in GENERATION_MODES:
        raise EvalError(f"mode must be one of {GENERATION_MODES}, got {mode!r}")
    vocab = ckpt.vocab
    if history.num_sessions == 0:
        raise EvalError(f"customer {history.customer_id!r} has an empty history")
    prefix = tuple(prefix)
    for cat in prefix:
        if not 0 <= cat < vocab.num_real:
            raise EvalError(f"prefix category id {cat} is not a real category")
    if len(set(prefix)) != len(prefix):
        raise EvalError("prefix contains duplicate categories")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    if k + len(prefix) > vocab.num_real:
        raise EvalError(
            f"cannot pick {k} fresh categories: vocabulary has {vocab.num_real}, "
            f"prefix already uses {len(prefix)}"
        )

    cfg = ckpt.model_config
    model = TrexModel(cfg, ckpt.params)
    pivot = history.sessions[-1].day + 1
    enc = encoder_sequence(history, pivot, cfg.n_enc, vocab)
    memory = model.encode(enc)

    def step_probs(dec_tokens: list[int], banned: set[int]) -> np.ndarray:
        """Distribution over real categories, banned ids zeroed and the
        rest renormalized."""
        n = len(dec_tokens)
        dec = TokenSequence(
            np.asarray(dec_tokens, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.ones(n, dtype=bool),
        )
        logits = model.decode(dec, memory, enc.pad_mask)
        probs = _real_category_probs(logits.data[-1], vocab)
        if banned:
            probs = probs.copy()
            probs[sorted(banned)] = 0.0
        total = probs.sum()
        if total <= 0.0:
            raise EvalError("all remaining categories have zero probability")
        return probs / total

    if mode == "one_shot":
        probs = step_probs([vocab.bos_id, *prefix], set(prefix))
        order = np.lexsort((np.arange(vocab.num_real), -probs))[:k]
        return RankedBasket(tuple((int(c), float(probs[c])) for c in order))

    emitted: list[int] = []
    scores: list[float] = []
    joint = 1.0
    for _ in range(k):
        probs = step_probs([vocab.bos_id, *prefix, *emitted], set(prefix) | set(emitted))
        pick = int(np.argmax(probs))  # argmax takes the smallest id on ties
        joint *= float(probs[pick])
        emitted.append(pick)
        scores.append(joint)
    return RankedBasket(tuple(zip(emitted, scores)))


def model_system(ckpt: Checkpoint, mode: str = "one_shot") -> Callable[[CustomerHistory, int], RankedBasket]:
    def predict(history: CustomerHistory, k: int) -> RankedBasket:
        return generate_basket(ckpt, history, k, mode=mode)

    return predict


def ptop_system() -> Callable[[CustomerHistory, int], RankedBasket]:
    return ptop


def recall_at_k(predicted: RankedBasket, actual: Iterable[int], k: int) -> float:
    """|top-k intersected with actual| / |actual|."""
    actual = set(actual)
    if not actual:
        raise EvalError("actual basket is empty")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    return len(set(predicted.top(k)) & actual) / len(actual)


def precision_at_k(predicted: RankedBasket, actual: Iterable[int], k: int) -> float:
    """|top-k intersected with actual| / k, even when fewer than k were predicted."""
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    actual = set(actual)
    return len(set(predicted.top(k)) & actual) / k


@dataclass(frozen=True)
class RankMatchResult:
    pairs: tuple[tuple[int, int], ...]  # (true_rank, predicted_rank), 1-based
    misses: int


def rank_match(history: CustomerHistory, predicted: RankedBasket, depth: int) -> RankMatchResult:
    """Pair each top-``depth`` true-frequency rank with its predicted position.

    Categories whose true rank is within ``depth`` but that never appear in
    the prediction are counted as misses.
    """
    true_order = frequency_ranking(history)[:depth]
    position = {c: i + 1 for i, c in enumerate(predicted.ids())}
    pairs = []
    misses = 0
    for true_rank, cat in enumerate(true_order, start=1):
        if cat in position:
            pairs.append((true_rank, position[cat]))
        else:
            misses += 1
    return RankMatchResult(tuple(pairs), misses)


@dataclass
class KMetrics:
    k: int
    recall_mean: float
    recall_q25: float
    recall_median: float
    recall_q75: float
    precision_mean: float
    precision_q25: float
    precision_median: float
    precision_q75: float


@dataclass
class BucketMetrics:
    label: str
    count: int
    recall_mean: float | None


@dataclass
class EvalReport:
    system: str
    num_customers: int
    ks: tuple[int, ...]
    per_k: list[KMetrics]
    rank_depth: int
    rank_matrix: np.ndarray  # (depth, depth) counts
    rank_misses: int
    exact_match_fraction: float
    within_one_fraction: float
    tenure_buckets: list[BucketMetrics]
    basket_size_buckets: list[BucketMetrics]

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "num_customers": self.num_customers,
            "ks": list(self.ks),
            "per_k": [vars(m).copy() for m in self.per_k],
            "rank_depth": self.rank_depth,
            "rank_matrix": self.rank_matrix.tolist(),
            "rank_misses": self.rank_misses,
            "exact_match_fraction": self.exact_match_fraction,
            "within_one_fraction": self.within_one_fraction,
            "tenure_buckets": [vars(b).copy() for b in self.tenure_buckets],
            "basket_size_buckets": [vars(b).copy() for b in self.basket_size_buckets],
        }


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    q25, q50, q75 = np.percentile(values, [25.0, 50.0, 75.0])
    return float(q25), float(q50), float(q75)


def _bucket_label(value: int, buckets) -> str:
    for label, lo, hi in buckets:
        if value >= lo and (hi is None or value <= hi):
            return label
    return buckets[-1][0]


def evaluate(
    predict: Callable[[CustomerHistory, int], RankedBasket],
    split: SplitDataset,
    system: str = "model",
    ks: Sequence[int] = DEFAULT_KS,
    rank_depth: int = DEFAULT_RANK_DEPTH,
) -> EvalReport:
    """Score a system over every held-out final basket in the split.

    Predictions are requested once per customer at the largest needed k
    (capped by the vocabulary); the rank-matching matrix uses the top
    ``rank_depth`` slice so predicted ranks never exceed the matrix.
    """
    if not split.test_pairs:
        raise EvalError("split has no test pairs")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise EvalError(f"invalid ks {ks}")
    vocab = split.train.vocab
    pairs = sorted(split.test_pairs, key=lambda p: p[0].customer_id)

    want = max(max(ks), rank_depth, BUCKET_K)
    k_request = min(want, vocab.num_real)
    recalls: dict[int, list[float]] = {k: [] for k in ks}
    precisions: dict[int, list[float]] = {k: [] for k in ks}
    bucket_recalls: dict[str, list[float]] = {}
    size_recalls: dict[str, list[float]] = {}
    matrix = np.zeros((rank_depth, rank_depth), dtype=np.int64)
    misses = 0

    for history, target in pairs:
        predicted = predict(history, k_request)
        actual = target.category_set
        for k in ks:
            recalls[k].append(recall_at_k(predicted, actual, k))
            precisions[k].append(precision_at_k(predicted, actual, k))
        r10 = recall_at_k(predicted, actual, BUCKET_K)
        tenure = _bucket_label(history.num_sessions, TENURE_BUCKETS)
        size = _bucket_label(len(actual), BASKET_BUCKETS)
        bucket_recalls.setdefault(tenure, []).append(r10)
        size_recalls.setdefault(size, []).append(r10)

        top_r = RankedBasket(predicted.items[:rank_depth])
        result = rank_match(history, top_r, rank_depth)
        misses += result.misses
        for i, j in result.pairs:
            matrix[i - 1, j - 1] += 1

    per_k = []
    for k in ks:
        r = np.array(recalls[k])
        p = np.array(precisions[k])
        rq = _quartiles(r)
        pq = _quartiles(p)
        per_k.append(
            KMetrics(
                k=k,
                recall_mean=float(r.mean()),
                recall_q25=rq[0],
                recall_median=rq[1],
                recall_q75=rq[2],
                precision_mean=float(p.mean()),
                precision_q25=pq[0],
                precision_median=pq[1],
                precision_q75=pq[2],
            )
        )

    total = int(matrix.sum())
    exact = float(np.trace(matrix) / total) if total else 0.0
    within = (
        float(
            sum(
                matrix[i, j]
                for i in range(rank_depth)
                for j in range(rank_depth)
                if abs(i - j) <= 1
            )
            / total
        )
        if total
        else 0.0
    )
    tenure_buckets = [
        BucketMetrics(
            label,
            len(bucket_recalls.get(label, [])),
            float(np.mean(bucket_recalls[label])) if label in bucket_recalls else None,
        )
        for label, _, _ in TENURE_BUCKETS
    ]
    size_buckets = [
        BucketMetrics(
            label,
            len(size_recalls.get(label, [])),
            float(np.mean(size_recalls[label])) if label in size_recalls else None,
        )
        for label, _, _ in BASKET_BUCKETS
    ]
    return EvalReport(
        system=system,
        num_customers=len(pairs),
        ks=ks,
        per_k=per_k,
        rank_depth=rank_depth,
        rank_matrix=matrix,
        rank_misses=misses,
        exact_match_fraction=exact,
        within_one_fraction=within,
        tenure_buckets=tenure_buckets,
        basket_size_buckets=size_buckets,
    )
