"""Synthetic purchase histories with planted temporal structure.

Four customer archetypes:

- frequency: each category joins a session independently with a fixed
  per-customer probability (a frequency baseline predicts these well);
- alternating: sessions swing between two disjoint category bundles, so
  frequency ranking carries no signal but the sequence does;
- periodic: a marker category shows up in every r-th session on top of a
  noisy base basket;
- complementary: planted category pairs co-occur within sessions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CategoryVocab, CustomerHistory, Dataset, Session

ARCHETYPES = ("frequency", "alternating", "periodic", "complementary")


class InvalidConfigError(ValueError):
    """A synthetic-data configuration value is out of range."""


@dataclass
class SyntheticConfig:
    num_customers: int = 200
    num_categories: int = 35
    sessions_min: int = 4
    sessions_max: int = 12
    gap_min_days: int = 1
    gap_max_days: int = 14
    archetype_mix: dict[str, float] = field(
        default_factory=lambda: {
            "frequency": 0.4,
            "alternating": 0.2,
            "periodic": 0.2,
            "complementary": 0.2,
        }
    )
    # frequency archetype
    liked_categories: int = 3
    liked_prob: float = 0.85
    base_prob: float = 0.02
    # alternating archetype
    bundle_size: int = 3
    # periodic archetype
    period: int = 3
    # complementary archetype
    pair_count: int = 2
    pair_prob: float = 0.9

    def validate(self) -> None:
        if self.num_customers < 1:
            raise InvalidConfigError(f"num_customers must be >= 1, got {self.num_customers}")
        if self.num_categories < 2:
            raise InvalidConfigError(f"num_categories must be >= 2, got {self.num_categories}")
        if not 1 <= self.sessions_min <= self.sessions_max:
            raise InvalidConfigError(
                f"invalid sessions range [{self.sessions_min}, {self.sessions_max}]"
            )
        if not 1 <= self.gap_min_days <= self.gap_max_days:
            raise InvalidConfigError(
                f"invalid gap range [{self.gap_min_days}, {self.gap_max_days}]"
            )
        if not self.archetype_mix:
            raise InvalidConfigError("archetype_mix is empty")
        for name, weight in self.archetype_mix.items():
            if name not in ARCHETYPES:
                raise InvalidConfigError(f"unknown archetype {name!r}")
            if weight < 0:
                raise InvalidConfigError(f"negative weight for archetype {name!r}")
        if sum(self.archetype_mix.values()) <= 0:
            raise InvalidConfigError("archetype_mix weights sum to zero")
        if not 0 < self.liked_prob <= 1 or not 0 <= self.base_prob <= 1:
            raise InvalidConfigError("liked_prob/base_prob out of [0, 1]")
        if not 1 <= self.liked_categories <= self.num_categories:
            raise InvalidConfigError("liked_categories out of range")
        if not 1 <= 2 * self.bundle_size <= self.num_categories:
            raise InvalidConfigError(
                f"bundle_size {self.bundle_size} needs 2*bundle_size <= num_categories"
            )
        if self.period < 2:
            raise InvalidConfigError(f"period must be >= 2, got {self.period}")
        if not 1 <= 2 * self.pair_count <= self.num_categories:
            raise InvalidConfigError("pair_count needs 2*pair_count <= num_categories")
        if not 0 <= self.pair_prob <= 1:
            raise InvalidConfigError("pair_prob out of [0, 1]")


def default_vocab(num_categories: int) -> CategoryVocab:
    return CategoryVocab(tuple(f"cat_{i:03d}" for i in range(num_categories)))


def frequency_baskets(
    rng: np.random.Generator, inclusion_probs: np.ndarray, n_sessions: int
) -> list[set[int]]:
    """Each category joins each session independently with its own probability."""
    probs = np.asarray(inclusion_probs, dtype=float)
    top = int(np.argmax(probs))
    baskets = []
    for _ in range(n_sessions):
        included = np.flatnonzero(rng.random(probs.shape) < probs)
        basket = set(included.tolist()) or {top}
        baskets.append(basket)
    return baskets


def alternating_baskets(
    bundle_a: set[int], bundle_b: set[int], n_sessions: int
) -> list[set[int]]:
    """Session 2i is exactly bundle A, session 2i+1 exactly bundle B."""
    if bundle_a & bundle_b:
        raise InvalidConfigError("alternating bundles must be disjoint")
    return [set(bundle_a) if i % 2 == 0 else set(bundle_b) for i in range(n_sessions)]


def periodic_baskets(
    rng: np.random.Generator,
    base_probs: np.ndarray,
    marker: int,
    period: int,
    n_sessions: int,
) -> list[set[int]]:
    """Noisy base baskets, plus ``marker`` in every ``period``-th session."""
    baskets = frequency_baskets(rng, base_probs, n_sessions)
    for i, basket in enumerate(baskets):
        basket.discard(marker)
        if (i + 1) % period == 0:
            basket.add(marker)
        if not basket:
            basket.add(int(np.argmax(base_probs)))
    return baskets


def complementary_baskets(
    rng: np.random.Generator,
    base_probs: np.ndarray,
    pairs: list[tuple[int, int]],
    pair_prob: float,
    n_sessions: int,
) -> list[set[int]]:
    """Base baskets where each planted pair's partner tags along."""
    baskets = frequency_baskets(rng, base_probs, n_sessions)
    for basket in baskets:
        for a, b in pairs:
            if a in basket and rng.random() < pair_prob:
                basket.add(b)
    return baskets


def _session_days(rng: np.random.Generator, cfg: SyntheticConfig, n_sessions: int) -> list[int]:
    start = int(rng.integers(0, cfg.gap_max_days + 1))
    days = [start]
    for _ in range(n_sessions - 1):
        days.append(days[-1] + int(rng.integers(cfg.gap_min_days, cfg.gap_max_days + 1)))
    return days


def _draw_archetype(rng: np.random.Generator, cfg: SyntheticConfig) -> str:
    names = sorted(cfg.archetype_mix)
    weights = np.array([cfg.archetype_mix[n] for n in names], dtype=float)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def _customer_baskets(
    rng: np.random.Generator, cfg: SyntheticConfig, archetype: str, n_sessions: int
) -> list[set[int]]:
    n_cat = cfg.num_categories
    if archetype == "frequency":
        liked = rng.choice(n_cat, size=cfg.liked_categories, replace=False)
        probs = np.full(n_cat, cfg.base_prob)
        probs[liked] = cfg.liked_prob
        return frequency_baskets(rng, probs, n_sessions)
    if archetype == "alternating":
        chosen = rng.choice(n_cat, size=2 * cfg.bundle_size, replace=False)
        bundle_a = set(chosen[: cfg.bundle_size].tolist())
        bundle_b = set(chosen[cfg.bundle_size :].tolist())
        return alternating_baskets(bundle_a, bundle_b, n_sessions)
    if archetype == "periodic":
        pool = rng.choice(n_cat, size=min(4, n_cat - 1), replace=False)
        probs = np.zeros(n_cat)
        probs[pool] = 0.5
        marker_options = np.setdiff1d(np.arange(n_cat), pool)
        marker = int(marker_options[rng.integers(len(marker_options))])
        return periodic_baskets(rng, probs, marker, cfg.period, n_sessions)
    if archetype == "complementary":
        chosen = rng.choice(n_cat, size=2 * cfg.pair_count, replace=False)
        pairs = [
            (int(chosen[2 * i]), int(chosen[2 * i + 1])) for i in range(cfg.pair_count)
        ]
        probs = np.full(n_cat, 0.05)
        probs[[a for a, _ in pairs]] = 0.6
        return complementary_baskets(rng, probs, pairs, cfg.pair_prob, n_sessions)
    raise InvalidConfigError(f"unknown archetype {archetype!r}")


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> Dataset:
    """Deterministic dataset generation; the archetype is recorded in each
    customer id suffix (``c00012_alternating``)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    vocab = default_vocab(cfg.num_categories)
    customers = []
    for i in range(cfg.num_customers):
        archetype = _draw_archetype(rng, cfg)
        n_sessions = int(rng.integers(cfg.sessions_min, cfg.sessions_max + 1))
        baskets = _customer_baskets(rng, cfg, archetype, n_sessions)
        days = _session_days(rng, cfg, n_sessions)
        sessions = tuple(
            Session(day, tuple(sorted(basket))) for day, basket in zip(days, baskets)
        )
        customers.append(CustomerHistory(f"c{i:05d}_{archetype}", sessions))
    min_day = min(c.sessions[0].day for c in customers)
    if min_day:
        customers = [
            CustomerHistory(
                c.customer_id,
                tuple(Session(s.day - min_day, s.categories) for s in c.sessions),
            )
            for c in customers
        ]
    ds = Dataset(vocab=vocab, customers=customers)
    ds.validate()
    return ds


def archetype_counts(ds: Dataset) -> dict[str, int]:
    """Count customers per archetype from the id suffix convention."""
    counts: dict[str, int] = {}
    for cust in ds.customers:
        name = cust.customer_id.rsplit("_", 1)[-1]
        key = name if name in ARCHETYPES else "other"
        counts[key] = counts.get(key, 0) + 1
    return counts
