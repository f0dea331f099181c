"""Customers, sessions, category vocabularies, dataset files, and splits.

Datasets live on disk as UTF-8 JSONL, one customer per line:

    {"customer_id": "c1", "sessions": [{"day": 0, "categories": ["dairy"]}]}

with a companion vocab file holding a JSON array of category names. PAD and
BOS ids are implicit: PAD = len(categories), BOS = len(categories) + 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPOCH_DATE = "1970-01-01"


class DataError(ValueError):
    """Invalid dataset content or structure."""


class UnknownCategoryError(DataError):
    """A category name or id is not in the vocabulary."""


@dataclass(frozen=True)
class CategoryVocab:
    """Dense category ids [0, n) plus the two trailing special tokens."""

    categories: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise DataError("vocabulary contains duplicate category names")
        if not self.categories:
            raise DataError("vocabulary is empty")

    @property
    def pad_id(self) -> int:
        return len(self.categories)

    @property
    def bos_id(self) -> int:
        return len(self.categories) + 1

    @property
    def size(self) -> int:
        return len(self.categories) + 2

    @property
    def num_real(self) -> int:
        return len(self.categories)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.categories)}

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownCategoryError(f"unknown category name: {name!r}") from None

    def name_of(self, cat_id: int) -> str:
        if 0 <= cat_id < len(self.categories):
            return self.categories[cat_id]
        if cat_id == self.pad_id:
            return "<pad>"
        if cat_id == self.bos_id:
            return "<bos>"
        raise UnknownCategoryError(f"category id {cat_id} out of range")

    def is_special(self, cat_id: int) -> bool:
        return cat_id in (self.pad_id, self.bos_id)


@dataclass(frozen=True)
class Session:
    """One shopping event: a day stamp and a deduplicated category set.

    Categories are stored as a sorted tuple so iteration order is canonical.
    """

    day: int
    categories: tuple[int, ...]

    def __post_init__(self):
        if self.day < 0:
            raise DataError(f"session day must be >= 0, got {self.day}")
        if not self.categories:
            raise DataError("session has no categories")
        if list(self.categories) != sorted(set(self.categories)):
            object.__setattr__(self, "categories", tuple(sorted(set(self.categories))))

    @property
    def category_set(self) -> frozenset[int]:
        return frozenset(self.categories)


@dataclass(frozen=True)
class CustomerHistory:
    """Sessions in strictly increasing day order for one customer."""

    customer_id: str
    sessions: tuple[Session, ...]

    def __post_init__(self):
        days = [s.day for s in self.sessions]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError(
                f"customer {self.customer_id!r}: sessions must be strictly "
                f"sorted by day, got days {days}"
            )

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def drop_last_session(self) -> "CustomerHistory":
        return CustomerHistory(self.customer_id, self.sessions[:-1])


@dataclass
class Dataset:
    vocab: CategoryVocab
    customers: list[CustomerHistory]
    epoch_date: str = DEFAULT_EPOCH_DATE

    def validate(self) -> None:
        n = self.vocab.num_real
        for cust in self.customers:
            for sess in cust.sessions:
                for cat in sess.categories:
                    if not (0 <= cat < n):
                        raise UnknownCategoryError(
                            f"customer {cust.customer_id!r}: category id {cat} "
                            f"not in vocabulary of size {n}"
                        )

    @property
    def num_sessions(self) -> int:
        return sum(c.num_sessions for c in self.customers)


@dataclass
class SplitDataset:
    """Train/validation model histories plus one held-out final basket each."""

    train: Dataset
    validation: Dataset
    test_pairs: list[tuple[CustomerHistory, Session]] = field(default_factory=list)


def load_vocab(path: str | Path) -> CategoryVocab:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
        raise DataError(f"vocab file {path} must be a JSON array of strings")
    return CategoryVocab(tuple(raw))


def save_vocab(vocab: CategoryVocab, path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(vocab.categories)) + "\n", encoding="utf-8")


def load_dataset(path: str | Path, vocab: CategoryVocab) -> Dataset:
    """Parse and validate a JSONL dataset.

    Sessions are sorted by day, same-day sessions merged (category union),
    in-session duplicates dropped with one warning carrying the total count,
    and days shifted so the earliest session in the file is day 0.
    """
    customers: list[CustomerHistory] = []
    dup_count = 0
    min_day: int | None = None
    parsed: list[tuple[str, dict[int, set[int]]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from e
            try:
                cid = obj["customer_id"]
                sessions = obj["sessions"]
            except (TypeError, KeyError) as e:
                raise DataError(
                    f"{path}: line {lineno}: expected customer_id and sessions"
                ) from e
            if not isinstance(cid, str) or not isinstance(sessions, list) or not sessions:
                raise DataError(
                    f"{path}: line {lineno}: customer_id must be a string and "
                    f"sessions a non-empty list"
                )
            by_day: dict[int, set[int]] = {}
            for sess in sessions:
                try:
                    day = int(sess["day"])
                    names = sess["categories"]
                except (TypeError, KeyError, ValueError) as e:
                    raise DataError(
                        f"{path}: line {lineno}: each session needs an integer "
                        f"day and a categories list"
                    ) from e
                if day < 0:
                    raise DataError(f"{path}: line {lineno}: negative day {day}")
                try:
                    ids = [vocab.id_of(name) for name in names]
                except UnknownCategoryError as e:
                    raise UnknownCategoryError(f"{path}: line {lineno}: {e}") from None
                if not ids:
                    raise DataError(f"{path}: line {lineno}: empty session (day {day})")
                dup_count += len(ids) - len(set(ids))
                by_day.setdefault(day, set()).update(ids)
                min_day = day if min_day is None else min(min_day, day)
            parsed.append((cid, by_day))
    shift = min_day or 0
    for cid, by_day in parsed:
        sessions = tuple(
            Session(day - shift, tuple(sorted(cats)))
            for day, cats in sorted(by_day.items())
        )
        customers.append(CustomerHistory(cid, sessions))
    if dup_count:
        log.warning("load_dataset(%s): dropped %d duplicate category entries", path, dup_count)
    ds = Dataset(vocab=vocab, customers=customers)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cust in ds.customers:
            obj = {
                "customer_id": cust.customer_id,
                "sessions": [
                    {
                        "day": s.day,
                        "categories": [ds.vocab.name_of(c) for c in s.categories],
                    }
                    for s in cust.sessions
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def filter_eligible(ds: Dataset, min_sessions: int) -> Dataset:
    """Keep only customers with at least ``min_sessions`` sessions."""
    if min_sessions < 1:
        raise ValueError(f"min_sessions must be >= 1, got {min_sessions}")
    kept = [c for c in ds.customers if c.num_sessions >= min_sessions]
    return Dataset(vocab=ds.vocab, customers=kept, epoch_date=ds.epoch_date)


def holdout_split(ds: Dataset, val_frac: float, seed: int) -> SplitDataset:
    """Hold out each customer's final session; split the rest by customer.

    Every customer contributes one test pair (history minus final session,
    final session). The remaining histories are partitioned into train and
    validation at the customer level by a seeded shuffle.
    """
    if not 0.0 < val_frac < 1.0:
        raise ValueError(f"val_frac must be in (0, 1), got {val_frac}")
    for cust in ds.customers:
        if cust.num_sessions < 2:
            raise DataError(
                f"customer {cust.customer_id!r} has {cust.num_sessions} session(s); "
                f"cannot hold out the final basket"
            )
    n = len(ds.customers)
    if n < 2:
        raise DataError(f"need at least 2 customers to split, got {n}")
    histories = [c.drop_last_session() for c in ds.customers]
    test_pairs = [(h, c.sessions[-1]) for h, c in zip(histories, ds.customers)]

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = min(max(1, round(n * val_frac)), n - 1)
    val_idx = set(order[:n_val].tolist())
    train = [histories[i] for i in range(n) if i not in val_idx]
    val = [histories[i] for i in range(n) if i in val_idx]
    return SplitDataset(
        train=Dataset(ds.vocab, train, ds.epoch_date),
        validation=Dataset(ds.vocab, val, ds.epoch_date),
        test_pairs=test_pairs,
    )
