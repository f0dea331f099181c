"""Dynamic sequence splitting: pivots, encoder/decoder sequences, batches.

A training sample is made by drawing a pivot day inside a customer's
history: everything strictly before the pivot becomes encoder context
(most recent ``n_enc`` tokens kept), and the first ``n_dec`` tokens dated
at or after the pivot become the decoder targets. Day offsets are relative
to the pivot, so encoder offsets are <= 0 and decoder offsets >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CategoryVocab, CustomerHistory, Dataset


class SamplerError(ValueError):
    """A history cannot be split at the requested pivot."""


@dataclass
class TokenSequence:
    tokens: np.ndarray  # int64 (n,)
    day_offsets: np.ndarray  # int64 (n,)
    pad_mask: np.ndarray  # bool (n,), True = real token

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TrainingSample:
    enc: TokenSequence
    dec_input: TokenSequence
    dec_target: np.ndarray  # int64 (n_dec,), PAD where unfilled
    target_mask: np.ndarray  # bool (n_dec,), True = real target
    pivot_day: int


@dataclass
class Batch:
    """Stacked samples plus the three attention masks.

    - encoder self-attention mask excludes only PAD positions;
    - decoder causal mask[i][j] is true iff j <= i and both are real;
    - cross mask pairs real decoder queries with real encoder keys.
    """

    enc_tokens: np.ndarray  # int64 (B, n_enc)
    enc_offsets: np.ndarray
    enc_pad: np.ndarray  # bool (B, n_enc)
    dec_tokens: np.ndarray  # int64 (B, n_dec)
    dec_offsets: np.ndarray
    dec_pad: np.ndarray
    targets: np.ndarray  # int64 (B, n_dec)
    target_mask: np.ndarray  # bool (B, n_dec)
    enc_attn_mask: np.ndarray  # bool (B, n_enc, n_enc)
    dec_causal_mask: np.ndarray  # bool (B, n_dec, n_dec)
    cross_mask: np.ndarray  # bool (B, n_dec, n_enc)
    pivot_days: np.ndarray  # int64 (B,)

    @property
    def size(self) -> int:
        return self.enc_tokens.shape[0]

    def enc_seq(self, b: int) -> TokenSequence:
        return TokenSequence(self.enc_tokens[b], self.enc_offsets[b], self.enc_pad[b])

    def dec_seq(self, b: int) -> TokenSequence:
        return TokenSequence(self.dec_tokens[b], self.dec_offsets[b], self.dec_pad[b])


def flatten_history(
    history: CustomerHistory,
    upto_day: int,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, int]]:
    """Emit (category id, day) pairs for sessions up to ``upto_day``.

    Within a session tokens come in ascending-id order, or in a seeded
    shuffle order when ``rng`` is given. Pairs are ordered by day first.
    """
    out: list[tuple[int, int]] = []
    for sess in history.sessions:
        if sess.day > upto_day:
            break
        cats: list[int] = list(sess.categories)
        if rng is not None:
            cats = [cats[i] for i in rng.permutation(len(cats))]
        out.extend((c, sess.day) for c in cats)
    return out


def sample_pivot_time(
    history: CustomerHistory,
    rng: np.random.Generator,
    max_retries: int = 16,
) -> int:
    """Draw a pivot day: uniform timestamp, snapped to the nearest session.

    The pivot must leave at least one session strictly before it; ineligible
    draws are retried, and after ``max_retries`` the second session's day is
    used (always eligible).
    """
    if history.num_sessions < 2:
        raise SamplerError(
            f"customer {history.customer_id!r} has a single session; cannot pivot"
        )
    days = [s.day for s in history.sessions]
    first = days[0]
    for _ in range(max_retries):
        t = rng.uniform(days[0], days[-1])
        # nearest session day; equidistant ties go to the later day
        pivot = min(days, key=lambda d: (abs(d - t), -d))
        if pivot > first:
            return pivot
    return days[1]


def _pad_to(values: list[int], length: int, fill: int) -> np.ndarray:
    arr = np.full(length, fill, dtype=np.int64)
    arr[: len(values)] = values[:length]
    return arr


def encoder_sequence(
    history: CustomerHistory,
    pivot_day: int,
    n_enc: int,
    vocab: CategoryVocab,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """Tokens strictly before the pivot, most recent ``n_enc`` kept."""
    past = [(c, d) for c, d in flatten_history(history, pivot_day - 1, rng) if d < pivot_day]
    if not past:
        raise SamplerError(
            f"customer {history.customer_id!r}: no purchases before pivot day {pivot_day}"
        )
    past = past[-n_enc:]
    tokens = _pad_to([c for c, _ in past], n_enc, vocab.pad_id)
    offsets = _pad_to([d - pivot_day for _, d in past], n_enc, 0)
    pad_mask = np.zeros(n_enc, dtype=bool)
    pad_mask[: len(past)] = True
    return TokenSequence(tokens, offsets, pad_mask)


def split_at_pivot(
    history: CustomerHistory,
    pivot_day: int,
    n_enc: int,
    n_dec: int,
    vocab: CategoryVocab,
    rng: np.random.Generator | None = None,
) -> TrainingSample:
    """Build one teacher-forcing sample around a pivot day."""
    enc = encoder_sequence(history, pivot_day, n_enc, vocab, rng)
    last_day = history.sessions[-1].day
    future = [
        (c, d) for c, d in flatten_history(history, last_day, rng) if d >= pivot_day
    ]
    future = future[:n_dec]
    targets = _pad_to([c for c, _ in future], n_dec, vocab.pad_id)
    target_mask = np.zeros(n_dec, dtype=bool)
    target_mask[: len(future)] = True
    target_offsets = [d - pivot_day for _, d in future]

    dec_tokens = np.full(n_dec, vocab.pad_id, dtype=np.int64)
    dec_offsets = np.zeros(n_dec, dtype=np.int64)
    dec_pad = np.zeros(n_dec, dtype=bool)
    dec_tokens[0] = vocab.bos_id
    dec_pad[0] = True
    n_shift = min(len(future), n_dec - 1)
    dec_tokens[1 : 1 + n_shift] = targets[:n_shift]
    dec_offsets[1 : 1 + n_shift] = target_offsets[:n_shift]
    dec_pad[1 : 1 + n_shift] = True

    return TrainingSample(
        enc=enc,
        dec_input=TokenSequence(dec_tokens, dec_offsets, dec_pad),
        dec_target=targets,
        target_mask=target_mask,
        pivot_day=pivot_day,
    )


def build_masks(enc_pad: np.ndarray, dec_pad: np.ndarray):
    """The three attention masks for a stack of padded samples."""
    enc_attn = enc_pad[:, :, None] & enc_pad[:, None, :]
    n_dec = dec_pad.shape[1]
    causal = np.tril(np.ones((n_dec, n_dec), dtype=bool))
    dec_causal = causal[None, :, :] & dec_pad[:, :, None] & dec_pad[:, None, :]
    cross = dec_pad[:, :, None] & enc_pad[:, None, :]
    return enc_attn, dec_causal, cross


def stack_samples(samples: list[TrainingSample]) -> Batch:
    enc_pad = np.stack([s.enc.pad_mask for s in samples])
    dec_pad = np.stack([s.dec_input.pad_mask for s in samples])
    enc_attn, dec_causal, cross = build_masks(enc_pad, dec_pad)
    return Batch(
        enc_tokens=np.stack([s.enc.tokens for s in samples]),
        enc_offsets=np.stack([s.enc.day_offsets for s in samples]),
        enc_pad=enc_pad,
        dec_tokens=np.stack([s.dec_input.tokens for s in samples]),
        dec_offsets=np.stack([s.dec_input.day_offsets for s in samples]),
        dec_pad=dec_pad,
        targets=np.stack([s.dec_target for s in samples]),
        target_mask=np.stack([s.target_mask for s in samples]),
        enc_attn_mask=enc_attn,
        dec_causal_mask=dec_causal,
        cross_mask=cross,
        pivot_days=np.array([s.pivot_day for s in samples], dtype=np.int64),
    )


def make_epoch(
    train: Dataset,
    samples_per_customer: int,
    n_enc: int,
    n_dec: int,
    batch_size: int,
    seed: int,
    shuffle_within_session: bool = False,
) -> list[Batch]:
    """Draw pivots for every eligible customer, shuffle, and batch.

    Deterministic given the seed; customers with fewer than two sessions
    are skipped (no valid pivot exists).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if samples_per_customer < 1:
        raise ValueError(
            f"samples_per_customer must be >= 1, got {samples_per_customer}"
        )
    rng = np.random.default_rng(seed)
    samples: list[TrainingSample] = []
    for cust in train.customers:
        if cust.num_sessions < 2:
            continue
        for _ in range(samples_per_customer):
            pivot = sample_pivot_time(cust, rng)
            shuffle_rng = rng if shuffle_within_session else None
            samples.append(
                split_at_pivot(cust, pivot, n_enc, n_dec, train.vocab, shuffle_rng)
            )
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return [
        stack_samples(shuffled[i : i + batch_size])
        for i in range(0, len(shuffled), batch_size)
    ]
