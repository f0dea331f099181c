"""The encoder-decoder network: embeddings, attention, FFN, loss.

All forward math runs on :mod:`trex.autograd` matrices so one tape-backed
pass yields exact gradients. Every sequence is handled as a 2-D (tokens x
embed_dim) matrix; batches are processed sample by sample and averaged,
which keeps gradient accumulation order fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Matrix
from .sampler import Batch, TokenSequence


class PositionalStrategy(str, Enum):
    RELATIVE_DAYS = "relative_days"
    SINUSOIDAL_ABS = "sinusoidal_abs"
    LEARNED_ABS = "learned_abs"
    WEEKLY = "weekly"
    SIGMOID_ABS = "sigmoid_abs"
    SEQUENTIAL_REL = "sequential_rel"


class ConfigError(ValueError):
    """A model configuration value is out of range."""


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    num_heads: int = 2
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    ffn_dim: int = 64
    dropout_rate: float = 0.1
    positional_strategy: PositionalStrategy = PositionalStrategy.RELATIVE_DAYS
    clip_days: int = 365
    n_enc: int = 24
    n_dec: int = 6
    sigmoid_tau: float = 30.0
    sigmoid_scale: float = 100.0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.positional_strategy, str) and not isinstance(
            self.positional_strategy, PositionalStrategy
        ):
            self.positional_strategy = PositionalStrategy(self.positional_strategy)

    def validate(self) -> None:
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.ffn_dim < 1 or self.n_enc < 1 or self.n_dec < 1 or self.clip_days < 1:
            raise ConfigError("ffn_dim, n_enc, n_dec, clip_days must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positional_strategy"] = self.positional_strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


LEARNED_STRATEGIES = frozenset(
    {
        PositionalStrategy.RELATIVE_DAYS,
        PositionalStrategy.LEARNED_ABS,
        PositionalStrategy.WEEKLY,
        PositionalStrategy.SEQUENTIAL_REL,
    }
)


def sinusoidal_row(position: float, dim: int) -> np.ndarray:
    """Classic interleaved sin/cos encoding of a (possibly fractional) position."""
    half = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    row = np.empty(2 * half)
    row[0::2] = np.sin(position * freqs)
    row[1::2] = np.cos(position * freqs)
    return row[:dim]


def relative_day_index(day_offset: int, clip_days: int) -> int:
    return int(np.clip(day_offset, -clip_days, clip_days)) + clip_days


def weekly_index(day_offset: int, clip_days: int) -> int:
    max_week = -(-clip_days // 7)
    week = math.floor(day_offset / 7)
    return int(np.clip(week, -max_week, max_week)) + max_week


def positional_table_rows(cfg: ModelConfig) -> int:
    """Height of the learned positional table for the configured strategy."""
    s = cfg.positional_strategy
    if s == PositionalStrategy.RELATIVE_DAYS:
        return 2 * cfg.clip_days + 1
    if s == PositionalStrategy.WEEKLY:
        return 2 * (-(-cfg.clip_days // 7)) + 1
    if s == PositionalStrategy.LEARNED_ABS:
        return max(cfg.n_enc, cfg.n_dec)
    if s == PositionalStrategy.SEQUENTIAL_REL:
        return cfg.n_enc + cfg.n_dec
    raise ConfigError(f"strategy {s} has no learned table")


def positional_indices(
    cfg: ModelConfig, seq: TokenSequence, is_decoder: bool
) -> np.ndarray:
    """Row indices into the learned positional table for each position."""
    s = cfg.positional_strategy
    n = len(seq)
    if s == PositionalStrategy.RELATIVE_DAYS:
        clipped = np.clip(seq.day_offsets, -cfg.clip_days, cfg.clip_days)
        return (clipped + cfg.clip_days).astype(np.int64)
    if s == PositionalStrategy.WEEKLY:
        max_week = -(-cfg.clip_days // 7)
        weeks = np.floor_divide(seq.day_offsets, 7)
        return (np.clip(weeks, -max_week, max_week) + max_week).astype(np.int64)
    if s == PositionalStrategy.LEARNED_ABS:
        top = positional_table_rows(cfg) - 1
        return np.clip(np.arange(n), 0, top).astype(np.int64)
    if s == PositionalStrategy.SEQUENTIAL_REL:
        top = cfg.n_enc + cfg.n_dec - 1
        if is_decoder:
            idx = cfg.n_enc + np.arange(n)
        else:
            n_real = int(seq.pad_mask.sum())
            idx = cfg.n_enc - n_real + np.arange(n)
        return np.clip(idx, 0, top).astype(np.int64)
    raise ConfigError(f"strategy {s} has no learned table")


def positional_rows_fixed(
    cfg: ModelConfig, seq: TokenSequence, is_decoder: bool
) -> np.ndarray:
    """Constant (non-learned) positional rows for a sequence."""
    s = cfg.positional_strategy
    d = cfg.embed_dim
    n = len(seq)
    if s == PositionalStrategy.SINUSOIDAL_ABS:
        rows = np.stack([sinusoidal_row(i, d) for i in range(n)])
    elif s == PositionalStrategy.SIGMOID_ABS:
        transformed = (
            2.0
            * (1.0 / (1.0 + np.exp(-seq.day_offsets / cfg.sigmoid_tau)))
            * cfg.sigmoid_scale
        )
        rows = np.stack([sinusoidal_row(p, d) for p in transformed])
    else:
        raise ConfigError(f"strategy {s} is not a fixed encoding")
    return rows.astype(cfg.np_dtype())


@dataclass
class AttentionParams:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix


@dataclass
class LayerNormParams:
    gamma: Matrix
    beta: Matrix


@dataclass
class FfnParams:
    w1: Matrix
    b1: Matrix
    w2: Matrix
    b2: Matrix


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    norm1: LayerNormParams
    ffn: FfnParams
    norm2: LayerNormParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    norm1: LayerNormParams
    cross_attn: AttentionParams
    norm2: LayerNormParams
    ffn: FfnParams
    norm3: LayerNormParams


@dataclass
class Parameters:
    categories: Matrix
    positional: Matrix | None
    encoder_layers: list[EncoderLayerParams]
    decoder_layers: list[DecoderLayerParams]
    out_w: Matrix
    out_b: Matrix

    def named_tensors(self):
        """(name, Matrix) pairs in a fixed declared order."""
        yield "categories", self.categories
        if self.positional is not None:
            yield "positional", self.positional
        for i, layer in enumerate(self.encoder_layers):
            p = f"encoder.{i}"
            yield from _named_attention(f"{p}.attn", layer.attn)
            yield from _named_norm(f"{p}.norm1", layer.norm1)
            yield from _named_ffn(f"{p}.ffn", layer.ffn)
            yield from _named_norm(f"{p}.norm2", layer.norm2)
        for i, layer in enumerate(self.decoder_layers):
            p = f"decoder.{i}"
            yield from _named_attention(f"{p}.self_attn", layer.self_attn)
            yield from _named_norm(f"{p}.norm1", layer.norm1)
            yield from _named_attention(f"{p}.cross_attn", layer.cross_attn)
            yield from _named_norm(f"{p}.norm2", layer.norm2)
            yield from _named_ffn(f"{p}.ffn", layer.ffn)
            yield from _named_norm(f"{p}.norm3", layer.norm3)
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def as_dict(self) -> dict[str, Matrix]:
        return dict(self.named_tensors())

    def copy(self) -> "Parameters":
        """Deep copy of all tensors (used for best-checkpoint snapshots)."""
        skeleton = self
        new = {name: Matrix(m.data.copy(), dtype=m.data.dtype) for name, m in skeleton.named_tensors()}
        return _params_from_dict(
            new,
            num_encoder_layers=len(self.encoder_layers),
            num_decoder_layers=len(self.decoder_layers),
            has_positional=self.positional is not None,
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(m.data).all() for _, m in self.named_tensors())


def _named_attention(prefix, p: AttentionParams):
    yield f"{prefix}.wq", p.wq
    yield f"{prefix}.wk", p.wk
    yield f"{prefix}.wv", p.wv
    yield f"{prefix}.wo", p.wo


def _named_norm(prefix, p: LayerNormParams):
    yield f"{prefix}.gamma", p.gamma
    yield f"{prefix}.beta", p.beta


def _named_ffn(prefix, p: FfnParams):
    yield f"{prefix}.w1", p.w1
    yield f"{prefix}.b1", p.b1
    yield f"{prefix}.w2", p.w2
    yield f"{prefix}.b2", p.b2


def _params_from_dict(
    tensors: dict[str, Matrix],
    num_encoder_layers: int,
    num_decoder_layers: int,
    has_positional: bool,
) -> Parameters:
    def attn(prefix):
        return AttentionParams(
            tensors[f"{prefix}.wq"],
            tensors[f"{prefix}.wk"],
            tensors[f"{prefix}.wv"],
            tensors[f"{prefix}.wo"],
        )

    def norm(prefix):
        return LayerNormParams(tensors[f"{prefix}.gamma"], tensors[f"{prefix}.beta"])

    def ffn_p(prefix):
        return FfnParams(
            tensors[f"{prefix}.w1"],
            tensors[f"{prefix}.b1"],
            tensors[f"{prefix}.w2"],
            tensors[f"{prefix}.b2"],
        )

    enc = [
        EncoderLayerParams(
            attn(f"encoder.{i}.attn"),
            norm(f"encoder.{i}.norm1"),
            ffn_p(f"encoder.{i}.ffn"),
            norm(f"encoder.{i}.norm2"),
        )
        for i in range(num_encoder_layers)
    ]
    dec = [
        DecoderLayerParams(
            attn(f"decoder.{i}.self_attn"),
            norm(f"decoder.{i}.norm1"),
            attn(f"decoder.{i}.cross_attn"),
            norm(f"decoder.{i}.norm2"),
            ffn_p(f"decoder.{i}.ffn"),
            norm(f"decoder.{i}.norm3"),
        )
        for i in range(num_decoder_layers)
    ]
    return Parameters(
        categories=tensors["categories"],
        positional=tensors["positional"] if has_positional else None,
        encoder_layers=enc,
        decoder_layers=dec,
        out_w=tensors["out.w"],
        out_b=tensors["out.b"],
    )


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> Parameters:
    """Xavier-uniform projections, N(0, 0.02) embeddings, zero biases."""
    dt = cfg.np_dtype()
    d, f, v = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size

    def xavier(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return Matrix(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dt))

    def embed_table(rows):
        return Matrix((rng.normal(0.0, 0.02, (rows, d))).astype(dt))

    def norm():
        return LayerNormParams(Matrix(np.ones((1, d), dtype=dt)), Matrix(np.zeros((1, d), dtype=dt)))

    def attn():
        return AttentionParams(xavier(d, d), xavier(d, d), xavier(d, d), xavier(d, d))

    def ffn_p():
        return FfnParams(
            xavier(d, f),
            Matrix(np.zeros((1, f), dtype=dt)),
            xavier(f, d),
            Matrix(np.zeros((1, d), dtype=dt)),
        )

    positional = None
    if cfg.positional_strategy in LEARNED_STRATEGIES:
        positional = embed_table(positional_table_rows(cfg))
    return Parameters(
        categories=embed_table(v),
        positional=positional,
        encoder_layers=[
            EncoderLayerParams(attn(), norm(), ffn_p(), norm())
            for _ in range(cfg.num_encoder_layers)
        ],
        decoder_layers=[
            DecoderLayerParams(attn(), norm(), attn(), norm(), ffn_p(), norm())
            for _ in range(cfg.num_decoder_layers)
        ],
        out_w=xavier(d, v),
        out_b=Matrix(np.zeros((1, v), dtype=dt)),
    )


def multi_head_attention(
    x_q: Matrix, x_kv: Matrix, mask: np.ndarray, p: AttentionParams, num_heads: int
) -> Matrix:
    """Scaled dot-product attention with per-head dimension scaling.

    ``mask`` has shape (rows of x_q, rows of x_kv); a fully-masked query row
    is an error, surfaced from the softmax.
    """
    d = x_q.cols
    d_head = d // num_heads
    q = ag.matmul(x_q, p.wq)
    k = ag.matmul(x_kv, p.wk)
    v = ag.matmul(x_kv, p.wv)
    inv_scale = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(num_heads):
        j0, j1 = h * d_head, (h + 1) * d_head
        qh = ag.slice_cols(q, j0, j1)
        kh = ag.slice_cols(k, j0, j1)
        vh = ag.slice_cols(v, j0, j1)
        logits = ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_scale)
        weights = ag.masked_softmax_rows(logits, mask)
        heads.append(ag.matmul(weights, vh))
    stacked = heads[0] if num_heads == 1 else ag.concat_cols(heads)
    return ag.matmul(stacked, p.wo)


def ffn(x: Matrix, p: FfnParams) -> Matrix:
    """Position-wise feed-forward: relu(x W1 + b1) W2 + b2."""
    hidden = ag.relu(ag.add_bias(ag.matmul(x, p.w1), p.b1))
    return ag.add_bias(ag.matmul(hidden, p.w2), p.b2)


def _attendable(mask: np.ndarray) -> np.ndarray:
    """Give all-PAD query rows a single key (column 0) so softmax is defined.

    Column 0 is always a real token (encoder pads are suffixes; the decoder
    starts with BOS). The fixed rows are key-masked for every real query and
    excluded from the loss, so nothing can leak through them.
    """
    empty = ~mask.any(axis=1)
    if empty.any():
        mask = mask.copy()
        mask[empty, 0] = True
    return mask


class TrexModel:
    """Encoder-decoder over category tokens with pivot-relative positions."""

    def __init__(self, cfg: ModelConfig, params: Parameters | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = (
            params
            if params is not None
            else init_parameters(cfg, np.random.default_rng(seed))
        )

    # -- embeddings --

    def embed(
        self,
        seq: TokenSequence,
        is_decoder: bool,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        tokens = np.asarray(seq.tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        x = ag.gather_rows(self.params.categories, tokens)
        if self.params.positional is not None:
            idx = positional_indices(self.cfg, seq, is_decoder)
            x = ag.add(x, ag.gather_rows(self.params.positional, idx))
        else:
            x = ag.add(x, Matrix.wrap(positional_rows_fixed(self.cfg, seq, is_decoder)))
        return self._dropout(x, training, rng)

    def _dropout(self, x: Matrix, training: bool, rng: np.random.Generator | None) -> Matrix:
        rate = self.cfg.dropout_rate
        if not training or rate == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return ag.mul_const(x, keep.astype(x.data.dtype))

    # -- encoder / decoder stacks --

    def encode(
        self,
        enc_seq: TokenSequence,
        attn_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        if attn_mask is None:
            real = np.asarray(enc_seq.pad_mask, dtype=bool)
            attn_mask = real[:, None] & real[None, :]
        mask = _attendable(attn_mask)
        x = self.embed(enc_seq, is_decoder=False, training=training, rng=rng)
        for layer in self.params.encoder_layers:
            h = multi_head_attention(x, x, mask, layer.attn, self.cfg.num_heads)
            x = ag.layer_norm(ag.add(x, self._dropout(h, training, rng)), layer.norm1.gamma, layer.norm1.beta)
            f = ffn(x, layer.ffn)
            x = ag.layer_norm(ag.add(x, self._dropout(f, training, rng)), layer.norm2.gamma, layer.norm2.beta)
        return x

    def decode(
        self,
        dec_seq: TokenSequence,
        memory: Matrix,
        enc_pad_mask: np.ndarray,
        causal_mask: np.ndarray | None = None,
        cross_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        dec_real = np.asarray(dec_seq.pad_mask, dtype=bool)
        if causal_mask is None:
            n = len(dec_seq)
            causal_mask = (
                np.tril(np.ones((n, n), dtype=bool))
                & dec_real[:, None]
                & dec_real[None, :]
            )
        if cross_mask is None:
            enc_real = np.asarray(enc_pad_mask, dtype=bool)
            cross_mask = dec_real[:, None] & enc_real[None, :]
        causal = _attendable(causal_mask)
        cross = _attendable(cross_mask)
        x = self.embed(dec_seq, is_decoder=True, training=training, rng=rng)
        for layer in self.params.decoder_layers:
            h = multi_head_attention(x, x, causal, layer.self_attn, self.cfg.num_heads)
            x = ag.layer_norm(ag.add(x, self._dropout(h, training, rng)), layer.norm1.gamma, layer.norm1.beta)
            c = multi_head_attention(x, memory, cross, layer.cross_attn, self.cfg.num_heads)
            x = ag.layer_norm(ag.add(x, self._dropout(c, training, rng)), layer.norm2.gamma, layer.norm2.beta)
            f = ffn(x, layer.ffn)
            x = ag.layer_norm(ag.add(x, self._dropout(f, training, rng)), layer.norm3.gamma, layer.norm3.beta)
        return ag.add_bias(ag.matmul(x, self.params.out_w), self.params.out_b)

    # -- loss --

    def loss(self, logits: Matrix, targets: np.ndarray, target_mask: np.ndarray) -> Matrix:
        return ag.masked_cross_entropy(logits, targets, target_mask)

    def sample_loss(
        self,
        enc_seq: TokenSequence,
        dec_seq: TokenSequence,
        targets: np.ndarray,
        target_mask: np.ndarray,
        enc_attn_mask: np.ndarray | None = None,
        causal_mask: np.ndarray | None = None,
        cross_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        memory = self.encode(enc_seq, enc_attn_mask, training, rng)
        logits = self.decode(
            dec_seq, memory, enc_seq.pad_mask, causal_mask, cross_mask, training, rng
        )
        return self.loss(logits, targets, target_mask)

    def batch_loss(
        self,
        batch: Batch,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        """Mean of per-sample losses over the batch."""
        total = None
        for b in range(batch.size):
            one = self.sample_loss(
                batch.enc_seq(b),
                batch.dec_seq(b),
                batch.targets[b],
                batch.target_mask[b],
                enc_attn_mask=batch.enc_attn_mask[b],
                causal_mask=batch.dec_causal_mask[b],
                cross_mask=batch.cross_mask[b],
                training=training,
                rng=rng,
            )
            total = one if total is None else ag.add(total, one)
        return ag.scale(total, 1.0 / batch.size)
