"""Dense 2-D matrices with reverse-mode gradients recorded on an explicit tape.

The primitive set is deliberately small: matmul, transpose, add, bias add,
scaling, elementwise products against constants, relu, column slice/concat,
row gather, masked row softmax, row-wise layer norm, and a masked
cross-entropy reduction. That set closes every forward/backward path the
model needs.

Gradients are exact (no approximation); the test suite checks every
primitive against central finite differences at 64-bit precision.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """An attention mask leaves a row with nothing to attend to."""


class TapeError(RuntimeError):
    """A backward pass was requested for a node the tape never recorded."""


class Matrix:
    """A rows x cols float array, optionally tracked on a :class:`Tape`.

    Values are immutable by convention once produced by an operation;
    ``grad`` is allocated only for tracked matrices.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Matrix":
        """Adopt an existing 2-D array without copying."""
        m = cls.__new__(cls)
        m.data = arr
        m.grad = None
        m.tape = None
        return m

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Matrix(shape={self.shape}, tracked={self.tape is not None})"


class Tape:
    """Execution-ordered record of differentiable operations.

    ``backward`` replays the records exactly once each, in reverse order of
    recording. Recording order is a topological order of the computation, so
    the reverse walk is a valid adjoint schedule.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._watched: list[Matrix] = []

    def watch(self, m: Matrix) -> Matrix:
        """Track a parameter: gradients will accumulate into ``m.grad``."""
        m.tape = self
        m.grad = np.zeros_like(m.data)
        self._watched.append(m)
        return m

    def watch_all(self, ms: Iterable[Matrix]) -> None:
        for m in ms:
            self.watch(m)

    def release(self) -> None:
        """Detach every watched parameter so later ops stop recording."""
        for m in self._watched:
            m.tape = None

    @property
    def watched(self) -> tuple[Matrix, ...]:
        return tuple(self._watched)

    def __len__(self) -> int:
        return len(self._records)

    # -- used by the ops below --

    def _adopt(self, out: Matrix) -> None:
        out.tape = self
        out.grad = np.zeros_like(out.data)

    def _record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)


def backward(tape: Tape, loss: Matrix) -> dict[Matrix, np.ndarray]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns a mapping from each watched parameter to its gradient array
    (the same arrays exposed as ``param.grad``). Parameters the loss never
    touched keep their zero gradient.
    """
    if loss.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    loss.grad[...] = 1.0
    for fn in reversed(tape._records):
        fn()
    return {m: m.grad for m in tape._watched}


def _tape_of(*ms: Matrix) -> Tape | None:
    tape = None
    for m in ms:
        if m.tape is not None:
            if tape is not None and tape is not m.tape:
                raise TapeError("operands are recorded on different tapes")
            tape = m.tape
    return tape


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product, recorded on the tape of tracked inputs."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = Matrix.wrap(a.data @ b.data)
    tape = _tape_of(a, b)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            if a.tape is not None:
                a.grad += out.grad @ b.data.T
            if b.tape is not None:
                b.grad += a.data.T @ out.grad

        tape._record(bwd)
    return out


def transpose(a: Matrix) -> Matrix:
    out = Matrix.wrap(np.ascontiguousarray(a.data.T))
    tape = _tape_of(a)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            a.grad += out.grad.T

        tape._record(bwd)
    return out


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Matrix.wrap(a.data + b.data)
    tape = _tape_of(a, b)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            if a.tape is not None:
                a.grad += out.grad
            if b.tape is not None:
                b.grad += out.grad

        tape._record(bwd)
    return out


def add_bias(x: Matrix, b: Matrix) -> Matrix:
    """Add a 1 x n bias row to every row of x."""
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_bias: bias {b.shape} does not broadcast over {x.shape}")
    out = Matrix.wrap(x.data + b.data)
    tape = _tape_of(x, b)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            if x.tape is not None:
                x.grad += out.grad
            if b.tape is not None:
                b.grad += out.grad.sum(axis=0, keepdims=True)

        tape._record(bwd)
    return out


def scale(x: Matrix, c: float) -> Matrix:
    out = Matrix.wrap(x.data * c)
    tape = _tape_of(x)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            x.grad += out.grad * c

        tape._record(bwd)
    return out


def mul_const(x: Matrix, c: np.ndarray) -> Matrix:
    """Elementwise product with a constant array (dropout masks, loss masks)."""
    out = Matrix.wrap(x.data * c)
    tape = _tape_of(x)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            x.grad += out.grad * c

        tape._record(bwd)
    return out


def relu(x: Matrix) -> Matrix:
    out = Matrix.wrap(np.maximum(x.data, 0.0))
    tape = _tape_of(x)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            x.grad += out.grad * (out.data > 0.0)

        tape._record(bwd)
    return out


def concat_cols(parts: list[Matrix]) -> Matrix:
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeError(f"concat_cols: row counts differ, {[p.shape for p in parts]}")
    out = Matrix.wrap(np.concatenate([p.data for p in parts], axis=1))
    tape = _tape_of(*parts)
    if tape is not None:
        tape._adopt(out)
        offsets = np.cumsum([0] + [p.cols for p in parts])

        def bwd():
            for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
                if p.tape is not None:
                    p.grad += out.grad[:, j0:j1]

        tape._record(bwd)
    return out


def slice_cols(x: Matrix, j0: int, j1: int) -> Matrix:
    if not (0 <= j0 < j1 <= x.cols):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {x.shape}")
    out = Matrix.wrap(np.ascontiguousarray(x.data[:, j0:j1]))
    tape = _tape_of(x)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            x.grad[:, j0:j1] += out.grad

        tape._record(bwd)
    return out


def gather_rows(table: Matrix, ids: np.ndarray) -> Matrix:
    """Pick rows of a table by integer id (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise IndexError(f"gather_rows: id out of range [0, {table.rows}) in {ids}")
    out = Matrix.wrap(table.data[ids])
    tape = _tape_of(table)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            np.add.at(table.grad, ids, out.grad)

        tape._record(bwd)
    return out


def masked_softmax_rows(logits: Matrix, mask: np.ndarray) -> Matrix:
    """Row-wise softmax with masked entries forced to exactly zero.

    Uses per-row max subtraction for stability. Every row must keep at
    least one unmasked entry; a fully-masked row has no valid distribution.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise MaskError(f"row {bad} is fully masked; softmax is undefined")
    neg = np.where(mask, logits.data, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    expd = np.where(mask, np.exp(shifted), 0.0)
    out_data = expd / expd.sum(axis=1, keepdims=True)
    out = Matrix.wrap(out_data)
    tape = _tape_of(logits)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            g = out.grad
            dot = (g * out_data).sum(axis=1, keepdims=True)
            logits.grad += out_data * (g - dot)

        tape._record(bwd)
    return out


def layer_norm(x: Matrix, gamma: Matrix, beta: Matrix, eps: float = 1e-5) -> Matrix:
    """Row-wise layer normalization: gamma * (x - mean) / sqrt(var + eps) + beta."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.cols
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be (1, {d})"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Matrix.wrap(gamma.data * xhat + beta.data)
    tape = _tape_of(x, gamma, beta)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            g = out.grad
            if gamma.tape is not None:
                gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
            if beta.tape is not None:
                beta.grad += g.sum(axis=0, keepdims=True)
            if x.tape is not None:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x.grad += inv_std * (dxhat - m1 - xhat * m2)

        tape._record(bwd)
    return out


def masked_cross_entropy(logits: Matrix, targets: np.ndarray, mask: np.ndarray) -> Matrix:
    """Mean negative log-likelihood over unmasked rows.

    ``targets[i]`` is the class index for row i; rows with ``mask[i]`` false
    are excluded from the mean entirely.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n = logits.rows
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} / mask {mask.shape} must be ({n},)"
        )
    if not mask.any():
        raise MaskError("all positions are masked; loss is undefined")
    n_real = int(mask.sum())
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(n)
    nll = -log_probs[rows, targets]
    out = Matrix.wrap(np.array([[float(nll[mask].sum() / n_real)]]))
    tape = _tape_of(logits)
    if tape is not None:
        tape._adopt(out)
        probs = np.exp(log_probs)

        def bwd():
            g = out.grad[0, 0] / n_real
            d = probs.copy()
            d[rows, targets] -= 1.0
            d[~mask] = 0.0
            logits.grad += d * g

        tape._record(bwd)
    return out


def sum_all(x: Matrix) -> Matrix:
    """Reduce a matrix to its 1x1 sum."""
    out = Matrix.wrap(np.array([[float(x.data.sum())]]))
    tape = _tape_of(x)
    if tape is not None:
        tape._adopt(out)

        def bwd():
            x.grad += out.grad[0, 0]

        tape._record(bwd)
    return out
