"""Gradient clipping and Adam with decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Matrix, ShapeError


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over all gradient entries jointly."""
    total = sum(float((g**2).sum()) for g in grads.values())
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Below the threshold the gradients pass through unchanged, which makes
    the operation idempotent.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    """Adam over named parameter tensors, weight decay applied to the
    parameters directly rather than folded into the moment estimates."""

    def __init__(
        self,
        params: dict[str, Matrix],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Apply one update in place; missing names are treated as zero grad."""
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1**st.step
        bc2 = 1.0 - self.beta2**st.step
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"grad for '{name}' has shape {g.shape}, parameter is {p.data.shape}"
                )
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
