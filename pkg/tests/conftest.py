"""Shared test helpers: finite-difference gradient oracle and tolerances."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array.

    Mutates ``arr`` entry by entry and restores it; the function must read
    the array fresh on every call.
    """
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    label: str = "",
) -> None:
    """Relative-error comparison with an absolute floor for near-zero entries."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= atol) | (diff <= rtol * denom)
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff / np.maximum(denom, atol)), diff.shape)
        raise AssertionError(
            f"gradient mismatch {label} at {worst}: "
            f"analytic={analytic[worst]:.3e} numeric={numeric[worst]:.3e}"
        )
