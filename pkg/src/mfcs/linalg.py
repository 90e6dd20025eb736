"""Dense linear-algebra helpers shared by the model, data and control layers."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["as_matrix", "rank", "matrix_exponential_action"]


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite 2-D float array.

    1-D input is promoted to a single row. Raises ``ValueError`` on NaN/Inf
    entries or on more than two dimensions.
    """
    m = np.array(values, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D data, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: entries must be finite")
    return m


def rank(m, tol: float = 1e-8) -> int:
    """Numerical rank: singular values above ``tol`` times the largest one."""
    m = as_matrix(m, "rank input")
    if m.size == 0:
        raise ValueError("rank input must be non-empty")
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def matrix_exponential_action(a, tau: float = 1.0) -> np.ndarray:
    """Compute ``exp(a * tau)`` by scaling and squaring a truncated Taylor series.

    The argument is scaled by ``2**-s`` until its 1-norm is at most 1/2; a
    20-term series is then accurate to well below double precision and the
    result is squared ``s`` times.
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"A must be square, got {a.shape}")
    m = a * float(tau)
    norm = np.linalg.norm(m, 1)
    s = 0
    if norm > 0.5:
        s = int(math.ceil(math.log2(norm / 0.5)))
    m = m / 2.0**s

    n = m.shape[0]
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 21):
        term = term @ m / k
        result = result + term
        if np.max(np.abs(term)) <= 1e-18 * np.max(np.abs(result)):
            break
    for _ in range(s):
        result = result @ result
    return result
