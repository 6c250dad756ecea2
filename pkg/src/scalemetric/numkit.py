"""Small deterministic numeric helpers shared by every other module.

Everything works on float64 numpy arrays. Functions are pure.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, ZeroVector

EPS_NORM = 1e-12


def as_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises ZeroVector when ``||v|| <= eps``.
    """
    v = as_vec(v)
    n = float(np.sqrt(np.sum(v * v)))
    if not n > eps:
        raise ZeroVector(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def l2_normalize_rows(m, eps: float = EPS_NORM) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = np.sqrt(np.sum(m * m, axis=-1, keepdims=True))
    if np.any(~(n > eps)):
        raise ZeroVector("row with (near) zero norm")
    return m / n


def sqdist(a, b) -> float:
    """Squared Euclidean distance."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes {a.shape} and {b.shape}")
    diff = a - b
    return float(np.sum(diff * diff))


def sqdist_rows(a, b) -> np.ndarray:
    """Broadcasting squared distance over the last axis.

    Uses the same reduction as :func:`sqdist`, so values agree bit for bit
    with per-pair calls.
    """
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sum(diff * diff, axis=-1)


def gram(rows) -> np.ndarray:
    """Return ``rows @ rows.T``, made exactly symmetric."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimMismatch("gram expects a 2-D matrix")
    g = rows @ rows.T
    return (g + g.T) * 0.5


def argsort_desc(values) -> np.ndarray:
    """Indices sorting ``values`` in descending order; ties keep ascending index."""
    values = np.asarray(values, dtype=np.float64)
    # stable sort on the negated values keeps ascending index within ties
    return np.argsort(-values, kind="stable")


def make_rng(seed, *stream) -> np.random.Generator:
    """Seeded generator; ``stream`` selects an independent substream."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])
