"""Multi-label memory loss and the centroid-softmax cluster loss.

Memory rows are constants here: gradients flow only into the query
features, never into a bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, UninitializedSlot, ZeroVector
from .numkit import EPS_NORM


@dataclass
class DmlConfig:
    delta: float = 1.0
    tau: float = 0.05

    def validate(self) -> None:
        if not (self.delta > 0 and self.tau > 0):
            raise InvalidConfig("delta and tau must be positive")


def _as_rows(bank) -> np.ndarray:
    return bank.storage if hasattr(bank, "storage") else np.asarray(bank, dtype=np.float64)


def ml_loss(bank, f, positives, cfg: DmlConfig, negatives=None):
    """``delta * mean_p (s_p - 1)^2 + mean_v (s_v + 1)^2`` with ``s = bank @ f``.

    ``negatives`` defaults to every row not in ``positives``; when it is
    empty the negative term is dropped.
    """
    M = _as_rows(bank)
    f = np.asarray(f, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    if pos.size == 0:
        raise InvalidConfig("positive set is empty")
    if negatives is None:
        keep = np.ones(M.shape[0], dtype=bool)
        keep[pos] = False
        neg = np.flatnonzero(keep)
    else:
        neg = np.asarray(negatives, dtype=np.int64)
    if hasattr(bank, "initialized") and not bank.initialized[np.concatenate([pos, neg])].all():
        raise UninitializedSlot("loss reads an uninitialised memory slot")
    s_p = M[pos] @ f
    value = cfg.delta * float(np.mean((s_p - 1.0) ** 2))
    grad = (2.0 * cfg.delta / pos.size) * ((s_p - 1.0) @ M[pos])
    if neg.size:
        s_n = M[neg] @ f
        value += float(np.mean((s_n + 1.0) ** 2))
        grad = grad + (2.0 / neg.size) * ((s_n + 1.0) @ M[neg])
    return value, grad


def ml_loss_batch(M: np.ndarray, F: np.ndarray, pos_lists, cfg: DmlConfig):
    """Sum of :func:`ml_loss` over query rows ``F`` (negatives = complement).

    Vectorised over the full bank: the negative sums are taken over every
    row and the positive rows are subtracted back out.
    """
    S = F @ M.T  # (q, N)
    N = M.shape[0]
    total = 0.0
    G = np.zeros_like(F)
    for r, pos in enumerate(pos_lists):
        s = S[r]
        s_p = s[pos]
        Mp = M[pos]
        n_neg = N - pos.size
        val = cfg.delta * float(np.mean((s_p - 1.0) ** 2))
        g = (2.0 * cfg.delta / pos.size) * ((s_p - 1.0) @ Mp)
        if n_neg:
            a_all = s + 1.0
            a_pos = s_p + 1.0
            val += (float(a_all @ a_all) - float(a_pos @ a_pos)) / n_neg
            g = g + (2.0 / n_neg) * (a_all @ M - a_pos @ Mp)
        total += val
        G[r] = g
    return total, G


def dml_total(bank_I, bank_M, f_i, f_i_h, positives, cfg: DmlConfig):
    """Instance-bank term on ``f_i`` plus exemplar-bank term on ``f_i_h``.

    Returns ``(value, grad_f_i, grad_f_i_h)``.
    """
    v1, g1 = ml_loss(bank_I, f_i, positives, cfg)
    v2, g2 = ml_loss(bank_M, f_i_h, positives, cfg)
    return v1 + v2, g1, g2


def cluster_centroids(fused: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Normalised mean row per cluster id."""
    C = int(labels.max()) + 1
    sums = np.zeros((C, fused.shape[1]))
    np.add.at(sums, labels, fused)
    norms = np.sqrt(np.sum(sums * sums, axis=1))
    if np.any(~(norms > EPS_NORM)):
        raise ZeroVector("cluster members average to zero")
    return sums / norms[:, None]


def cluster_loss(centroids: np.ndarray, f, own_cluster: int, cfg: DmlConfig):
    """Softmax cross-entropy of ``f`` against all centroids at temperature tau."""
    f = np.asarray(f, dtype=np.float64)
    logits = centroids @ f / cfg.tau
    shift = logits.max()
    ex = np.exp(logits - shift)
    Z = ex.sum()
    value = float(np.log(Z) + shift - logits[own_cluster])
    p = ex / Z
    p[own_cluster] -= 1.0
    grad = (p @ centroids) / cfg.tau
    return value, grad


def cluster_loss_batch(centroids: np.ndarray, F: np.ndarray, own: np.ndarray, cfg: DmlConfig):
    """Mean :func:`cluster_loss` over rows of ``F``; gradient of the mean."""
    logits = F @ centroids.T / cfg.tau
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    Z = ex.sum(axis=1, keepdims=True)
    rows = np.arange(F.shape[0])
    values = np.log(Z[:, 0]) + shift[:, 0] - logits[rows, own]
    p = ex / Z
    p[rows, own] -= 1.0
    q = F.shape[0]
    return float(values.mean()), (p @ centroids) / (cfg.tau * q)
