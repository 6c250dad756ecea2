"""Momentum memory banks, holistic exemplar feature, fusion and similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, IndexOutOfRange, InvalidConfig, UninitializedSlot, ZeroVector
from .numkit import EPS_NORM, gram, l2_normalize, l2_normalize_rows


@dataclass
class BankConfig:
    momentum: float = 0.8
    renormalize: bool = True

    def validate(self) -> None:
        if not 0 < self.momentum <= 1:
            raise InvalidConfig("bank momentum must be in (0, 1]")


class MemoryBank:
    """``N x d`` table with one slot per training instance.

    The first write to a slot stores the feature verbatim; later writes blend
    ``momentum * new + (1 - momentum) * old`` and re-normalise the row.
    """

    def __init__(self, N: int, d: int):
        self.storage = np.zeros((N, d), dtype=np.float64)
        self.initialized = np.zeros(N, dtype=bool)

    @property
    def N(self) -> int:
        return self.storage.shape[0]

    @property
    def d(self) -> int:
        return self.storage.shape[1]

    @property
    def fully_initialized(self) -> bool:
        return bool(self.initialized.all())

    def copy(self) -> "MemoryBank":
        out = MemoryBank(self.N, self.d)
        out.storage[:] = self.storage
        out.initialized[:] = self.initialized
        return out

    def update(self, index: int, feature, cfg: BankConfig) -> "MemoryBank":
        if not 0 <= index < self.N:
            raise IndexOutOfRange(f"slot {index} not in [0, {self.N})")
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.d,):
            raise DimMismatch(f"feature shape {feature.shape} vs d={self.d}")
        if not self.initialized[index]:
            self.storage[index] = feature
            self.initialized[index] = True
            return self
        mixed = cfg.momentum * feature + (1.0 - cfg.momentum) * self.storage[index]
        self.storage[index] = l2_normalize(mixed) if cfg.renormalize else mixed
        return self

    def update_many(self, indices, features, cfg: BankConfig) -> "MemoryBank":
        """Apply :meth:`update` in ascending instance-index order."""
        indices = np.asarray(indices)
        for k in np.argsort(indices, kind="stable"):
            self.update(int(indices[k]), features[k], cfg)
        return self

    def rows(self, indices=None) -> np.ndarray:
        idx = np.arange(self.N) if indices is None else np.asarray(indices)
        if not self.initialized[idx].all():
            raise UninitializedSlot("memory slot read before first write")
        return self.storage[idx]


def holistic_feature(features) -> np.ndarray:
    """Normalised mean of a person's exemplar features."""
    features = np.asarray(features, dtype=np.float64)
    return l2_normalize(features.mean(axis=0))


def holistic_features(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-batched :func:`holistic_feature` for ``E`` of shape (n, V, d).

    Returns (features, norms of the means) for use in :func:`holistic_backward`.
    """
    mean = E.mean(axis=1)
    norms = np.sqrt(np.sum(mean * mean, axis=1))
    if np.any(~(norms > EPS_NORM)):
        raise ZeroVector("exemplar features average to zero")
    return mean / norms[:, None], norms


def holistic_backward(H: np.ndarray, norms: np.ndarray, G: np.ndarray, V: int) -> np.ndarray:
    """Gradient w.r.t. each of the ``V`` averaged features, shape (n, V, d)."""
    dmean = (G - H * np.sum(H * G, axis=1, keepdims=True)) / norms[:, None]
    return np.repeat((dmean / V)[:, None, :], V, axis=1)


def fuse(bank_M: MemoryBank, bank_I: MemoryBank, renormalize: bool = True) -> np.ndarray:
    if bank_M.storage.shape != bank_I.storage.shape:
        raise DimMismatch("banks differ in shape")
    if not (bank_M.fully_initialized and bank_I.fully_initialized):
        raise UninitializedSlot("cannot fuse banks with uninitialised slots")
    mean = (bank_M.storage + bank_I.storage) * 0.5
    return l2_normalize_rows(mean) if renormalize else mean


def similarity(fused: np.ndarray) -> np.ndarray:
    return gram(fused)
