"""Scale-invariant hinge loss with per-person hard exemplar mining.

For person ``i`` of a scene with ``P`` persons and ``K`` augmented scales::

    d_p = max_{s<K}        D(f_i, f_i^s)
    d_n = min_{j!=i, s<=K} D(f_i, f_j^s)      # s == K is the original scale
    l_i = [m + d_p - d_n]_+ + gamma * D(f_i, f_i^o)

and the scene loss is the mean of ``l_i``. ``D`` is squared Euclidean
distance. Single-person scenes keep only the ``gamma`` anchor term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyBatch, InvalidConfig
from .numkit import sqdist_rows


@dataclass
class SilConfig:
    margin: float = 0.3
    gamma: float = 0.05

    def validate(self) -> None:
        if self.margin < 0 or self.gamma < 0:
            raise InvalidConfig("margin and gamma must be >= 0")


@dataclass
class SceneFeatures:
    """``main``: (P, d) instance features. ``exemplars``: (P, K+1, d) with the
    ``K`` augmented scales first and the original-scale feature last."""

    main: np.ndarray
    exemplars: np.ndarray

    def __post_init__(self):
        self.main = np.asarray(self.main, dtype=np.float64)
        self.exemplars = np.asarray(self.exemplars, dtype=np.float64)
        P, d = self.main.shape
        if self.exemplars.ndim != 3 or self.exemplars.shape[0] != P or self.exemplars.shape[2] != d:
            raise DimMismatch(f"main {self.main.shape} vs exemplars {self.exemplars.shape}")
        if self.exemplars.shape[1] < 2:
            raise DimMismatch("need K >= 1 augmented scales plus the original")

    @property
    def P(self) -> int:
        return self.main.shape[0]

    @property
    def K(self) -> int:
        return self.exemplars.shape[1] - 1


@dataclass
class SceneLoss:
    value: float
    hard_pos: np.ndarray  # (P,) scale index
    hard_neg: np.ndarray  # (P, 2) (person, scale); -1 when the hinge is skipped
    hinge: np.ndarray  # (P,) hinge values before clipping, nan when skipped


def scene_loss(sf: SceneFeatures, cfg: SilConfig) -> SceneLoss:
    P, K = sf.P, sf.K
    f = sf.main
    dist = sqdist_rows(f[:, None, None, :], sf.exemplars[None, :, :, :])  # (i, j, s)
    idx = np.arange(P)
    d_own = dist[idx, idx]  # (P, K+1)
    hard_pos = np.argmax(d_own[:, :K], axis=1)
    d_p = d_own[idx, hard_pos]
    d_o = d_own[:, K]
    per_person = cfg.gamma * d_o
    hard_neg = np.full((P, 2), -1, dtype=np.int64)
    hinge = np.full(P, np.nan)
    if P >= 2:
        neg = dist.copy()
        neg[idx, idx, :] = np.inf
        flat = np.argmin(neg.reshape(P, -1), axis=1)
        hard_neg[:, 0], hard_neg[:, 1] = np.divmod(flat, K + 1)
        d_n = neg.reshape(P, -1)[idx, flat]
        hinge = cfg.margin + d_p - d_n
        per_person = np.maximum(hinge, 0.0) + per_person
    return SceneLoss(float(np.mean(per_person)), hard_pos, hard_neg, hinge)


def scene_loss_grad(sf: SceneFeatures, cfg: SilConfig):
    """Loss and gradients w.r.t. ``main`` and ``exemplars``.

    Only the selected hard positive, hard negative and the original-scale
    anchor receive gradient; an inactive hinge contributes nothing.
    """
    res = scene_loss(sf, cfg)
    P, K = sf.P, sf.K
    f, E = sf.main, sf.exemplars
    g_main = np.zeros_like(f)
    g_ex = np.zeros_like(E)
    w = 1.0 / P
    for i in range(P):
        diff_o = f[i] - E[i, K]
        g_main[i] += 2 * cfg.gamma * w * diff_o
        g_ex[i, K] -= 2 * cfg.gamma * w * diff_o
        if P >= 2 and res.hinge[i] > 0:
            s = res.hard_pos[i]
            j, t = res.hard_neg[i]
            diff_p = f[i] - E[i, s]
            diff_n = f[i] - E[j, t]
            g_main[i] += 2 * w * (diff_p - diff_n)
            g_ex[i, s] -= 2 * w * diff_p
            g_ex[j, t] += 2 * w * diff_n
    return res.value, g_main, g_ex


def batch_loss(scenes: list[SceneFeatures], cfg: SilConfig) -> float:
    if not scenes:
        raise EmptyBatch("batch has no scenes")
    return float(np.mean([scene_loss(sf, cfg).value for sf in scenes]))


def batch_loss_grad(scenes: list[SceneFeatures], cfg: SilConfig):
    """Mean loss over scenes with per-scene gradients scaled by ``1/B``."""
    if not scenes:
        raise EmptyBatch("batch has no scenes")
    B = len(scenes)
    values, grads = [], []
    for sf in scenes:
        v, gm, ge = scene_loss_grad(sf, cfg)
        values.append(v)
        grads.append((gm / B, ge / B))
    return float(np.mean(values)), grads
