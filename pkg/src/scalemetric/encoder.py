"""Shared embedding function: grid mean-pooling, linear map, l2 norm.

``f = normalize(W @ pool(image))``. Pooling accepts any image at least as
large as the grid, which is what lets one set of weights serve every scale.
Because the map after pooling is linear, callers that see the same image
many times can pool once and use the ``*_pooled`` functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNorm, DimMismatch, ImageTooSmall, InvalidConfig

NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    d: int = 32
    grid: tuple[int, int] = (8, 4)
    init_scale: float = 1.0
    center_init: bool = True

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)

    def validate(self) -> None:
        if self.d < 2:
            raise InvalidConfig("d must be >= 2")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise InvalidConfig("grid cells must be >= 1")
        if not self.init_scale > 0:
            raise InvalidConfig("init_scale must be positive")

    @property
    def input_dim(self) -> int:
        return 3 * self.grid[0] * self.grid[1]


@dataclass
class EncoderParams:
    W: np.ndarray
    grid: tuple[int, int]

    @property
    def d(self) -> int:
        return self.W.shape[0]


@dataclass
class ForwardTrace:
    pooled: np.ndarray
    u: np.ndarray
    norm: float
    f: np.ndarray


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Gaussian weights with std ``init_scale / sqrt(D)``.

    With ``center_init`` each row is made orthogonal to the all-ones input
    direction, so the common brightness of a crop does not dominate every
    embedding at initialisation.
    """
    cfg.validate()
    D = cfg.input_dim
    W = rng.normal(0.0, cfg.init_scale / np.sqrt(D), size=(cfg.d, D))
    if cfg.center_init:
        W -= W.mean(axis=1, keepdims=True)
    return EncoderParams(W, cfg.grid)


def _cell_edges(n: int, g: int) -> np.ndarray:
    step = n // g
    return np.arange(g) * step


def pool(image: np.ndarray, grid) -> np.ndarray:
    """Channel means over a ``G_h x G_w`` grid, flattened cell-major.

    Cells are ``n // G`` pixels wide along each axis; the last cell takes
    the remainder.
    """
    image = np.asarray(image, dtype=np.float64)
    gh, gw = grid
    h, w = image.shape[:2]
    if h < gh or w < gw:
        raise ImageTooSmall(f"image {h}x{w} smaller than grid {gh}x{gw}")
    ey, ex = _cell_edges(h, gh), _cell_edges(w, gw)
    sums = np.add.reduceat(np.add.reduceat(image, ey, axis=0), ex, axis=1)
    ny = np.diff(np.append(ey, h))
    nx = np.diff(np.append(ex, w))
    means = sums / (ny[:, None, None] * nx[None, :, None])
    return means.reshape(-1)


def forward(params: EncoderParams, image: np.ndarray) -> ForwardTrace:
    p = pool(image, params.grid)
    return forward_vector(params.W, p)


def forward_vector(W: np.ndarray, pooled: np.ndarray) -> ForwardTrace:
    if W.shape[1] != pooled.shape[0]:
        raise DimMismatch(f"W expects {W.shape[1]} inputs, got {pooled.shape[0]}")
    u = W @ pooled
    n = float(np.sqrt(u @ u))
    if not n > NORM_EPS:
        raise DegenerateNorm("pre-normalisation output is zero")
    return ForwardTrace(pooled, u, n, u / n)


def backward(trace: ForwardTrace, dL_df: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``W`` for one forward trace."""
    g = np.asarray(dL_df, dtype=np.float64)
    f = trace.f
    dL_du = (g - f * (f @ g)) / trace.norm
    return np.outer(dL_du, trace.pooled)


def forward_pooled(W: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-batched forward: returns (features, norms) for pooled rows ``P``."""
    U = P @ W.T
    norms = np.sqrt(np.sum(U * U, axis=1))
    if np.any(~(norms > NORM_EPS)):
        raise DegenerateNorm("pre-normalisation output is zero")
    return U / norms[:, None], norms


def backward_pooled(F: np.ndarray, norms: np.ndarray, P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Summed ``W`` gradient for a batch of rows (see :func:`backward`)."""
    dU = (G - F * np.sum(F * G, axis=1, keepdims=True)) / norms[:, None]
    return dU.T @ P


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (16, 22)
    decay_factor: float = 0.1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")


@dataclass
class SgdState:
    config: SgdConfig
    velocity: np.ndarray = field(default=None)


def learning_rate(cfg: SgdConfig, epoch: int) -> float:
    n = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.learning_rate * cfg.decay_factor**n


def sgd_step(params: EncoderParams, state: SgdState, grad: np.ndarray, epoch: int) -> EncoderParams:
    """Momentum SGD with L2 weight decay folded into the velocity; in place."""
    if grad.shape != params.W.shape:
        raise DimMismatch(f"grad {grad.shape} vs W {params.W.shape}")
    cfg = state.config
    if state.velocity is None:
        state.velocity = np.zeros_like(params.W)
    state.velocity *= cfg.momentum
    state.velocity += grad + cfg.weight_decay * params.W
    params.W -= learning_rate(cfg, epoch) * state.velocity
    return params
