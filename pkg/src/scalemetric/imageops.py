"""Crop, background masking and bilinear rescaling of person patches.

An exemplar at scale ``s`` is ``resize(crop * mask, s)``; with masking
disabled the crop is resized as is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InvalidConfig, OutOfBounds, SourceTooSmall


@dataclass(frozen=True)
class ScalePreset:
    """Target size of one scale. ``height == width == 0`` means "keep the
    crop's native size" and is only used by the original-scale ablation."""

    name: str
    height: int
    width: int

    @property
    def native(self) -> bool:
        return self.height == 0 and self.width == 0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


FULL_RES_PRESETS = (
    ScalePreset("scale-1", 112, 48),
    ScalePreset("scale-2", 224, 96),
    ScalePreset("scale-3", 448, 192),
)
TOY_PRESETS = (
    ScalePreset("scale-1", 28, 12),
    ScalePreset("scale-2", 56, 24),
    ScalePreset("scale-3", 112, 48),
)
ORIGINAL_PRESET = ScalePreset("original", 0, 0)


def validate_presets(presets) -> None:
    if len(presets) == 0:
        raise InvalidConfig("at least one scale preset is required")
    sized = [p for p in presets if not p.native]
    for p in sized:
        if p.height < 2 or p.width < 2:
            raise InvalidConfig(f"preset {p.name} smaller than 2x2")
    areas = [p.height * p.width for p in sized]
    if any(b <= a for a, b in zip(areas, areas[1:])):
        raise InvalidConfig("presets must be strictly increasing in area")


@dataclass
class ScaleExemplarSet:
    instance_index: int
    original_crop: np.ndarray
    scaled_crops: list[np.ndarray]
    context_crop: np.ndarray  # un-masked native crop fed to the main branch


def crop(scene, person) -> np.ndarray:
    raster = scene.raster
    x, y, w, h = person.box
    H, W = raster.shape[:2]
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > W or y + h > H:
        raise OutOfBounds(f"box {person.box} outside {W}x{H} raster")
    return raster[y : y + h, x : x + w].copy()


def mask_multiply(patch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    mask = np.asarray(mask)
    if patch.shape[:2] != mask.shape:
        raise DimMismatch(f"patch {patch.shape[:2]} vs mask {mask.shape}")
    m = mask.astype(np.float64)
    if patch.ndim == 3:
        m = m[:, :, None]
    return patch * m


def _axis_weights(n_src: int, n_dst: int):
    if n_dst == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_src - 2)
    frac = pos - lo
    return lo, frac


def bilinear_resize(patch: np.ndarray, target) -> np.ndarray:
    """Align-corners bilinear resize to ``target`` ((h, w) or a ScalePreset).

    Corner pixels of the source land exactly on the corners of the output.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if isinstance(target, ScalePreset):
        if target.native:
            return patch.copy()
        target = target.shape
    th, tw = int(target[0]), int(target[1])
    sh, sw = patch.shape[:2]
    if sh < 2 or sw < 2:
        raise SourceTooSmall(f"source {sh}x{sw} below 2x2")
    if th < 1 or tw < 1:
        raise InvalidConfig(f"target {th}x{tw} is empty")
    if (th, tw) == (sh, sw):
        return patch.copy()
    y0, fy = _axis_weights(sh, th)
    x0, fx = _axis_weights(sw, tw)
    extra = (None,) * (patch.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = patch[y0][:, x0] * (1 - fx) + patch[y0][:, x0 + 1] * fx
    bot = patch[y0 + 1][:, x0] * (1 - fx) + patch[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def build_exemplar_set(scene, person, presets, use_mask: bool = True) -> ScaleExemplarSet:
    validate_presets(presets)
    raw = crop(scene, person)
    base = mask_multiply(raw, person.mask) if use_mask else raw
    scaled = [bilinear_resize(base, p) for p in presets]
    return ScaleExemplarSet(person.instance_index, base, scaled, raw)
