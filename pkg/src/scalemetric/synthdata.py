"""Synthetic multi-person scenes with known boxes, masks and identities.

Each identity is a horizontally striped rectangle with its own base colour,
stripe period and stripe contrast. Persons are pasted through an elliptical
mask onto a noisy gradient background. Rasters are quantised to 8 bits so
that a dataset written to disk reloads bit-identically.

Identity labels are kept in ``Dataset.eval_identity`` only; the scene and
person records handed to training code never carry them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import InvalidConfig
from .numkit import make_rng

FORMAT_VERSION = 1

# substream tags
_LAYOUT = 0
_RENDER = 1
_PROTOTYPES = 2


@dataclass
class DatasetConfig:
    num_identities: int = 200
    num_scenes: int = 1200
    min_persons: int = 2
    max_persons: int = 4
    scale_min: float = 0.25
    scale_max: float = 2.0
    canonical_height: int = 64
    canonical_width: int = 32
    scene_height: int = 136
    scene_width: int = 288
    noise_level: float = 0.04
    background_noise: float = 0.3
    background_gradient: float = 0.6
    illumination_jitter: float = 0.1
    color_jitter: float = 0.1
    num_bands: int = 8

    def validate(self) -> None:
        if self.num_identities < 2:
            raise InvalidConfig("num_identities must be >= 2")
        if self.num_scenes < self.num_identities:
            raise InvalidConfig("num_scenes must be >= num_identities")
        if not 1 <= self.min_persons <= self.max_persons:
            raise InvalidConfig("need 1 <= min_persons <= max_persons")
        if not 0.25 <= self.scale_min <= self.scale_max <= 2.0:
            raise InvalidConfig("scale range must lie within [0.25, 2.0]")
        hmin = round(self.canonical_height * self.scale_min)
        wmin = round(self.canonical_width * self.scale_min)
        if hmin < 16 or wmin < 8:
            raise InvalidConfig("smallest person would be below 16x8 pixels")
        hmax = round(self.canonical_height * self.scale_max)
        wmax = round(self.canonical_width * self.scale_max)
        if hmax > self.scene_height or wmax > self.scene_width:
            raise InvalidConfig("largest person does not fit in the scene")
        if self.noise_level < 0 or self.background_noise < 0:
            raise InvalidConfig("noise levels must be non-negative")
        if self.num_bands < 1:
            raise InvalidConfig("num_bands must be >= 1")
        if not (0 <= self.illumination_jitter < 1 and 0 <= self.color_jitter < 1):
            raise InvalidConfig("illumination_jitter and color_jitter must be in [0, 1)")


@dataclass(frozen=True)
class Identity:
    id: int
    base_color: tuple[float, float, float]
    stripe_period: float
    stripe_contrast: float
    band_colors: tuple = ()  # extra colours for lower body bands


@dataclass
class PersonGT:
    instance_index: int
    box: tuple[int, int, int, int]  # x, y, w, h
    mask: np.ndarray  # h x w bool
    scale_factor: float


@dataclass
class SceneRecord:
    scene_id: int
    raster: np.ndarray  # H x W x 3 float64 in [0, 1]
    persons: list[PersonGT]


@dataclass
class DatasetManifest:
    N: int
    num_identities: int
    num_scenes: int
    seed: int
    render: dict
    format_version: int = FORMAT_VERSION


@dataclass
class _Placement:
    instance_index: int
    box: tuple[int, int, int, int]
    scale_factor: float
    illumination: tuple[float, float, float]  # per-channel gain of this appearance


@dataclass
class Dataset:
    """Scene layouts plus a renderer; scenes are materialised on demand."""

    manifest: DatasetManifest
    config: DatasetConfig
    identities: list[Identity]
    layouts: list[list[_Placement]]
    eval_identity: np.ndarray  # identity id per instance, eval-only
    _loader: Callable[[int], SceneRecord] | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.manifest.N

    @property
    def num_scenes(self) -> int:
        return len(self.layouts)

    @property
    def scene_of(self) -> np.ndarray:
        out = np.empty(self.N, dtype=np.int64)
        for k, layout in enumerate(self.layouts):
            for p in layout:
                out[p.instance_index] = k
        return out

    def scene(self, k: int) -> SceneRecord:
        if self._loader is not None:
            return self._loader(k)
        return render_scene(self, k)

    def __iter__(self) -> Iterator[SceneRecord]:
        for k in range(self.num_scenes):
            yield self.scene(k)


def ellipse_mask(h: int, w: int) -> np.ndarray:
    """Foreground mask of the ellipse inscribed in an ``h x w`` box."""
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def person_size(cfg: DatasetConfig, scale_factor: float) -> tuple[int, int]:
    return (
        int(round(cfg.canonical_height * scale_factor)),
        int(round(cfg.canonical_width * scale_factor)),
    )


def render_person(
    identity: Identity,
    scale_factor: float,
    rng: np.random.Generator | None,
    cfg: DatasetConfig | None = None,
    illumination=1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one person patch and its mask.

    The stripe phase is tied to relative body height, so two renders of the
    same identity at different scales agree after resizing. Pass ``rng=None``
    for a noiseless render.
    """
    cfg = cfg or DatasetConfig()
    h, w = person_size(cfg, scale_factor)
    y_rel = (np.arange(h) + 0.5) / h
    wave = 0.5 - 0.5 * np.cos(2 * np.pi * y_rel * cfg.canonical_height / identity.stripe_period)
    shade = 1.0 - identity.stripe_contrast * wave  # (h,)
    colors = np.asarray((identity.base_color, *identity.band_colors))
    band = np.minimum((y_rel * len(colors)).astype(np.int64), len(colors) - 1)
    rows = shade[:, None] * colors[band] * np.asarray(illumination)  # (h, 3)
    patch = np.broadcast_to(rows[:, None, :], (h, w, 3)).copy()
    if rng is not None and cfg.noise_level > 0:
        patch += rng.normal(0.0, cfg.noise_level, size=patch.shape)
    np.clip(patch, 0.0, 1.0, out=patch)
    return patch, ellipse_mask(h, w)


def render_consistency_bound(
    identity: Identity, s1: float, s2: float, cfg: DatasetConfig | None = None
) -> float:
    """Upper bound on the mean absolute difference between noisy renders of
    one identity at scales ``s1`` and ``s2`` once both are resized to the
    ``s1`` size: the noiseless discrepancy plus twice the noise level."""
    from .imageops import bilinear_resize

    cfg = cfg or DatasetConfig()
    a, _ = render_person(identity, s1, None, cfg)
    b, _ = render_person(identity, s2, None, cfg)
    b = bilinear_resize(b, a.shape[:2])
    return float(np.mean(np.abs(a - b))) + 2.0 * cfg.noise_level


def make_identities(n: int, seed: int, num_bands: int = 1) -> list[Identity]:
    rng = make_rng(seed, _PROTOTYPES)
    out = []
    for i in range(n):
        color = tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3))
        period = float(rng.uniform(6.0, 24.0))
        contrast = float(rng.uniform(0.1, 0.6))
        bands = tuple(tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3)) for _ in range(num_bands - 1))
        out.append(Identity(i, color, period, contrast, bands))
    return out


def _iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def _place_boxes(cfg: DatasetConfig, n: int, rng: np.random.Generator):
    """Sample up to ``n`` non-overlapping boxes; returns (box, scale) pairs."""
    log_lo, log_hi = math.log(cfg.scale_min), math.log(cfg.scale_max)
    placed: list[tuple[tuple[int, int, int, int], float]] = []
    for _ in range(n):
        for _attempt in range(100):
            s = math.exp(rng.uniform(log_lo, log_hi))
            h, w = person_size(cfg, s)
            x = int(rng.integers(0, cfg.scene_width - w + 1))
            y = int(rng.integers(0, cfg.scene_height - h + 1))
            box = (x, y, w, h)
            if all(_iou(box, other) == 0.0 for other, _ in placed):
                placed.append((box, s))
                break
    return placed


def generate_dataset(config: DatasetConfig, seed: int) -> Dataset:
    """Lay out every scene and assign identities; rendering is deferred.

    Identities are assigned greedily to the least-used ones (random tie
    break), which balances appearances and never repeats an identity inside
    a scene.
    """
    config.validate()
    rng = make_rng(seed, _LAYOUT)
    identities = make_identities(config.num_identities, seed, config.num_bands)
    counts = np.zeros(config.num_identities, dtype=np.int64)
    layouts: list[list[_Placement]] = []
    eval_identity: list[int] = []
    for _k in range(config.num_scenes):
        n = int(rng.integers(config.min_persons, config.max_persons + 1))
        boxes = _place_boxes(config, n, rng)
        if not boxes:
            raise InvalidConfig("could not place any person in a scene")
        order = np.lexsort((rng.random(config.num_identities), counts))
        chosen = order[: len(boxes)]
        counts[chosen] += 1
        layout = []
        for (box, s), ident in zip(boxes, chosen):
            gain = 1.0 + float(rng.uniform(-1, 1)) * config.illumination_jitter
            cast = 1.0 + rng.uniform(-1, 1, size=3) * config.color_jitter
            illum = tuple(float(gain * c) for c in cast)
            layout.append(_Placement(len(eval_identity), box, s, illum))
            eval_identity.append(int(ident))
        layouts.append(layout)
    manifest = DatasetManifest(
        N=len(eval_identity),
        num_identities=config.num_identities,
        num_scenes=config.num_scenes,
        seed=int(seed),
        render=asdict(config),
    )
    return Dataset(manifest, config, identities, layouts, np.asarray(eval_identity, dtype=np.int64))


def _render_background(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.scene_height, cfg.scene_width
    base = rng.uniform(0.2, 0.8, size=3)
    g = cfg.background_gradient
    gy, gx = rng.uniform(-g, g, size=(2, 3))
    yy = np.linspace(-0.5, 0.5, H)[:, None, None]
    xx = np.linspace(-0.5, 0.5, W)[None, :, None]
    bg = base + gy * yy + gx * xx
    bg = bg + rng.uniform(-cfg.background_noise, cfg.background_noise, size=(H, W, 3))
    return bg


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_scene_u8(dataset: Dataset, k: int) -> np.ndarray:
    cfg = dataset.config
    rng = make_rng(dataset.manifest.seed, _RENDER, k)
    raster = _render_background(cfg, rng)
    for p in dataset.layouts[k]:
        ident = dataset.identities[dataset.eval_identity[p.instance_index]]
        patch, mask = render_person(ident, p.scale_factor, rng, cfg, p.illumination)
        x, y, w, h = p.box
        region = raster[y : y + h, x : x + w]
        region[mask] = patch[mask]
    return quantize(raster)


def _scene_record(dataset: Dataset, k: int, raster_u8: np.ndarray) -> SceneRecord:
    persons = [
        PersonGT(p.instance_index, p.box, ellipse_mask(p.box[3], p.box[2]), p.scale_factor)
        for p in dataset.layouts[k]
    ]
    return SceneRecord(k, raster_u8.astype(np.float64) / 255.0, persons)


def render_scene(dataset: Dataset, k: int) -> SceneRecord:
    return _scene_record(dataset, k, render_scene_u8(dataset, k))


# ---------------------------------------------------------------------------
# on-disk format
#
#   DIR/manifest.json         manifest, render config, identity prototypes,
#                             and an "eval" section with identity labels
#   DIR/scenes/index.json     per-scene sidecar (file name, shape, persons)
#   DIR/scenes/scene_NNNNN.bin  uint8 raster, H*W*3 row-major
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for k in range(dataset.num_scenes):
        raster = render_scene_u8(dataset, k)
        name = f"scene_{k:05d}.bin"
        (scenes_dir / name).write_bytes(raster.tobytes(order="C"))
        index.append(
            {
                "scene_id": k,
                "file": name,
                "height": int(raster.shape[0]),
                "width": int(raster.shape[1]),
                "channels": 3,
                "dtype": "uint8",
                "value_scale": 255,
                "persons": [
                    {
                        "instance_index": p.instance_index,
                        "box": list(p.box),
                        "scale_factor": p.scale_factor,
                        "illumination": list(p.illumination),
                    }
                    for p in dataset.layouts[k]
                ],
            }
        )
    (scenes_dir / "index.json").write_text(json.dumps(index, indent=1))
    doc = asdict(dataset.manifest)
    doc["scenes_index"] = "scenes/index.json"
    doc["identities"] = [asdict(i) for i in dataset.identities]
    doc["eval"] = {"identity_of_instance": dataset.eval_identity.tolist()}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1))


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    doc = json.loads((root / "manifest.json").read_text())
    cfg = DatasetConfig(**doc["render"])
    index = json.loads((root / doc["scenes_index"]).read_text())
    identities = [
        Identity(
            d["id"],
            tuple(d["base_color"]),
            d["stripe_period"],
            d["stripe_contrast"],
            tuple(tuple(c) for c in d["band_colors"]),
        )
        for d in doc["identities"]
    ]
    layouts = [
        [
            _Placement(p["instance_index"], tuple(p["box"]), p["scale_factor"], tuple(p["illumination"]))
            for p in entry["persons"]
        ]
        for entry in index
    ]
    manifest = DatasetManifest(
        N=doc["N"],
        num_identities=doc["num_identities"],
        num_scenes=doc["num_scenes"],
        seed=doc["seed"],
        render=doc["render"],
        format_version=doc.get("format_version", FORMAT_VERSION),
    )
    ds = Dataset(
        manifest,
        cfg,
        identities,
        layouts,
        np.asarray(doc["eval"]["identity_of_instance"], dtype=np.int64),
    )

    def loader(k: int) -> SceneRecord:
        entry = index[k]
        raw = np.frombuffer((root / "scenes" / entry["file"]).read_bytes(), dtype=np.uint8)
        raster = raw.reshape(entry["height"], entry["width"], entry["channels"])
        return _scene_record(ds, k, raster)

    ds._loader = loader
    return ds
