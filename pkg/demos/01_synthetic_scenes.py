"""Generate a small synthetic person-search dataset and look at one scene.

Every person is drawn at a random scale, so the same identity shows up as a
large figure in one scene and a tiny one in another. The script prints the
layout of the first scene, builds its multi-scale exemplar crops, and saves
the scene plus the crops to demos/out/scene0.png.

    python3 demos/01_synthetic_scenes.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from scalemetric.imageops import TOY_PRESETS, build_exemplar_set
from scalemetric.synthdata import DatasetConfig, generate_dataset

cfg = DatasetConfig(num_identities=20, num_scenes=40)
ds = generate_dataset(cfg, seed=0)
print(f"{ds.N} person instances in {ds.num_scenes} scenes, {cfg.num_identities} identities")

counts = np.bincount(ds.eval_identity)
print(f"instances per identity: min {counts.min()}, max {counts.max()}")

scene = ds.scene(0)
print(f"scene 0 raster {scene.raster.shape}")
for p in scene.persons:
    x, y, w, h = p.box
    print(f"  instance {p.instance_index:3d}  box {w}x{h} at ({x},{y})  scale {p.scale_factor:.2f}"
          f"  identity {ds.eval_identity[p.instance_index]}")

sets = [build_exemplar_set(scene, p, TOY_PRESETS, use_mask=True) for p in scene.persons]
cols = 2 + len(TOY_PRESETS)
fig, axes = plt.subplots(len(sets), cols, figsize=(2 * cols, 2.4 * len(sets)), squeeze=False)
for row, ex in zip(axes, sets):
    row[0].imshow(np.clip(scene.raster, 0, 1))
    row[1].imshow(np.clip(ex.original_crop, 0, 1))
    row[1].set_title("crop", fontsize=8)
    for ax, crop, preset in zip(row[2:], ex.scaled_crops, TOY_PRESETS):
        ax.imshow(np.clip(crop, 0, 1))
        ax.set_title(f"{preset.height}x{preset.width}", fontsize=8)
    for ax in row:
        ax.axis("off")
out = Path(__file__).with_name("out") / "scene0.png"
out.parent.mkdir(exist_ok=True)
fig.tight_layout()
fig.savefig(out, dpi=80)
print(f"wrote {out}")
