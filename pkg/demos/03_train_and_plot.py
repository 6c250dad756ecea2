"""Train the linear encoder on a small dataset and plot the curves.

Uses a reduced dataset so the run finishes in well under a minute. Metrics,
per-epoch checkpoints and SVG plots go to demos/out/train.

    python3 demos/03_train_and_plot.py
"""

from pathlib import Path

from scalemetric.config import apply_overrides
from scalemetric.evalkit import emit_plots, toy_benchmark_config
from scalemetric.synthdata import generate_dataset
from scalemetric.trainer import run

out = Path(__file__).with_name("out") / "train"
cfg = apply_overrides(
    toy_benchmark_config(),
    {"data.num_identities": 40, "data.num_scenes": 160, "trainer.epochs": 10},
)
ds = generate_dataset(cfg.data, cfg.trainer.seed)
print(f"training on {ds.N} instances for {cfg.trainer.epochs} epochs")
state = run(cfg, ds, out_dir=out)

for row in state.metrics:
    print(f"epoch {row['epoch']:2d}  loss {row['loss_total']:.4f}  mAP {row['map']:.3f}"
          f"  top1 {row['top1']:.3f}  label P {row['label_precision']:.3f}")

paths = emit_plots([out / "metrics.csv"], out / "plots", [out / "label_quality.csv"])
print("plots:", ", ".join(p.name for p in paths))
