"""Compare loss combinations over a couple of seeds.

Each arm switches the scale-invariant and multi-label terms on or off while
keeping the cluster loss. A reduced dataset keeps this under a minute; the
full-size grid is what ``tests/test_acceptance.py`` runs.

    python3 demos/04_loss_ablation.py
"""

from pathlib import Path

from scalemetric.config import apply_overrides
from scalemetric.evalkit import TABLE1_ARMS, ablation_table, run_ablation, toy_benchmark_config, write_ablation_csv

base = apply_overrides(toy_benchmark_config(), {"data.num_identities": 60, "data.num_scenes": 300})
cells = run_ablation(base, TABLE1_ARMS, seeds=[0, 1])

print(f"{'arm':10s} {'mAP':>14s} {'top1':>14s}")
for arm, row in ablation_table(cells).items():
    (m, ms), (t, ts) = row["map"], row["top1"]
    print(f"{arm:10s} {m:.3f} +- {ms:.3f} {t:.3f} +- {ts:.3f}")

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)
write_ablation_csv(out / "ablation.csv", cells)
print(f"wrote {out / 'ablation.csv'}")
