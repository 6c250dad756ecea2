"""Pseudo labels from embeddings alone.

Noisy copies of a few prototype vectors stand in for encoder output. The
labels come from thresholded similarity, pruned so that no two people in one
scene share a label, and from DBSCAN clusters. Both are scored against the
hidden identities.

    python3 demos/02_label_engine.py
"""

import numpy as np

from scalemetric.evalkit import label_quality
from scalemetric.labeler import ThresholdConfig, build_label_sets, dbscan, dynamic_threshold
from scalemetric.membank import BankConfig, MemoryBank, fuse, similarity
from scalemetric.numkit import l2_normalize_rows

rng = np.random.default_rng(0)
num_ids, d, num_scenes = 15, 16, 30
protos = l2_normalize_rows(rng.normal(size=(num_ids, d)))

# three people per scene, all different identities
gt = np.concatenate([rng.choice(num_ids, size=3, replace=False) for _ in range(num_scenes)])
scene_of = np.repeat(np.arange(num_scenes), 3)
feats = l2_normalize_rows(protos[gt] + 0.25 * rng.normal(size=(gt.size, d)))
feats_ms = l2_normalize_rows(protos[gt] + 0.25 * rng.normal(size=(gt.size, d)))

bank_I, bank_M = MemoryBank(gt.size, d), MemoryBank(gt.size, d)
bank_I.update_many(np.arange(gt.size), feats, BankConfig())
bank_M.update_many(np.arange(gt.size), feats_ms, BankConfig())
fused = fuse(bank_M, bank_I)
S = similarity(fused)

print("epoch  threshold  multilabel P/R    dbscan P/R")
cfg = ThresholdConfig()
clusters = dbscan(fused, eps=0.3, min_pts=2, S=S)
cq = label_quality(clusters, gt)
for epoch in (0, 5, 10, 25):
    labels = build_label_sets(S, scene_of, cfg, epoch)
    q = label_quality(labels, gt)
    print(f"{epoch:5d}  {dynamic_threshold(cfg, epoch):.4f}     {q.precision:.3f}/{q.recall:.3f}"
          f"       {cq.precision:.3f}/{cq.recall:.3f}")

same_scene = sum(
    np.unique(scene_of[p]).size != p.size for p in build_label_sets(S, scene_of, cfg, 25).positives
)
print(f"label sets with two members from one scene: {same_scene}")
print(f"{clusters.num_clusters} clusters, {int(clusters.noise.sum())} noise points kept as singletons")
