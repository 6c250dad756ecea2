"""Pseudo labels from the fused memory: thresholded multi-labels refined by
the same-scene exclusion rule, and DBSCAN cluster labels."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InvalidConfig
from .numkit import argsort_desc, gram


@dataclass
class ThresholdConfig:
    t_s: float = 0.6
    alpha: float = 0.1
    beta: float = -0.1

    def validate(self) -> None:
        if not 0 < self.t_s < 1:
            raise InvalidConfig("t_s must be in (0, 1)")
        if self.alpha < 0 or self.beta > 0:
            raise InvalidConfig("need alpha >= 0 and beta <= 0")


@dataclass
class DbscanConfig:
    eps: float = 0.6
    min_pts: int = 2

    def validate(self) -> None:
        if not self.eps > 0 or self.min_pts < 1:
            raise InvalidConfig("need eps > 0 and min_pts >= 1")


@dataclass
class PseudoLabelSet:
    positives: list[np.ndarray]  # sorted index arrays, each contains its own row
    threshold: float
    epoch: int

    @property
    def N(self) -> int:
        return len(self.positives)

    def negatives(self, i: int) -> np.ndarray:
        mask = np.ones(self.N, dtype=bool)
        mask[self.positives[i]] = False
        return np.flatnonzero(mask)


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # cluster id per instance, contiguous from 0
    noise: np.ndarray  # True for DBSCAN noise points (singleton clusters)

    @property
    def num_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def dynamic_threshold(cfg: ThresholdConfig, epoch: int) -> float:
    if epoch < 0:
        raise InvalidConfig("epoch must be >= 0")
    return cfg.t_s + cfg.alpha * math.exp(cfg.beta * epoch)


def binarize(S_row, t: float) -> np.ndarray:
    return (np.asarray(S_row) >= t).astype(np.int8)


def refine(Y_i, S_i, query: int, scene_of) -> np.ndarray:
    """Prune a label row using "one identity appears at most once per scene".

    Own-scene candidates are dropped first. The rest are visited by
    descending similarity; accepting a candidate rejects every unvisited
    candidate from the same scene.
    """
    Y_i = np.asarray(Y_i)
    S_i = np.asarray(S_i, dtype=np.float64)
    scene_of = np.asarray(scene_of)
    out = np.zeros_like(Y_i)
    out[query] = 1
    cand = np.flatnonzero(Y_i)
    cand = cand[(cand != query) & (scene_of[cand] != scene_of[query])]
    if cand.size == 0:
        return out
    order = cand[argsort_desc(S_i[cand])]
    # first visit of each scene in traversal order is the accepted candidate
    _, first = np.unique(scene_of[order], return_index=True)
    out[order[first]] = 1
    return out


def build_label_sets(S: np.ndarray, scene_of, cfg: ThresholdConfig, epoch: int) -> PseudoLabelSet:
    t = dynamic_threshold(cfg, epoch)
    scene_of = np.asarray(scene_of)
    Y = S >= t
    positives = []
    for i in range(S.shape[0]):
        row = Y[i].copy()
        row[i] = True
        refined = refine(row, S[i], i, scene_of)
        positives.append(np.flatnonzero(refined))
    return PseudoLabelSet(positives, t, epoch)


def dbscan(fused: np.ndarray, eps: float, min_pts: int, S: np.ndarray | None = None) -> ClusterAssignment:
    """DBSCAN with cosine distance ``1 - s`` on unit rows.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Core points linked by an eps-edge share a cluster; a
    border point joins the first cluster, in ascending-index discovery
    order, that has a core neighbour of it. Noise points become singleton
    clusters. Final ids are numbered by each cluster's smallest member.
    """
    if not eps > 0 or min_pts < 1:
        raise InvalidConfig("need eps > 0 and min_pts >= 1")
    if S is None:
        S = gram(fused)
    N = S.shape[0]
    adj = (1.0 - S) <= eps
    np.fill_diagonal(adj, True)
    core = adj.sum(axis=1) >= min_pts
    core_idx = np.flatnonzero(core)
    raw = np.full(N, -1, dtype=np.int64)
    if core_idx.size:
        sub = csr_matrix(adj[np.ix_(core_idx, core_idx)])
        _, comp = connected_components(sub, directed=False)
        # discovery order = order of each component's smallest core index
        first = {}
        for c in comp:
            first.setdefault(int(c), len(first))
        raw[core_idx] = [first[int(c)] for c in comp]
        border = np.flatnonzero(~core & adj[:, core].any(axis=1))
        for b in border:
            raw[b] = raw[core_idx[adj[b, core_idx]]].min()
    noise = raw < 0
    next_id = raw.max() + 1 if core_idx.size else 0
    for i in np.flatnonzero(noise):
        raw[i] = next_id
        next_id += 1
    # renumber by smallest member index
    remap = {}
    labels = np.empty(N, dtype=np.int64)
    for i in range(N):
        labels[i] = remap.setdefault(int(raw[i]), len(remap))
    return ClusterAssignment(labels, noise)


def dbscan_reference(points_dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook queue-based DBSCAN on a distance matrix; -1 marks noise.

    Kept as a second route for cross-checking :func:`dbscan`.
    """
    N = points_dist.shape[0]
    labels = np.full(N, -2, dtype=np.int64)  # -2 unvisited
    cid = 0
    for i in range(N):
        if labels[i] != -2:
            continue
        nbrs = np.flatnonzero(points_dist[i] <= eps)
        if nbrs.size < min_pts:
            labels[i] = -1
            continue
        labels[i] = cid
        queue = deque(int(j) for j in nbrs)
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cid
            if labels[j] != -2:
                continue
            labels[j] = cid
            nj = np.flatnonzero(points_dist[j] <= eps)
            if nj.size >= min_pts:
                queue.extend(int(k) for k in nj)
        cid += 1
    return labels


def write_label_dump(path, labels: PseudoLabelSet, clusters: ClusterAssignment, instance_ids=None) -> None:
    """CSV ``epoch,instance,positives,cluster_id``; positives joined by ';'."""
    ids = np.arange(labels.N) if instance_ids is None else np.asarray(instance_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "instance", "positives", "cluster_id"])
        for i in range(labels.N):
            pos = ";".join(str(int(ids[p])) for p in labels.positives[i])
            w.writerow([labels.epoch, int(ids[i]), pos, int(clusters.labels[i])])
