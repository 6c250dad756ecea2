"""Evaluation: pseudo-label pair quality, retrieval mAP / CMC top-1,
ablation tables and plots.

This is the only module that reads ground-truth identities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedCsv, QueryWithoutMatch
from .labeler import ClusterAssignment, PseudoLabelSet
from .numkit import make_rng

_PROBE_STREAM = 7


@dataclass
class EvalConfig:
    probe_fraction: float = 0.2


@dataclass
class LabelQuality:
    precision: float
    recall: float
    epoch: int | None = None
    no_predicted_pairs: bool = False


@dataclass
class RetrievalReport:
    mAP: float
    top1: float
    ap: np.ndarray
    num_queries: int
    gallery_size: int


def _pair_counts(gt: np.ndarray) -> int:
    _, counts = np.unique(gt, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _predicted_pairs(labels: PseudoLabelSet) -> np.ndarray:
    """Unordered pairs {i, j}, i != j, with j in P_i or i in P_j."""
    N = labels.N
    rows = np.concatenate([np.full(p.size, i) for i, p in enumerate(labels.positives)])
    cols = np.concatenate(labels.positives)
    keep = rows != cols
    a, b = np.minimum(rows[keep], cols[keep]), np.maximum(rows[keep], cols[keep])
    codes = np.unique(a.astype(np.int64) * N + b)
    return np.stack(np.divmod(codes, N), axis=1)


def label_quality(labels, gt, epoch: int | None = None) -> LabelQuality:
    """Pairwise precision / recall of predicted same-identity pairs.

    With no predicted pairs precision is reported as 1.0 and flagged.
    """
    gt = np.asarray(gt)
    true_pairs = _pair_counts(gt)
    if isinstance(labels, ClusterAssignment):
        predicted = _pair_counts(labels.labels)
        joint = labels.labels.astype(np.int64) * (int(gt.max()) + 1) + gt
        correct = _pair_counts(joint)
    else:
        pairs = _predicted_pairs(labels)
        predicted = len(pairs)
        correct = int(np.sum(gt[pairs[:, 0]] == gt[pairs[:, 1]])) if predicted else 0
        if epoch is None:
            epoch = labels.epoch
    precision = correct / predicted if predicted else 1.0
    recall = correct / true_pairs if true_pairs else 1.0
    return LabelQuality(precision, recall, epoch, predicted == 0)


def average_precision(relevance) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevance, dtype=np.float64)
    n = rel.sum()
    if n == 0:
        raise QueryWithoutMatch("no relevant item in ranking")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(rel * hits / ranks) / n)


def retrieval(
    query, gallery, query_ids, gallery_ids, query_index=None, gallery_index=None
) -> RetrievalReport:
    """Rank the gallery by cosine similarity for every query.

    When ``query_index``/``gallery_index`` are given, gallery entries with the
    same index as the query are removed (leave-one-out over a shared pool).
    Ties are ranked by ascending gallery position.
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    sims = qn @ gn.T
    match = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    valid = np.ones_like(match)
    if query_index is not None and gallery_index is not None:
        valid = np.asarray(query_index)[:, None] != np.asarray(gallery_index)[None, :]
    aps = np.empty(q.shape[0])
    top1 = np.empty(q.shape[0])
    for r in range(q.shape[0]):
        cols = np.flatnonzero(valid[r])
        order = cols[np.argsort(-sims[r, cols], kind="stable")]
        rel = match[r, order]
        if not rel.any():
            raise QueryWithoutMatch(f"query {r} has no same-identity gallery item")
        aps[r] = average_precision(rel)
        top1[r] = float(rel[0])
    return RetrievalReport(float(aps.mean()), float(top1.mean()), aps, q.shape[0], g.shape[0])


def probe_split(eval_identity: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Instances of a seeded ``fraction`` of identities, for query/gallery use."""
    ids = np.unique(eval_identity)
    n = max(1, int(round(fraction * ids.size)))
    chosen = make_rng(seed, _PROBE_STREAM).permutation(ids)[:n]
    return np.flatnonzero(np.isin(eval_identity, chosen))


class Evaluator:
    """Holds the eval-only identity labels; the trainer only sees its outputs."""

    def __init__(self, eval_identity, seed: int, cfg: EvalConfig | None = None):
        cfg = cfg or EvalConfig()
        self.gt = np.asarray(eval_identity)
        self.probe = probe_split(self.gt, cfg.probe_fraction, seed)

    def retrieval(self, features: np.ndarray) -> RetrievalReport:
        p = self.probe
        return retrieval(features[p], features[p], self.gt[p], self.gt[p], p, p)

    def labels(self, labels: PseudoLabelSet) -> LabelQuality:
        return label_quality(labels, self.gt)

    def clusters(self, clusters: ClusterAssignment, epoch: int | None = None) -> LabelQuality:
        return label_quality(clusters, self.gt, epoch)


# ---------------------------------------------------------------------------
# ablations

TABLE1_ARMS = {
    "baseline": {"losses.use_sl": False, "losses.use_dml": False, "losses.use_cluster": True},
    "+DML": {"losses.use_sl": False, "losses.use_dml": True, "losses.use_cluster": True},
    "+SL": {"losses.use_sl": True, "losses.use_dml": False, "losses.use_cluster": True},
    "full": {"losses.use_sl": True, "losses.use_dml": True, "losses.use_cluster": True},
}

# scale settings; labels come from the instance bank alone in every arm
TABLE2_ARMS = {
    "original-scale": {"trainer.scales": ["original"], "trainer.use_mask": False, "trainer.label_bank": "instance"},
    "one-scale": {"trainer.scales": [[56, 24]], "trainer.use_mask": False, "trainer.label_bank": "instance"},
    "multi-scale": {"trainer.use_mask": False, "trainer.label_bank": "instance"},
    "multi-scale+mask": {"trainer.use_mask": True, "trainer.label_bank": "instance"},
}

DELTA_SWEEP_ARMS = {f"delta={d:g}": {"losses.delta": d} for d in (0.5, 1.0, 2.0, 5.0)}

# The 0.6 DBSCAN radius percolates into one giant cluster on the synthetic
# features; 0.1 keeps clusters identity-sized.
TOY_BENCHMARK = {"dbscan.eps": 0.1}


def toy_benchmark_config():
    from .config import RunConfig, apply_overrides

    return apply_overrides(RunConfig(), TOY_BENCHMARK)


ABLATION_FIELDS = ["arm", "seed", "map", "top1", "label_precision", "label_recall"]


@dataclass
class AblationCell:
    arm: str
    seed: int
    map: float
    top1: float
    label_precision: float
    label_recall: float
    history: list = field(default_factory=list, repr=False)
    label_history: list = field(default_factory=list, repr=False)


_POOL_CACHE: dict = {}
_POOL_CACHE_SIZE = 8


def _pooled_for(cfg, seed):
    """Dataset and pooled inputs, shared by arms with the same data and scales."""
    import json
    from dataclasses import asdict

    from .synthdata import generate_dataset
    from .trainer import pool_dataset

    tc = cfg.trainer
    key = (json.dumps(asdict(cfg.data), sort_keys=True), seed, json.dumps(tc.scales), tc.use_mask, cfg.encoder.grid)
    if key not in _POOL_CACHE:
        if len(_POOL_CACHE) >= _POOL_CACHE_SIZE:
            _POOL_CACHE.pop(next(iter(_POOL_CACHE)))
        dataset = generate_dataset(cfg.data, seed)
        _POOL_CACHE[key] = (dataset, pool_dataset(dataset, tc.presets(), tc.use_mask, cfg.encoder.grid))
    return _POOL_CACHE[key]


def _run_cell(args):
    from .config import apply_overrides
    from .trainer import run

    base, arm, overrides, seed, keep_history = args
    cfg = apply_overrides(base, {**overrides, "trainer.seed": seed})
    dataset, inputs = _pooled_for(cfg, seed)
    state = run(cfg, dataset, inputs=inputs)
    last = state.metrics[-1]
    return AblationCell(
        arm,
        seed,
        last["map"],
        last["top1"],
        last["label_precision"],
        last["label_recall"],
        state.metrics if keep_history else [],
        state.label_quality if keep_history else [],
    )


def run_ablation(base, arms: dict, seeds, threads: int = 1, keep_history: bool = False) -> list[AblationCell]:
    """Train every (arm, seed) cell and return the final-epoch results.

    ``arms`` maps an arm name to dotted config overrides, e.g.
    ``{"losses.use_sl": False}``.
    """
    seeds = [int(s) for s in seeds]
    # seed-major order so consecutive cells share a cached dataset
    jobs = [(base, name, ov, s, keep_history) for s in seeds for name, ov in arms.items()]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as ex:
            cells = list(ex.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    rank = {name: k for k, name in enumerate(arms)}
    return sorted(cells, key=lambda c: (rank[c.arm], seeds.index(c.seed)))


def ablation_table(cells: list[AblationCell]) -> dict:
    """Mean and sample standard deviation of each metric per arm."""
    out = {}
    for arm in dict.fromkeys(c.arm for c in cells):
        rows = [c for c in cells if c.arm == arm]
        out[arm] = {}
        for key in ("map", "top1", "label_precision", "label_recall"):
            vals = np.array([getattr(c, key) for c in rows])
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out[arm][key] = (float(vals.mean()), std)
    return out


def write_ablation_csv(path, cells: list[AblationCell]) -> None:
    """Per-cell rows, then one ``<arm>:mean`` and one ``<arm>:std`` row per arm."""
    summary = ablation_table(cells)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for c in cells:
            w.writerow([c.arm, c.seed, _fmt(c.map), _fmt(c.top1), _fmt(c.label_precision), _fmt(c.label_recall)])
        for arm, stats in summary.items():
            for k, tag in ((0, "mean"), (1, "std")):
                w.writerow(
                    [f"{arm}:{tag}", ""]
                    + [_fmt(stats[m][k]) for m in ("map", "top1", "label_precision", "label_recall")]
                )


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# plots


def read_csv_columns(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2 or not rows[0]:
        raise MalformedCsv(f"{path}: no header or no data rows")
    header = rows[0]
    body = rows[1:]
    if any(len(r) != len(header) for r in body):
        raise MalformedCsv(f"{path}: ragged rows")
    cols = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in body]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return cols


_FAMILIES = {
    "losses": ["loss_total", "loss_sl", "loss_dml", "loss_cluster"],
    "retrieval": ["map", "top1"],
    "labels": ["label_precision", "label_recall"],
}


def emit_plots(metrics_csvs, out_dir, label_quality_csvs=()) -> list[Path]:
    """One SVG per metric family across the given metrics CSVs.

    ``label_quality_csvs`` (``epoch,source,precision,recall,...``) add a
    precision/recall-vs-epoch plot comparing multi-label and cluster labels.
    Output bytes depend only on the inputs.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [(Path(p).parent.name or Path(p).stem, read_csv_columns(p)) for p in metrics_csvs]
    with matplotlib.rc_context({"svg.hashsalt": "scalemetric", "svg.fonttype": "none"}):
        return _draw(runs, out, label_quality_csvs, plt)


def _draw(runs, out, label_quality_csvs, plt) -> list[Path]:
    written = []
    for family, keys in _FAMILIES.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, cols in runs:
            for k in keys:
                if k in cols:
                    ax.plot(cols["epoch"], cols[k], label=f"{name}:{k}" if len(runs) > 1 else k)
        ax.set_xlabel("epoch")
        ax.set_title(family)
        ax.legend(fontsize=7)
        path = out / f"{family}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    if label_quality_csvs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in label_quality_csvs:
            cols = read_csv_columns(p)
            for source in dict.fromkeys(cols["source"]):
                sel = cols["source"] == source
                ax.plot(cols["epoch"][sel], cols["precision"][sel], label=f"{source} precision")
                ax.plot(cols["epoch"][sel], cols["recall"][sel], linestyle="--", label=f"{source} recall")
        ax.set_xlabel("epoch")
        ax.set_title("pseudo-label quality")
        ax.legend(fontsize=7)
        path = out / "label_quality.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
