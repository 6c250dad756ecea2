"""End-to-end training: scale-invariant loss, multi-label memory loss and
cluster loss on one shared encoder, with per-epoch re-labelling.

Pooling is fixed, so every crop is pooled once up front
(:func:`pool_dataset`) and training touches only pooled vectors.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .dmlloss import cluster_centroids, cluster_loss_batch, ml_loss_batch
from .errors import CheckpointMismatch, InvalidConfig
from .imageops import ORIGINAL_PRESET, ScalePreset, build_exemplar_set, validate_presets
from .labeler import ClusterAssignment, PseudoLabelSet, build_label_sets, dbscan, dynamic_threshold
from .membank import BankConfig, MemoryBank, fuse, holistic_backward, holistic_features, similarity
from .numkit import l2_normalize_rows, make_rng
from .silloss import SceneFeatures, scene_loss_grad

log = logging.getLogger(__name__)

CKPT_VERSION = 1
_INIT_STREAM = 11
_SHUFFLE_STREAM = 12

METRIC_FIELDS = [
    "epoch",
    "loss_total",
    "loss_sl",
    "loss_dml",
    "loss_cluster",
    "label_precision",
    "label_recall",
    "map",
    "top1",
    "threshold",
]
LABEL_QUALITY_FIELDS = ["epoch", "source", "precision", "recall", "no_predicted_pairs"]


@dataclass
class TrainConfig:
    epochs: int = 26
    batch_size: int = 2
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: list = field(default_factory=lambda: [16, 22])
    decay_factor: float = 0.1
    bank_momentum: float = 0.8
    renormalize_banks: bool = True
    scales: list = field(default_factory=lambda: [[28, 12], [56, 24], [112, 48]])
    use_mask: bool = True
    label_bank: str = "fused"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.label_bank not in ("fused", "instance"):
            raise InvalidConfig("label_bank must be 'fused' or 'instance'")
        self.sgd().validate()
        self.bank().validate()
        validate_presets(self.presets())

    def sgd(self) -> enc.SgdConfig:
        return enc.SgdConfig(
            self.learning_rate, self.momentum, self.weight_decay, tuple(self.decay_epochs), self.decay_factor
        )

    def bank(self) -> BankConfig:
        return BankConfig(self.bank_momentum, self.renormalize_banks)

    def presets(self) -> list[ScalePreset]:
        out = []
        for k, s in enumerate(self.scales):
            if s == "original":
                out.append(ORIGINAL_PRESET)
            else:
                out.append(ScalePreset(f"scale-{k + 1}", int(s[0]), int(s[1])))
        return out


@dataclass
class PooledInputs:
    """Pooled encoder inputs for every instance.

    ``main``: (N, D) from the un-masked native crop. ``exemplars``:
    (N, K+1, D), the K scaled crops followed by the original-scale crop.
    """

    main: np.ndarray
    exemplars: np.ndarray
    scene_members: list[np.ndarray]
    scene_of: np.ndarray

    @property
    def N(self) -> int:
        return self.main.shape[0]


def pool_dataset(dataset, presets, use_mask: bool, grid) -> PooledInputs:
    N = dataset.N
    D = 3 * grid[0] * grid[1]
    K = len(presets)
    main = np.empty((N, D))
    ex = np.empty((N, K + 1, D))
    members = []
    for scene in dataset:
        idx = []
        for person in scene.persons:
            es = build_exemplar_set(scene, person, presets, use_mask)
            i = person.instance_index
            main[i] = enc.pool(es.context_crop, grid)
            for k, img in enumerate(es.scaled_crops):
                ex[i, k] = enc.pool(img, grid)
            ex[i, K] = enc.pool(es.original_crop, grid)
            idx.append(i)
        members.append(np.array(sorted(idx), dtype=np.int64))
    return PooledInputs(main, ex, members, dataset.scene_of)


@dataclass
class TrainState:
    params: enc.EncoderParams
    sgd: enc.SgdState
    bank_I: MemoryBank
    bank_M: MemoryBank
    epoch: int = 0
    labels: PseudoLabelSet | None = None
    clusters: ClusterAssignment | None = None
    centroids: np.ndarray | None = None
    similarity: np.ndarray | None = None
    metrics: list = field(default_factory=list)
    label_quality: list = field(default_factory=list)


def init_state(config, N: int) -> TrainState:
    rng = make_rng(config.trainer.seed, _INIT_STREAM)
    params = enc.init_params(config.encoder, rng)
    d = config.encoder.d
    return TrainState(params, enc.SgdState(config.trainer.sgd()), MemoryBank(N, d), MemoryBank(N, d))


def _labels_ready(state: TrainState) -> bool:
    return (
        state.labels is not None
        and state.bank_I.fully_initialized
        and state.bank_M.fully_initialized
    )


def batch_objective(W: np.ndarray, state: TrainState, idx_scenes, config, inputs: PooledInputs, grad_mask=None):
    """Loss terms for a list of scene member arrays and the gradient w.r.t. ``W``.

    Pure: neither the banks nor the optimiser are touched. Returns
    ``(terms, dW, F, H)`` where ``F``/``H`` are the instance and holistic
    features used for the bank writes; ``dW`` is None when every loss is off.
    ``grad_mask`` zeroes the gradient of named terms (``"sl"``, ``"dml"``,
    ``"cluster"``) while still reporting their values.
    """
    lc = config.losses
    scenes = idx_scenes
    idx = np.concatenate(scenes)
    q = idx.size
    Pm = inputs.main[idx]
    V = inputs.exemplars.shape[1]
    Pe = inputs.exemplars[idx].reshape(q * V, -1)
    F, nF = enc.forward_pooled(W, Pm)
    Ef, nE = enc.forward_pooled(W, Pe)
    E = Ef.reshape(q, V, -1)
    H, nH = holistic_features(E)
    gF = np.zeros_like(F)
    gE = np.zeros_like(E)
    masked = set(grad_mask or ())
    out = {"sl": 0.0, "dml": 0.0, "cluster": 0.0, "total": 0.0}

    if lc.use_sl:
        B = len(scenes)
        start = 0
        for m in scenes:
            sl = slice(start, start + m.size)
            v, gm, ge = scene_loss_grad(SceneFeatures(F[sl], E[sl]), lc.sil())
            out["sl"] += v / B
            if "sl" not in masked:
                gF[sl] += gm / B
                gE[sl] += ge / B
            start += m.size

    if _labels_ready(state):
        if lc.use_dml:
            pos = [state.labels.positives[i] for i in idx]
            v1, g1 = ml_loss_batch(state.bank_I.storage, F, pos, lc.dml())
            v2, g2 = ml_loss_batch(state.bank_M.storage, H, pos, lc.dml())
            out["dml"] = v1 + v2
            if "dml" not in masked:
                gF += g1
                gE += holistic_backward(H, nH, g2, V)
        if lc.use_cluster:
            v, g = cluster_loss_batch(state.centroids, F, state.clusters.labels[idx], lc.dml())
            out["cluster"] = v
            if "cluster" not in masked:
                gF += g

    out["total"] = out["sl"] + out["dml"] + out["cluster"]
    dW = None
    if lc.use_sl or lc.use_dml or lc.use_cluster:
        dW = enc.backward_pooled(F, nF, Pm, gF) + enc.backward_pooled(Ef, nE, Pe, gE.reshape(q * V, -1))
    return out, dW, F, H


def train_step(state: TrainState, scene_batch, config, inputs: PooledInputs, grad_mask=None) -> dict:
    """One optimisation step over a batch of scene ids, then the bank writes."""
    scenes = [inputs.scene_members[k] for k in scene_batch]
    for k, m in zip(scene_batch, scenes):
        if m.size == 0:
            log.warning("scene %d has no persons; skipped", k)
    scenes = [m for m in scenes if m.size]
    if not scenes:
        return {"sl": 0.0, "dml": 0.0, "cluster": 0.0, "total": 0.0}
    out, dW, F, H = batch_objective(state.params.W, state, scenes, config, inputs, grad_mask)
    if dW is not None:
        enc.sgd_step(state.params, state.sgd, dW, state.epoch)
    idx = np.concatenate(scenes)
    bcfg = config.trainer.bank()
    state.bank_I.update_many(idx, F, bcfg)
    state.bank_M.update_many(idx, H, bcfg)
    return out


def label_matrix(state: TrainState, config) -> np.ndarray:
    """Rows used for labelling and clustering."""
    if config.trainer.label_bank == "instance":
        M = state.bank_I.rows()
        return l2_normalize_rows(M) if config.trainer.renormalize_banks else M
    return fuse(state.bank_M, state.bank_I, config.trainer.renormalize_banks)


def relabel(state: TrainState, config, epoch: int, scene_of) -> None:
    """Regenerate labels, clusters and centroids from the current banks."""
    if not (state.bank_I.fully_initialized and state.bank_M.fully_initialized):
        state.labels = state.clusters = state.centroids = state.similarity = None
        return
    M = label_matrix(state, config)
    S = similarity(M)
    state.similarity = S
    state.labels = build_label_sets(S, scene_of, config.threshold, epoch)
    state.clusters = dbscan(M, config.dbscan.eps, config.dbscan.min_pts, S=S)
    state.centroids = cluster_centroids(M, state.clusters.labels)


def epoch_boundary(state: TrainState, config, scene_of) -> TrainState:
    relabel(state, config, state.epoch, scene_of)
    state.epoch += 1
    return state


def epoch_batches(config, epoch: int, num_scenes: int) -> list[np.ndarray]:
    order = make_rng(config.trainer.seed, _SHUFFLE_STREAM, epoch).permutation(num_scenes)
    B = config.trainer.batch_size
    return [order[k : k + B] for k in range(0, num_scenes, B)]


def encode_main(state: TrainState, inputs: PooledInputs) -> np.ndarray:
    F, _ = enc.forward_pooled(state.params.W, inputs.main)
    return F


# ---------------------------------------------------------------------------
# checkpoints: ckpt/epoch_<e>/{encoder.bin, banks.bin, meta.json}


def _ckpt_meta(state: TrainState, config, completed_epoch: int) -> dict:
    return {
        "version": CKPT_VERSION,
        "epoch": completed_epoch,
        "d": int(state.params.W.shape[0]),
        "input_dim": int(state.params.W.shape[1]),
        "grid": list(state.params.grid),
        "N": int(state.bank_I.N),
        "schedule": {
            "learning_rate": config.trainer.learning_rate,
            "decay_epochs": list(config.trainer.decay_epochs),
            "decay_factor": config.trainer.decay_factor,
            "epochs": config.trainer.epochs,
        },
        "encoder_layout": ["W", "velocity"],
        "banks_layout": ["M_I", "M_M"],
        "bank_I_initialized": state.bank_I.initialized.astype(int).tolist(),
        "bank_M_initialized": state.bank_M.initialized.astype(int).tolist(),
        "config": config.to_dict(),
        "metrics": state.metrics,
        "label_quality": state.label_quality,
    }


def _le_bytes(*arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_checkpoint(state: TrainState, config, ckpt_root, completed_epoch: int) -> Path:
    root = Path(ckpt_root)
    root.mkdir(parents=True, exist_ok=True)
    final = root / f"epoch_{completed_epoch}"
    tmp = root / f".epoch_{completed_epoch}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    vel = state.sgd.velocity if state.sgd.velocity is not None else np.zeros_like(state.params.W)
    (tmp / "encoder.bin").write_bytes(_le_bytes(state.params.W, vel))
    (tmp / "banks.bin").write_bytes(_le_bytes(state.bank_I.storage, state.bank_M.storage))
    meta = _ckpt_meta(state, config, completed_epoch)
    (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def load_checkpoint(ckpt_dir, config=None, N: int | None = None) -> tuple[TrainState, dict]:
    """Restore params, optimiser velocity and banks from one epoch directory.

    Raises CheckpointMismatch when the stored dimensions disagree with
    ``config`` / ``N`` or the format version is unknown.
    """
    ckpt = Path(ckpt_dir)
    meta = json.loads((ckpt / "meta.json").read_text())
    if meta.get("version") != CKPT_VERSION:
        raise CheckpointMismatch(f"checkpoint version {meta.get('version')} != {CKPT_VERSION}")
    d, D, n = meta["d"], meta["input_dim"], meta["N"]
    if config is not None:
        if config.encoder.d != d or config.encoder.input_dim != D:
            raise CheckpointMismatch(
                f"checkpoint has d={d}, D={D}; config expects d={config.encoder.d}, D={config.encoder.input_dim}"
            )
    if N is not None and N != n:
        raise CheckpointMismatch(f"checkpoint has N={n}, dataset has N={N}")
    w = np.frombuffer((ckpt / "encoder.bin").read_bytes(), dtype="<f8")
    b = np.frombuffer((ckpt / "banks.bin").read_bytes(), dtype="<f8")
    if w.size != 2 * d * D or b.size != 2 * n * d:
        raise CheckpointMismatch("binary payload size does not match meta.json")
    W = w[: d * D].reshape(d, D).astype(np.float64)
    vel = w[d * D :].reshape(d, D).astype(np.float64)
    from .config import from_dict

    cfg = config if config is not None else from_dict(meta["config"])
    params = enc.EncoderParams(W, tuple(meta["grid"]))
    sgd = enc.SgdState(cfg.trainer.sgd(), vel)
    bank_I, bank_M = MemoryBank(n, d), MemoryBank(n, d)
    bank_I.storage[:] = b[: n * d].reshape(n, d)
    bank_M.storage[:] = b[n * d :].reshape(n, d)
    bank_I.initialized[:] = np.asarray(meta["bank_I_initialized"], dtype=bool)
    bank_M.initialized[:] = np.asarray(meta["bank_M_initialized"], dtype=bool)
    state = TrainState(params, sgd, bank_I, bank_M, epoch=meta["epoch"] + 1)
    state.metrics = meta["metrics"]
    state.label_quality = meta["label_quality"]
    return state, meta


def latest_checkpoint(ckpt_root) -> Path | None:
    root = Path(ckpt_root)
    if not root.is_dir():
        return None
    done = [p for p in root.glob("epoch_*") if (p / "meta.json").is_file()]
    if not done:
        return None
    return max(done, key=lambda p: int(p.name.split("_")[1]))


# ---------------------------------------------------------------------------


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run(config, dataset, out_dir=None, inputs: PooledInputs | None = None, resume: bool = False,
        evaluator=None, stop_after: int | None = None) -> TrainState:
    """Train for ``config.trainer.epochs`` epochs.

    With ``out_dir`` a checkpoint is written after every epoch together with
    ``metrics.csv`` and ``label_quality.csv``. ``resume`` restarts from the
    newest complete checkpoint. ``stop_after`` ends the run early after that
    many epochs in this call (used to simulate an interruption).
    """
    from .evalkit import Evaluator

    config.validate()
    tc = config.trainer
    if inputs is None:
        inputs = pool_dataset(dataset, tc.presets(), tc.use_mask, config.encoder.grid)
    if evaluator is None:
        evaluator = Evaluator(dataset.eval_identity, tc.seed, config.eval)
    scene_of = inputs.scene_of
    out = Path(out_dir) if out_dir is not None else None
    ckpt_root = out / "ckpt" if out is not None else None

    state = None
    if resume and ckpt_root is not None:
        last = latest_checkpoint(ckpt_root)
        if last is not None:
            state, _ = load_checkpoint(last, config, inputs.N)
            relabel(state, config, state.epoch - 1, scene_of)
    if state is None:
        state = init_state(config, inputs.N)

    done_here = 0
    while state.epoch < tc.epochs:
        e = state.epoch
        sums = {"sl": 0.0, "dml": 0.0, "cluster": 0.0, "total": 0.0}
        batches = epoch_batches(config, e, len(inputs.scene_members))
        for batch in batches:
            br = train_step(state, batch, config, inputs)
            for k in sums:
                sums[k] += br[k]
        epoch_boundary(state, config, scene_of)
        nb = len(batches)
        report = evaluator.retrieval(encode_main(state, inputs))
        row = {
            "epoch": e,
            "loss_total": sums["total"] / nb,
            "loss_sl": sums["sl"] / nb,
            "loss_dml": sums["dml"] / nb,
            "loss_cluster": sums["cluster"] / nb,
            "label_precision": float("nan"),
            "label_recall": float("nan"),
            "map": report.mAP,
            "top1": report.top1,
            "threshold": dynamic_threshold(config.threshold, e),
        }
        if state.labels is not None:
            lq = evaluator.labels(state.labels)
            cq = evaluator.clusters(state.clusters, e)
            row["label_precision"], row["label_recall"] = lq.precision, lq.recall
            for source, q in (("multilabel", lq), ("cluster", cq)):
                state.label_quality.append(
                    {"epoch": e, "source": source, "precision": q.precision, "recall": q.recall,
                     "no_predicted_pairs": int(q.no_predicted_pairs)}
                )
        state.metrics.append(row)
        log.info("epoch %d %s", e, {k: round(v, 4) for k, v in row.items()})
        if out is not None:
            save_checkpoint(state, config, ckpt_root, e)
            write_csv(out / "metrics.csv", METRIC_FIELDS, state.metrics)
            write_csv(out / "label_quality.csv", LABEL_QUALITY_FIELDS, state.label_quality)
        done_here += 1
        if stop_after is not None and done_here >= stop_after:
            break
    return state
