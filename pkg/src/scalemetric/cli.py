"""Command-line entry point: ``scalemetric {gen,train,label,eval}``.

Exit codes: 0 success, 2 invalid config or CSV schema, 3 I/O failure,
4 training failure, 5 inconsistent embedding dimensions, 6 checkpoint
mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import CheckpointMismatch, DimMismatch, InvalidConfig, MalformedCsv, ScaleMetricError
from .evalkit import DELTA_SWEEP_ARMS, TABLE1_ARMS, TABLE2_ARMS

log = logging.getLogger("scalemetric")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAIN = 4
EXIT_DIM = 5
EXIT_CKPT = 6

ARM_GROUPS = {"table1": TABLE1_ARMS, "table2": TABLE2_ARMS, "delta": DELTA_SWEEP_ARMS}
ALL_ARMS = {**TABLE1_ARMS, **TABLE2_ARMS, **DELTA_SWEEP_ARMS}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path) -> cfgmod.RunConfig:
    if path is None:
        return cfgmod.RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    return cfgmod.loads(text)


def _echo_config(cfg, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.dumps())


def _package_module(tb) -> str:
    pkg = Path(__file__).resolve().parent
    name = "trainer"
    for frame in traceback.extract_tb(tb):
        path = Path(frame.filename).resolve()
        if path.parent == pkg:
            name = path.stem
    return name


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    from .synthdata import generate_dataset, save_dataset

    cfg = _load_config(args.config)
    dataset = generate_dataset(cfg.data, cfg.trainer.seed)
    save_dataset(dataset, args.out)
    _echo_config(cfg, args.out)
    print(f"wrote {dataset.num_scenes} scenes, {dataset.N} instances, seed {dataset.manifest.seed} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _resolve_arms(names: str) -> dict:
    arms = {}
    for name in (s.strip() for s in names.split(",")):
        if not name:
            continue
        if name in ARM_GROUPS:
            arms.update(ARM_GROUPS[name])
        elif name in ALL_ARMS:
            arms[name] = ALL_ARMS[name]
        else:
            raise InvalidConfig(f"unknown arm {name!r}; choose from {sorted(ALL_ARMS)} or {sorted(ARM_GROUPS)}")
    if not arms:
        raise InvalidConfig("--ablate needs at least one arm")
    for overrides in arms.values():
        cfgmod.apply_overrides(cfgmod.RunConfig(), overrides)
    return arms


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise InvalidConfig(f"bad --seeds value {text!r}") from exc


def cmd_train(args) -> int:
    from .evalkit import run_ablation, write_ablation_csv
    from .synthdata import load_dataset
    from .trainer import run

    cfg = _load_config(args.config)
    out = Path(args.out)
    if args.ablate:
        arms = _resolve_arms(args.ablate)
        seeds = _parse_seeds(args.seeds)
        _echo_config(cfg, out)
        try:
            cells = run_ablation(cfg, arms, seeds, threads=args.threads)
        except (InvalidConfig, OSError):
            raise
        except Exception as exc:
            mod = _package_module(exc.__traceback__)
            raise CliError(EXIT_TRAIN, f"training failed in module {mod}: {exc}") from exc
        write_ablation_csv(out / "ablation.csv", cells)
        print(f"wrote {out / 'ablation.csv'} ({len(cells)} cells)")
        return EXIT_OK

    if args.data is None:
        raise InvalidConfig("train needs --data unless --ablate is given")
    try:
        dataset = load_dataset(args.data)
    except (KeyError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"dataset manifest in {args.data} is malformed: {exc}") from exc
    if dataset.config != cfg.data:
        log.warning("config data section differs from the dataset on disk; the dataset wins")
    _echo_config(cfg, out)
    try:
        state = run(cfg, dataset, out_dir=out, resume=args.resume)
    except (InvalidConfig, CheckpointMismatch, OSError):
        raise
    except Exception as exc:
        mod = _package_module(exc.__traceback__)
        raise CliError(EXIT_TRAIN, f"training failed in module {mod}: {exc}") from exc
    last = state.metrics[-1] if state.metrics else None
    if last is not None:
        print(f"epoch {last['epoch']}: mAP {last['map']:.4f} top-1 {last['top1']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# label


def read_embeddings(path):
    """Parse ``instance_id,scene_id[,gt_id],f_0..f_{d-1}``.

    Returns (instance_ids, scene_ids, gt_ids or None, features).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedCsv(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["instance_id", "scene_id"]:
        raise MalformedCsv(f"{path}: header must start with instance_id,scene_id")
    has_gt = len(header) > 2 and header[2] == "gt_id"
    feat_cols = header[3:] if has_gt else header[2:]
    if not feat_cols or feat_cols != [f"f_{k}" for k in range(len(feat_cols))]:
        raise MalformedCsv(f"{path}: feature columns must be f_0..f_(d-1)")
    lead = 3 if has_gt else 2
    d = len(feat_cols)
    ids, scenes, gts, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) - lead != d:
            raise DimMismatch(f"{path}:{lineno}: expected {d} features, found {len(row) - lead}")
        try:
            ids.append(int(row[0]))
            scenes.append(int(row[1]))
            if has_gt:
                gts.append(int(row[2]))
            feats.append([float(x) for x in row[lead:]])
        except ValueError as exc:
            raise MalformedCsv(f"{path}:{lineno}: {exc}") from exc
    if not ids:
        raise MalformedCsv(f"{path}: no data rows")
    if len(set(ids)) != len(ids):
        raise MalformedCsv(f"{path}: duplicate instance_id")
    F = np.asarray(feats, dtype=np.float64)
    return np.asarray(ids), np.asarray(scenes), (np.asarray(gts) if has_gt else None), F


def read_scene_map(path) -> dict[int, int]:
    """``instance_id,scene_id`` rows."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:2]] != ["instance_id", "scene_id"]:
        raise MalformedCsv(f"{path}: header must be instance_id,scene_id")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out[int(row[0])] = int(row[1])
        except (ValueError, IndexError) as exc:
            raise MalformedCsv(f"{path}:{lineno}: {exc}") from exc
    return out


def label_embeddings(F, scene_of, cfg, epoch: int):
    """Single-write banks from raw embeddings, then labels and clusters."""
    from .labeler import build_label_sets, dbscan
    from .membank import MemoryBank, fuse, similarity
    from .numkit import l2_normalize_rows

    U = l2_normalize_rows(F)
    N, d = U.shape
    bank_I, bank_M = MemoryBank(N, d), MemoryBank(N, d)
    idx = np.arange(N)
    bank_I.update_many(idx, U, cfg.trainer.bank())
    bank_M.update_many(idx, U, cfg.trainer.bank())
    fused = fuse(bank_M, bank_I, cfg.trainer.renormalize_banks)
    S = similarity(fused)
    labels = build_label_sets(S, scene_of, cfg.threshold, epoch)
    clusters = dbscan(fused, cfg.dbscan.eps, cfg.dbscan.min_pts, S)
    return labels, clusters


def cmd_label(args) -> int:
    from .evalkit import label_quality
    from .labeler import write_label_dump

    cfg = _load_config(args.config)
    ids, scenes, gts, F = read_embeddings(args.embeddings)
    if args.scenes is not None:
        smap = read_scene_map(args.scenes)
        for i, s in zip(ids.tolist(), scenes.tolist()):
            if smap.get(i, s) != s:
                raise MalformedCsv(f"instance {i}: scene {s} in embeddings, {smap[i]} in {args.scenes}")
    labels, clusters = label_embeddings(F, scenes, cfg, args.epoch)
    out = Path(args.out)
    _echo_config(cfg, out)
    write_label_dump(out / "labels.csv", labels, clusters, ids)
    print(f"wrote {out / 'labels.csv'} ({labels.N} instances, {clusters.num_clusters} clusters)")
    if gts is not None:
        lq = label_quality(labels, gts, args.epoch)
        cq = label_quality(clusters, gts, args.epoch)
        doc = {
            src: {"precision": q.precision, "recall": q.recall, "no_predicted_pairs": q.no_predicted_pairs}
            for src, q in (("multilabel", lq), ("cluster", cq))
        }
        (out / "label_quality.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        print(f"multilabel precision {lq.precision:.4f} recall {lq.recall:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .evalkit import Evaluator, emit_plots
    from .synthdata import load_dataset
    from .trainer import encode_main, latest_checkpoint, load_checkpoint, pool_dataset

    ckpt = Path(args.ckpt)
    if not (ckpt / "meta.json").is_file():
        found = latest_checkpoint(ckpt) or latest_checkpoint(ckpt / "ckpt")
        if found is None:
            raise CliError(EXIT_IO, f"no checkpoint under {ckpt}")
        ckpt = found
    cfg = _load_config(args.config) if args.config else None
    dataset = load_dataset(args.data)
    try:
        state, meta = load_checkpoint(ckpt, cfg, dataset.N)
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"unreadable checkpoint meta in {ckpt}: {exc}") from exc
    if cfg is None:
        cfg = cfgmod.from_dict(meta["config"])
    tc = cfg.trainer
    inputs = pool_dataset(dataset, tc.presets(), tc.use_mask, cfg.encoder.grid)
    rep = Evaluator(dataset.eval_identity, tc.seed, cfg.eval).retrieval(encode_main(state, inputs))
    out = Path(args.out) if args.out else ckpt.parent.parent / "eval"
    _echo_config(cfg, out)
    report = {
        "checkpoint": ckpt.name,
        "epoch": meta["epoch"],
        "map": rep.mAP,
        "top1": rep.top1,
        "num_queries": rep.num_queries,
        "gallery_size": rep.gallery_size,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    run_dir = ckpt.parent.parent
    metrics = [p for p in [run_dir / "metrics.csv"] if p.is_file()]
    lq = [p for p in [run_dir / "label_quality.csv"] if p.is_file()]
    plots = emit_plots(metrics, out, lq) if metrics else []
    print(f"mAP {rep.mAP:.4f} top-1 {rep.top1:.4f}; wrote {out / 'report.json'} and {len(plots)} plots")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scalemetric", description="Synthetic person-search pseudo-label training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="run config JSON (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--threads", type=int, default=1, help="worker processes (generation is single-threaded)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one run, or an ablation grid with --ablate")
    t.add_argument("--config", help="run config JSON (defaults used when omitted)")
    t.add_argument("--data", help="dataset directory written by 'gen'")
    t.add_argument("--out", required=True, help="run directory for checkpoints and CSVs")
    t.add_argument("--resume", action="store_true", help="continue from the newest complete checkpoint")
    t.add_argument("--ablate", help="comma-separated arm names or groups: " + ", ".join([*ARM_GROUPS, *ALL_ARMS]))
    t.add_argument("--seeds", default="0,1,2,3,4", help="ablation seeds, comma-separated (default 0..4)")
    t.add_argument("--threads", type=int, default=1, help="ablation worker processes (default 1)")
    t.set_defaults(func=cmd_train)

    lab = sub.add_parser("label", help="pseudo-label externally produced embeddings")
    lab.add_argument("--embeddings", required=True, help="CSV instance_id,scene_id[,gt_id],f_0..f_{d-1}")
    lab.add_argument("--scenes", help="optional CSV instance_id,scene_id checked against the embeddings")
    lab.add_argument("--config", help="run config JSON for threshold and dbscan settings")
    lab.add_argument("--epoch", type=int, default=0, help="epoch fed to the dynamic threshold (default 0)")
    lab.add_argument("--out", default=".", help="output directory for labels.csv (default .)")
    lab.add_argument("--threads", type=int, default=1, help="unused; labelling is single-threaded")
    lab.set_defaults(func=cmd_label)

    e = sub.add_parser("eval", help="retrieval report and plots for a checkpoint")
    e.add_argument("--ckpt", required=True, help="epoch checkpoint directory, ckpt root, or run directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--config", help="override the config stored in the checkpoint")
    e.add_argument("--out", help="output directory (default <run>/eval)")
    e.add_argument("--threads", type=int, default=1, help="unused; evaluation is single-threaded")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InvalidConfig, MalformedCsv) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIM
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScaleMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
