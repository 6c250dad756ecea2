"""Acceptance gate A1-A10. Each test records one PASS/FAIL line that is
printed in the pytest terminal summary.

A5-A7 train the toy benchmark (200 identities, d=32, 26 epochs) for five
seeds and take roughly half an hour on one core.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, rel_err, unit_rows
from oracles import label_sets_loop, scene_loss_loop
from scalemetric.config import apply_overrides
from scalemetric.dmlloss import DmlConfig, cluster_loss_batch, ml_loss_batch
from scalemetric.encoder import backward_pooled, forward_pooled
from scalemetric.evalkit import TABLE1_ARMS, TABLE2_ARMS, run_ablation, toy_benchmark_config
from scalemetric.imageops import bilinear_resize
from scalemetric.labeler import ThresholdConfig, binarize, build_label_sets, dynamic_threshold, refine
from scalemetric.membank import BankConfig, MemoryBank, holistic_backward, holistic_features
from scalemetric.numkit import gram
from scalemetric.silloss import SceneFeatures, SilConfig, scene_loss, scene_loss_grad
from scalemetric.synthdata import generate_dataset
from scalemetric.trainer import pool_dataset, run

SEEDS = [0, 1, 2, 3, 4]


def record(crit, ok, detail):
    ACCEPTANCE_LINES.append(f"{crit} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{crit}: {detail}"


# ---------------------------------------------------------------------------
# A1 gradient suite


def fd_matrix(fn, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        old = W[idx]
        W[idx] = old + h
        up = fn(W)
        W[idx] = old - h
        down = fn(W)
        W[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def _sil_kink_free(sf, cfg, tol=1e-3):
    res = scene_loss(sf, cfg)
    if np.any(np.abs(res.hinge) < tol):
        return False
    d = np.sum((sf.main[:, None, None] - sf.exemplars[None]) ** 2, -1)
    for i in range(sf.P):
        own = np.sort(d[i, i, : sf.K])
        if sf.K > 1 and own[-1] - own[-2] < tol:
            return False
        others = np.sort(np.delete(d[i], i, axis=0).ravel())
        if others[1] - others[0] < tol:
            return False
    return True


def _sil_case(r):
    d, D = 4, 6
    P, K = int(r.integers(2, 5)), int(r.integers(1, 4))
    W = r.normal(size=(d, D))
    Pm, Pe = r.random((P, D)), r.random((P * (K + 1), D))
    cfg = SilConfig(float(r.uniform(0.1, 1.5)), float(r.uniform(0, 0.2)))

    def feats(W):
        F, nF = forward_pooled(W, Pm)
        E, nE = forward_pooled(W, Pe)
        return F, nF, E, nE

    def loss_w(W):
        F, _, E, _ = feats(W)
        return scene_loss(SceneFeatures(F, E.reshape(P, K + 1, d)), cfg).value

    F, nF, E, nE = feats(W)
    sf = SceneFeatures(F, E.reshape(P, K + 1, d))
    if not _sil_kink_free(sf, cfg):
        return None
    _, gF, gE = scene_loss_grad(sf, cfg)
    dW = backward_pooled(F, nF, Pm, gF) + backward_pooled(E, nE, Pe, gE.reshape(-1, d))
    e_w = rel_err(dW, fd_matrix(loss_w, W))
    e_f = rel_err(gF, fd_matrix(lambda x: scene_loss(SceneFeatures(x, sf.exemplars), cfg).value, F.copy()))
    return max(e_w, e_f)


def _ml_case(r):
    d, D, N, q, V = 4, 6, 10, 3, 3
    W = r.normal(size=(d, D))
    MI, MM = unit_rows(r, N, d), unit_rows(r, N, d)
    Pm, Pe = r.random((q, D)), r.random((q * V, D))
    pos = [np.sort(r.choice(N, size=int(r.integers(1, 4)), replace=False)) for _ in range(q)]
    cfg = DmlConfig(float(r.uniform(0.5, 3)))

    def parts(W):
        F, nF = forward_pooled(W, Pm)
        E, nE = forward_pooled(W, Pe)
        H, nH = holistic_features(E.reshape(q, V, d))
        return F, nF, E, nE, H, nH

    def loss_w(W):
        F, _, _, _, H, _ = parts(W)
        return ml_loss_batch(MI, F, pos, cfg)[0] + ml_loss_batch(MM, H, pos, cfg)[0]

    F, nF, E, nE, H, nH = parts(W)
    _, g1 = ml_loss_batch(MI, F, pos, cfg)
    _, g2 = ml_loss_batch(MM, H, pos, cfg)
    gE = holistic_backward(H, nH, g2, V)
    dW = backward_pooled(F, nF, Pm, g1) + backward_pooled(E, nE, Pe, gE.reshape(-1, d))
    e_w = rel_err(dW, fd_matrix(loss_w, W))
    e_f = rel_err(g1, fd_matrix(lambda x: ml_loss_batch(MI, x, pos, cfg)[0], F.copy()))
    return max(e_w, e_f)


def _cluster_case(r):
    d, D, C, q = 4, 6, 5, 3
    W = r.normal(size=(d, D))
    cents = unit_rows(r, C, d)
    Pm = r.random((q, D))
    own = r.integers(0, C, size=q)
    cfg = DmlConfig(tau=float(r.uniform(0.05, 0.5)))

    def loss_w(W):
        return cluster_loss_batch(cents, forward_pooled(W, Pm)[0], own, cfg)[0]

    F, nF = forward_pooled(W, Pm)
    _, g = cluster_loss_batch(cents, F, own, cfg)
    dW = backward_pooled(F, nF, Pm, g)
    e_w = rel_err(dW, fd_matrix(loss_w, W))
    e_f = rel_err(g, fd_matrix(lambda x: cluster_loss_batch(cents, x, own, cfg)[0], F.copy()))
    return max(e_w, e_f)


def test_a1_gradient_suite():
    t0 = time.perf_counter()
    r = np.random.default_rng(101)
    worst = {}
    for name, case in (("scale", _sil_case), ("ml", _ml_case), ("cluster", _cluster_case)):
        errs = []
        while len(errs) < 100:
            e = case(r)
            if e is not None:
                errs.append(e)
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    record("A1", ok, f"300 configs; {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A2 hard mining oracle


def test_a2_hard_mining_oracle():
    r = np.random.default_rng(202)
    mismatches, worst = 0, 0.0
    for _ in range(1000):
        P, K = int(r.integers(1, 7)), int(r.integers(1, 5))
        main = unit_rows(r, P, 4)
        ex = unit_rows(r, P * (K + 1), 4).reshape(P, K + 1, 4)
        if r.random() < 0.3:  # exact duplicates force ties
            ex[:, -1] = ex[:, 0]
            if P > 1:
                ex[1] = ex[0]
        cfg = SilConfig(float(r.uniform(0, 1)), float(r.uniform(0, 0.2)))
        res = scene_loss(SceneFeatures(main, ex), cfg)
        value, hp, hn = scene_loss_loop(main, ex, cfg.margin, cfg.gamma)
        same = res.hard_pos.tolist() == hp and (P < 2 or [tuple(x) for x in res.hard_neg.tolist()] == hn)
        mismatches += not same
        worst = max(worst, abs(res.value - value))
    record("A2", mismatches == 0 and worst <= 1e-12, f"1000 instances; {mismatches} selection mismatches; max value diff {worst:.1e}")


# ---------------------------------------------------------------------------
# A3 label engine invariants


def test_a3_label_invariants():
    r = np.random.default_rng(303)
    bad = 0
    for _ in range(1000):
        n = int(r.integers(2, 30))
        S = gram(unit_rows(r, n, int(r.integers(2, 5))))
        scene_of = r.integers(0, int(r.integers(1, 10)), size=n)
        epoch = int(r.integers(0, 30))
        labels = build_label_sets(S, scene_of, ThresholdConfig(), epoch)
        t = dynamic_threshold(ThresholdConfig(), epoch)
        ok = [p.tolist() for p in labels.positives] == label_sets_loop(S.tolist(), scene_of.tolist(), t)
        for i, pos in enumerate(labels.positives):
            others = pos[pos != i]
            ok &= i in pos
            ok &= bool(np.all(scene_of[others] != scene_of[i]))
            ok &= np.unique(scene_of[others]).size == others.size
            y = binarize(S[i], t)
            y[i] = 1
            ok &= bool(np.all(refine(y, S[i], i, scene_of) <= y))
        bad += not ok
    record("A3", bad == 0, f"1000 random (S, scene map) instances; {bad} violations")


# ---------------------------------------------------------------------------
# A4 threshold law


def test_a4_threshold_law():
    cfg = ThresholdConfig()
    ts = np.array([dynamic_threshold(cfg, e) for e in range(201)])
    ok = ts[0] == pytest.approx(0.7, abs=1e-15) and np.all(np.diff(ts) < 0) and abs(ts[200] - 0.6) < 1e-6
    record("A4", bool(ok), f"t(0)={ts[0]:.12f}, strictly decreasing over 0..200, t(200)-0.6={ts[200] - 0.6:.1e}")


# ---------------------------------------------------------------------------
# A5-A7 toy benchmark trends


@pytest.fixture(scope="module")
def table1():
    t0 = time.perf_counter()
    cells = run_ablation(toy_benchmark_config(), TABLE1_ARMS, SEEDS, keep_history=True)
    return cells, time.perf_counter() - t0


@pytest.fixture(scope="module")
def table2():
    t0 = time.perf_counter()
    cells = run_ablation(toy_benchmark_config(), TABLE2_ARMS, SEEDS)
    return cells, time.perf_counter() - t0


def per_seed(cells, arms):
    return {a: np.array([c.map for c in cells if c.arm == a]) for a in arms}


@pytest.mark.slow
def test_a5_table1_trend(table1):
    cells, elapsed = table1
    m = per_seed(cells, TABLE1_ARMS)
    b, dml, sl, full = m["baseline"], m["+DML"], m["+SL"], m["full"]
    seed_ok = (b < dml) & (b < sl) & (full >= dml) & (full >= sl)
    means = {k: v.mean() for k, v in m.items()}
    ok = (
        means["baseline"] < means["+DML"]
        and means["baseline"] < means["+SL"]
        and means["full"] >= max(means["+DML"], means["+SL"])
        and means["full"] - means["baseline"] >= 0.05
        and seed_ok.sum() >= 4
        and elapsed < 3600
    )
    detail = ", ".join(f"{k} {100 * v:.1f}" for k, v in means.items())
    record(
        "A5",
        ok,
        f"mean mAP {detail}; full-baseline {100 * (means['full'] - means['baseline']):+.1f} pts; "
        f"ordering holds in {int(seed_ok.sum())}/5 seeds (per seed: baseline<+DML {int((b < dml).sum())}, "
        f"baseline<+SL {int((b < sl).sum())}, full>=+DML {int((full >= dml).sum())}, "
        f"full>=+SL {int((full >= sl).sum())}); {elapsed / 60:.1f} min",
    )


@pytest.mark.slow
def test_a6_table2_trend(table2):
    cells, elapsed = table2
    m = per_seed(cells, TABLE2_ARMS)
    means = {k: v.mean() for k, v in m.items()}
    diff = m["multi-scale+mask"] - m["multi-scale"]
    noise = 2 * diff.std(ddof=1) / np.sqrt(diff.size)
    mask_ok = diff.mean() >= 0 or diff.mean() >= -noise
    tie = diff.mean() < 0 and mask_ok
    ok = means["multi-scale"] > means["one-scale"] and means["multi-scale"] > means["original-scale"] and mask_ok
    detail = ", ".join(f"{k} {100 * v:.1f}" for k, v in means.items())
    note = f"; mask vs no mask tie within noise ({100 * diff.mean():+.2f} pts, 2se {100 * noise:.2f})" if tie else ""
    record("A6", ok, f"mean mAP {detail}{note}; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_a7_label_precision_trend(table1):
    cells, _ = table1
    full = [c for c in cells if c.arm == "full"]
    epochs = sorted({r["epoch"] for c in full for r in c.label_history if r["epoch"] >= 5})
    worst = np.inf
    fails = []
    for e in epochs:
        ml = np.mean([r["precision"] for c in full for r in c.label_history if r["epoch"] == e and r["source"] == "multilabel"])
        cl = np.mean([r["precision"] for c in full for r in c.label_history if r["epoch"] == e and r["source"] == "cluster"])
        worst = min(worst, ml - cl)
        if ml < cl:
            fails.append(e)
    e5 = [
        np.mean([r["precision"] for c in full for r in c.label_history if r["epoch"] == 5 and r["source"] == s])
        for s in ("multilabel", "cluster")
    ]
    record(
        "A7",
        not fails,
        f"full arm, epochs 5-25: multi-label minus cluster precision min {worst:+.3f}; "
        f"epoch 5 {e5[0]:.3f} vs {e5[1]:.3f}; failing epochs {fails if fails else 'none'}",
    )


# ---------------------------------------------------------------------------
# A8 bilinear exactness


def test_a8_bilinear_exactness():
    r = np.random.default_rng(808)
    errs = []
    out = bilinear_resize(np.array([[0.0, 1.0], [2.0, 3.0]]), (3, 3))
    errs.append(np.abs(out - np.array([[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])).max())
    for _ in range(20):
        h, w = int(r.integers(2, 40)), int(r.integers(2, 40))
        img = r.random((h, w, 3))
        errs.append(np.abs(bilinear_resize(img, (h, w)) - img).max())
        c = float(r.random())
        th, tw = int(r.integers(1, 200)), int(r.integers(1, 200))
        errs.append(np.abs(bilinear_resize(np.full((h, w, 3), c), (th, tw)) - c).max())
    worst = max(errs)
    record("A8", worst <= 1e-12, f"2x2->3x3, 20 identity and 20 constant resizes; max abs err {worst:.1e}")


# ---------------------------------------------------------------------------
# A9 / A10 full runs


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    cfg = toy_benchmark_config()
    dataset = generate_dataset(cfg.data, 0)
    tc = cfg.trainer
    inputs = pool_dataset(dataset, tc.presets(), tc.use_mask, cfg.encoder.grid)
    out = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(f"run_{name}")
        t0 = time.perf_counter()
        state = run(cfg, dataset, out_dir=d, inputs=inputs)
        out.append((d, state, time.perf_counter() - t0))
    return out


@pytest.mark.slow
def test_a9_bank_invariants(twin_runs):
    _, state, _ = twin_runs[0]
    worst_run = max(
        np.abs(np.linalg.norm(b.storage, axis=1) - 1).max() for b in (state.bank_I, state.bank_M)
    )
    r = np.random.default_rng(909)
    N, d = 50, 8
    seq = [(int(r.integers(N)), unit_rows(r, 1, d)[0], float(r.uniform(0.05, 1))) for _ in range(10000)]
    banks = []
    fixed_worst = 0.0
    for rep in range(2):
        bank = MemoryBank(N, d)
        for k, (i, f, lam) in enumerate(seq):
            bank.update(i, f, BankConfig(lam))
            if rep == 0 and k % 10 == 0:
                before = bank.storage[i].copy()
                probe = bank.copy()
                probe.update(i, before, BankConfig(lam))
                fixed_worst = max(fixed_worst, np.abs(probe.storage[i] - before).max())
        banks.append(bank)
    worst_seq = np.abs(np.linalg.norm(banks[0].storage[banks[0].initialized], axis=1) - 1).max()
    same = banks[0].storage.tobytes() == banks[1].storage.tobytes()
    ok = worst_run <= 1e-6 and worst_seq <= 1e-6 and fixed_worst <= 1e-9 and same
    record(
        "A9",
        ok,
        f"after full run max |norm-1| {worst_run:.1e}; 10000 updates: |norm-1| {worst_seq:.1e}, "
        f"fixed point {fixed_worst:.1e}, replay identical {same}",
    )


@pytest.mark.slow
def test_a10_determinism(twin_runs):
    (a, _, ta), (b, _, tb) = twin_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = files == other and not differing and any(f.name == "metrics.csv" for f in files)
    record(
        "A10",
        ok,
        f"{len(files)} files (metrics, label quality, {len(list((a / 'ckpt').iterdir()))} checkpoints) "
        f"byte-identical across two runs; {len(differing)} differ; run times {ta:.0f}s/{tb:.0f}s",
    )
