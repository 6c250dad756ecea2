import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from conftest import central_diff, rel_err, unit_rows
from oracles import scene_loss_loop
from scalemetric.errors import DimMismatch, EmptyBatch
from scalemetric.silloss import SceneFeatures, SilConfig, batch_loss, batch_loss_grad, scene_loss, scene_loss_grad


def two_person_scene():
    main = np.array([[1.0, 0.0], [0.0, 1.0]])
    ex = np.array([[[0.8, 0.6], [1.0, 0.0]], [[0.6, 0.8], [0.0, 1.0]]])
    return SceneFeatures(main, ex)


def random_scene(r, P, K, d=4):
    main = unit_rows(r, P, d)
    ex = unit_rows(r, P * (K + 1), d).reshape(P, K + 1, d)
    return SceneFeatures(main, ex)


def test_hand_traced_scene():
    sf = two_person_scene()
    res = scene_loss(sf, SilConfig(margin=0.3, gamma=0.0))
    assert res.value == 0.0
    np.testing.assert_allclose(res.hinge, [-0.1, -0.1], atol=1e-12)
    res = scene_loss(sf, SilConfig(margin=0.5, gamma=0.0))
    assert res.value == pytest.approx(0.1, abs=1e-12)
    assert scene_loss(sf, SilConfig(margin=0.3, gamma=0.05)).value == 0.0


def test_single_person_keeps_only_anchor_term(rng):
    sf = random_scene(rng, 1, 3)
    res = scene_loss(sf, SilConfig(gamma=0.05))
    assert res.value == pytest.approx(0.05 * np.sum((sf.main[0] - sf.exemplars[0, 3]) ** 2), abs=1e-15)
    assert res.hard_neg.tolist() == [[-1, -1]]


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 0.2))
def test_matches_triple_loop(P, K, seed, m, gamma):
    sf = random_scene(np.random.default_rng(seed), P, K)
    res = scene_loss(sf, SilConfig(m, gamma))
    value, hp, hn = scene_loss_loop(sf.main, sf.exemplars, m, gamma)
    assert res.value == pytest.approx(value, abs=1e-12)
    assert res.hard_pos.tolist() == hp
    if P >= 2:
        assert [tuple(x) for x in res.hard_neg.tolist()] == hn


@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_pool_membership_and_nonnegativity(P, K, seed):
    res = scene_loss(random_scene(np.random.default_rng(seed), P, K), SilConfig())
    assert res.value >= 0
    assert np.all(res.hard_pos < K)
    assert np.all(res.hard_neg[:, 0] != np.arange(P))
    assert np.all((res.hard_neg[:, 1] >= 0) & (res.hard_neg[:, 1] <= K))


@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_monotone_in_margin(P, K, seed, m1, m2):
    sf = random_scene(np.random.default_rng(seed), P, K)
    lo, hi = sorted((m1, m2))
    assert scene_loss(sf, SilConfig(lo)).value <= scene_loss(sf, SilConfig(hi)).value


@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_rotation_keeps_selections(P, K, seed):
    r = np.random.default_rng(seed)
    sf = random_scene(r, P, K)
    R = special_ortho_group.rvs(4, random_state=seed % (2**32))
    rot = SceneFeatures(sf.main @ R.T, sf.exemplars @ R.T)
    a, b = scene_loss(sf, SilConfig()), scene_loss(rot, SilConfig())
    # rotations perturb distances at the ulp level; only compare untied picks
    d = np.sum((sf.main[:, None, None] - sf.exemplars[None]) ** 2, -1)
    for i in range(P):
        own = np.sort(d[i, i, :K])
        if K < 2 or own[-1] - own[-2] > 1e-9:
            assert a.hard_pos[i] == b.hard_pos[i]
        others = np.sort(np.delete(d[i], i, axis=0).ravel())
        if others.size < 2 or others[1] - others[0] > 1e-9:
            assert a.hard_neg[i].tolist() == b.hard_neg[i].tolist()


def test_inactive_hinge_zero_gradient():
    _, gm, ge = scene_loss_grad(two_person_scene(), SilConfig(0.3, 0.0))
    assert not gm.any() and not ge.any()


def test_anchor_gradient_term(rng):
    sf = random_scene(rng, 3, 2)
    cfg = SilConfig(margin=0.0, gamma=0.07)
    res = scene_loss(sf, cfg)
    _, gm, _ = scene_loss_grad(sf, cfg)
    for i in range(3):
        expect = 2 * 0.07 / 3 * (sf.main[i] - sf.exemplars[i, 2])
        if res.hinge[i] > 0:
            s, (j, t) = res.hard_pos[i], res.hard_neg[i]
            expect = expect + 2 / 3 * ((sf.main[i] - sf.exemplars[i, s]) - (sf.main[i] - sf.exemplars[j, t]))
        np.testing.assert_allclose(gm[i], expect, atol=1e-15)


def kink_free(sf, cfg, tol=1e-3):
    res = scene_loss(sf, cfg)
    if sf.P >= 2 and np.any(np.abs(res.hinge) < tol):
        return False
    d = np.sum((sf.main[:, None, None] - sf.exemplars[None]) ** 2, -1)
    for i in range(sf.P):
        own = np.sort(d[i, i, : sf.K])
        if sf.K > 1 and own[-1] - own[-2] < tol:
            return False
        others = np.sort(np.delete(d[i], i, axis=0).ravel())
        if others.size > 1 and others[1] - others[0] < tol:
            return False
    return True


def test_gradients_match_finite_differences():
    r = np.random.default_rng(5)
    checked = 0
    while checked < 20:
        sf = random_scene(r, int(r.integers(2, 5)), int(r.integers(1, 4)))
        cfg = SilConfig(float(r.uniform(0.2, 1.5)), float(r.uniform(0, 0.2)))
        if not kink_free(sf, cfg):
            continue
        _, gm, ge = scene_loss_grad(sf, cfg)
        nm = central_diff(lambda x: scene_loss(SceneFeatures(x, sf.exemplars), cfg).value, sf.main)
        ne = central_diff(lambda x: scene_loss(SceneFeatures(sf.main, x), cfg).value, sf.exemplars)
        assert rel_err(gm, nm) < 1e-4
        assert rel_err(ge, ne) < 1e-4
        checked += 1


def test_batch_mean(rng):
    a, b = random_scene(rng, 3, 2), random_scene(rng, 2, 2)
    cfg = SilConfig()
    assert batch_loss([a], cfg) == scene_loss(a, cfg).value
    assert batch_loss([a, b], cfg) == pytest.approx((scene_loss(a, cfg).value + scene_loss(b, cfg).value) / 2)
    assert batch_loss([two_person_scene()] * 3, SilConfig(0.3, 0.0)) == 0.0
    value, grads = batch_loss_grad([a, b], cfg)
    np.testing.assert_allclose(grads[0][0], scene_loss_grad(a, cfg)[1] / 2)


def test_guards():
    with pytest.raises(EmptyBatch):
        batch_loss([], SilConfig())
    with pytest.raises(DimMismatch):
        SceneFeatures(np.zeros((2, 3)), np.zeros((3, 2, 3)))
    with pytest.raises(DimMismatch):
        SceneFeatures(np.zeros((2, 3)), np.zeros((2, 1, 3)))
