from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, random_model

from micl.net import BnLayerStats, forward
from micl.otta import (
    AdaBnState,
    EaState,
    OttaFlags,
    adabn_apply,
    ea_align,
    ea_update,
    inv_sqrt_spd,
    otta_infer,
    otta_session,
    window_covariance,
)


def _spd(rng, C, cond=10.0):
    q, _ = np.linalg.qr(rng.normal(size=(C, C)))
    return q @ np.diag(np.geomspace(1, cond, C)) @ q.T


def test_inv_sqrt_examples():
    np.testing.assert_allclose(inv_sqrt_spd(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(inv_sqrt_spd(np.diag([4.0, 9.0])), np.diag([0.5, 1 / 3]), atol=1e-12)
    with pytest.raises(ValueError):
        inv_sqrt_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
@settings(max_examples=40, deadline=None)
def test_inv_sqrt_whitens(seed, C):
    m = _spd(np.random.default_rng(seed), C)
    r = inv_sqrt_spd(m)
    assert np.abs(r @ m @ r - np.eye(C)).max() < 1e-4
    assert np.allclose(r, r.T)


def test_inv_sqrt_floors_rank_deficient():
    x = np.random.default_rng(0).normal(size=(4, 2))
    r = inv_sqrt_spd(x @ x.T, eps=1e-8)
    assert np.all(np.isfinite(r))


def test_ea_update_running_mean():
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(2, 4, 50))
    s1 = ea_update(EaState(), x1)
    assert s1.n_windows == 1
    np.testing.assert_allclose(s1.r_bar, window_covariance(x1))
    s2 = ea_update(s1, x2)
    np.testing.assert_allclose(s2.r_bar, (window_covariance(x1) + window_covariance(x2)) / 2)
    with pytest.raises(ValueError):
        ea_update(s2, rng.normal(size=(3, 50)))


def test_ea_monte_carlo_reference():
    rng = np.random.default_rng(1)
    sigma = _spd(rng, 4, cond=5)
    L = np.linalg.cholesky(sigma)
    state = EaState()
    for _ in range(10_000):
        state = ea_update(state, L @ rng.normal(size=(4, 25)))
    assert np.linalg.norm(state.r_bar - sigma) / np.linalg.norm(sigma) < 0.05


def test_ea_align_identity_and_self():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 100))
    with pytest.raises(ValueError):
        ea_align(EaState(), x)
    np.testing.assert_allclose(ea_align(EaState(np.eye(3), 1), x), x)
    s = ea_update(EaState(), x)
    a = ea_align(s, x)
    assert np.abs(window_covariance(a) - np.eye(3)).max() < 1e-4


def test_ea_removes_mixing():
    rng = np.random.default_rng(3)
    A = np.eye(4) + 0.8 * rng.normal(size=(4, 4))
    s_plain, s_mixed = EaState(), EaState()
    cov_plain, cov_mixed = [], []
    for _ in range(500):
        x = rng.normal(size=(4, 250))
        s_plain = ea_update(s_plain, x)
        s_mixed = ea_update(s_mixed, A @ x)
        cov_plain.append(window_covariance(ea_align(s_plain, x)))
        cov_mixed.append(window_covariance(ea_align(s_mixed, A @ x)))
    assert np.linalg.norm(np.mean(cov_plain, 0) - np.eye(4)) < 0.1
    assert np.linalg.norm(np.mean(cov_mixed, 0) - np.eye(4)) < 0.1


def test_final_reference_permutation_invariant():
    rng = np.random.default_rng(4)
    windows = rng.normal(size=(20, 3, 30))
    a, b = EaState(), EaState()
    for w in windows:
        a = ea_update(a, w)
    for w in windows[rng.permutation(20)]:
        b = ea_update(b, w)
    np.testing.assert_allclose(a.r_bar, b.r_bar, atol=1e-12)


def _bn_state(rho):
    return AdaBnState([BnLayerStats(np.zeros(2), np.ones(2))], rho)


def test_adabn_rho_extremes():
    new = [(np.array([3.0, -1.0]), np.array([2.0, 5.0]))]
    s0 = adabn_apply(_bn_state(0.0), new)
    assert np.array_equal(s0.stats[0].mean, [0, 0]) and np.array_equal(s0.stats[0].var, [1, 1])
    s1 = adabn_apply(_bn_state(1.0), new)
    assert np.array_equal(s1.stats[0].mean, [3, -1]) and np.array_equal(s1.stats[0].var, [2, 5])


def test_adabn_disabled_is_noop():
    s = AdaBnState([BnLayerStats(np.zeros(2), np.ones(2))], 0.5, enabled=False)
    assert adabn_apply(s, [(np.ones(2), np.ones(2))]) is s


@given(st.floats(1e-3, 0.5), st.floats(-10, 10), st.integers(1, 200))
@settings(max_examples=50, deadline=None)
def test_adabn_geometric_convergence(rho, delta, k):
    s = _bn_state(rho)
    for _ in range(k):
        s = adabn_apply(s, [(np.full(2, delta), np.ones(2))])
    expected = delta * (1 - (1 - rho) ** k)
    np.testing.assert_allclose(s.stats[0].mean, expected, atol=1e-6)


def _checkpoint(seed=0):
    p, stats = random_model(SMALL, seed=seed)
    return SimpleNamespace(params=p, bn_stats=stats)


def test_otta_off_equals_forward():
    ck = _checkpoint()
    x = np.random.default_rng(0).normal(size=(8, 250)).astype(np.float32)
    logits, _, _ = otta_infer(ck, EaState(), AdaBnState.from_stats(ck.bn_stats), x, False, False)
    assert np.array_equal(logits, forward(ck.params, ck.bn_stats, x))
    batch = np.random.default_rng(1).normal(size=(5, 8, 250)).astype(np.float32)
    out, _ = otta_session(ck, batch, OttaFlags(False, False))
    assert np.array_equal(out, forward(ck.params, ck.bn_stats, batch))


@pytest.mark.parametrize("flags", [OttaFlags(True, True), OttaFlags(True, False), OttaFlags(False, True)])
def test_session_replay_matches_sequential(flags):
    ck = _checkpoint(1)
    windows = np.random.default_rng(2).normal(size=(30, 8, 250)).astype(np.float32) * 5
    batched, final = otta_session(ck, windows, flags, chunk=7)
    ea, bn = EaState(), AdaBnState.from_stats(ck.bn_stats)
    seq = []
    for w in windows:
        out, ea, bn = otta_infer(ck, ea, bn, w, flags.ea, flags.adabn)
        seq.append(out)
    np.testing.assert_allclose(batched, np.stack(seq), atol=1e-4)
    if flags.ea:
        np.testing.assert_allclose(final.ea.r_bar, ea.r_bar, rtol=1e-10)
    if flags.adabn:
        for a, b in zip(final.bn.stats, bn.stats):
            np.testing.assert_allclose(a.mean, b.mean, rtol=1e-5, atol=1e-6)


def test_weights_untouched_by_adaptation():
    ck = _checkpoint(2)
    before = ck.params.flat.copy()
    stats_before = [s.mean.copy() for s in ck.bn_stats]
    otta_session(ck, np.random.default_rng(0).normal(size=(40, 8, 250)).astype(np.float32))
    assert np.array_equal(before, ck.params.flat)
    assert all(np.array_equal(a, s.mean) for a, s in zip(stats_before, ck.bn_stats))


def test_flags_parse():
    assert OttaFlags.parse("ea,adabn") == OttaFlags(True, True)
    assert OttaFlags.parse("off") == OttaFlags(False, False)
    assert OttaFlags.parse("adabn").tag == "adabn"
    with pytest.raises(ValueError):
        OttaFlags.parse("ea,foo")


@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(2, 6), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_reference_stays_symmetric_psd(seed, n, C, S):
    rng = np.random.default_rng(seed)
    s = EaState()
    for _ in range(n):
        s = ea_update(s, rng.normal(size=(C, S)) * rng.uniform(0.1, 100))
        assert np.abs(s.r_bar - s.r_bar.T).max() <= 1e-6 * max(1.0, np.abs(s.r_bar).max())
        assert np.linalg.eigvalsh(s.r_bar).min() >= -1e-9 * np.abs(s.r_bar).max()
        assert np.all(np.isfinite(ea_align(s, rng.normal(size=(C, S)))))
