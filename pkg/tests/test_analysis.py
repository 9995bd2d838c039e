from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from micl.analysis import (
    EvalMatrix,
    betainc,
    causal_mask,
    cosine_distance,
    distance_matrix,
    first_vs_late_distances,
    paired_ttest,
    session_accuracy,
    summarize,
    t_sf,
    task_vector,
    trial_accuracy,
    upper_bound,
)
from micl.net import ModelConfig, init_params, unflatten_params


def test_trial_accuracy_boundary():
    assert trial_accuracy([1] * 64 + [0] * 62, 1)
    assert not trial_accuracy([1] * 63 + [0] * 63, 1)
    assert not trial_accuracy([1] * 5, 0)
    with pytest.raises(ValueError):
        trial_accuracy([], 0)


def test_session_accuracy():
    pred = np.array([0, 0, 1, 1, 1, 0])
    labels = np.array([0, 0, 0, 1, 1, 1])
    trial = np.array([0, 0, 0, 1, 1, 1])
    assert session_accuracy(pred, labels, trial) == (100.0, 2)


def test_summarize_examples():
    s = summarize({"A": [80, 90], "B": [70]})
    assert s.subject_means == {"A": 85.0, "B": 70.0}
    assert s.mean == pytest.approx(77.5)
    assert s.std == pytest.approx(10.6066, abs=1e-4)
    one = summarize({"A": [63.0]})
    assert (one.mean, one.std) == (63.0, 0.0)
    with pytest.raises(ValueError):
        summarize({})
    with pytest.raises(ValueError):
        summarize({"A": []})


@given(st.dictionaries(st.integers(0, 50), st.lists(st.floats(0, 100), min_size=1, max_size=5),
                       min_size=1, max_size=8), st.randoms())
@settings(max_examples=60, deadline=None)
def test_summarize_order_invariant(groups, rnd):
    keys = list(groups)
    rnd.shuffle(keys)
    a = summarize(groups)
    b = summarize({k: groups[k] for k in keys})
    assert a.mean == pytest.approx(b.mean, abs=1e-9)
    assert a.std == pytest.approx(b.std, abs=1e-9)
    assert 0 <= a.mean <= 100 + 1e-9


def test_summarize_equal_representation():
    base = summarize({"A": [80.0], "B": [60.0]})
    dup = summarize({"A": [80.0, 80.0, 80.0], "B": [60.0]})
    assert base.mean == dup.mean and base.std == dup.std


def test_task_vector():
    cfg = ModelConfig()
    src = init_params(cfg, seed=0)
    th = init_params(cfg, seed=1)
    assert not task_vector(src.flat, src.flat).tau.any()
    np.testing.assert_array_equal(task_vector(th.flat, np.zeros_like(th.flat)).tau, th.flat)
    tau = task_vector(th.flat, src.flat).tau
    back = unflatten_params((tau + src.flat).astype(np.float32), cfg)
    np.testing.assert_allclose(back.flat, th.flat, atol=1e-7)
    with pytest.raises(ValueError):
        task_vector(th.flat, th.flat[:-1])


def test_cosine_distance_examples():
    tau = np.array([0.3, -1.0, 2.0])
    assert cosine_distance(tau, tau) == 0.0
    assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    assert cosine_distance([1, 0], [1, 1]) == pytest.approx(1 - np.sqrt(2) / 2, abs=1e-12)
    assert cosine_distance([1, 0], [-1, 0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 0])


vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vectors, vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_cosine_scale_invariant(u, v, a, b):
    u, v = np.array(u), np.array(v)
    assert abs(cosine_distance(a * u, b * v) - cosine_distance(u, v)) < 1e-6
    assert 0 <= cosine_distance(u, v) <= 2 + 1e-12


def test_distance_matrix_structure():
    rng = np.random.default_rng(0)
    vs = list(rng.normal(size=(5, 20)))
    d = distance_matrix(vs)
    assert np.array_equal(d, d.T)
    assert np.array_equal(np.diag(d), np.zeros(5))
    assert np.array_equal(distance_matrix([vs[0], vs[0].copy()]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        distance_matrix(vs[:1])
    first, late = first_vs_late_distances(d)
    assert first == pytest.approx(d[0, 1:].mean())
    assert late == pytest.approx(np.mean([d[1, 2], d[2, 3], d[3, 4]]))


def _matrix():
    sessions, cols = [2, 3, 4], ["source", 1, 2, 3]
    mask = causal_mask(sessions, cols, {"source": (), 1: (1,), 2: (1, 2), 3: (1, 2, 3)})
    vals = np.array([[70, 75, 0, 0], [60, 72, 65, 0], [50, 55, 80, 78]], dtype=float)
    vals[~mask] = np.nan
    return EvalMatrix(sessions, cols, vals, mask)


def test_causal_mask_and_upper_bound():
    m = _matrix()
    assert m.mask[:, 0].all()
    assert m.get(3, 3) is None and m.get(2, 2) is None
    assert upper_bound(m) == {2: 75.0, 3: 72.0, 4: 80.0}
    for s, v in m.diagonal().items():
        assert upper_bound(m)[s] >= v
    empty = EvalMatrix([2], ["source"], np.array([[np.nan]]), np.array([[False]]))
    with pytest.raises(ValueError):
        upper_bound(empty)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_upper_bound_dominates_any_policy(seed):
    rng = np.random.default_rng(seed)
    m = _matrix()
    m.values[m.mask] = rng.uniform(0, 100, m.mask.sum())
    ub = upper_bound(m)
    for i, s in enumerate(m.sessions):
        for j in np.flatnonzero(m.mask[i]):
            assert ub[s] >= m.values[i, j]


def test_ttest_reference_values():
    r = paired_ttest([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.t == pytest.approx(4.2426, abs=1e-4)
    assert r.df == 4
    assert r.p == pytest.approx(0.0132, abs=1e-3)
    assert t_sf(2.776, 4) == pytest.approx(0.025, abs=1e-3)


def test_ttest_degenerate_and_errors():
    assert paired_ttest([3, 4], [3, 4]).p == 1.0
    assert paired_ttest([3, 4], [2, 3]).p == 0.0
    with pytest.raises(ValueError):
        paired_ttest([1], [2])
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [2, 3, 4])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.integers(0, 2**31 - 1))
@settings(max_examples=80, deadline=None)
def test_ttest_symmetric_and_matches_scipy(a, seed):
    a = np.array(a)
    b = a + np.random.default_rng(seed).normal(0, 5, size=a.size)
    p1, p2 = paired_ttest(a, b).p, paired_ttest(b, a).p
    assert p1 == pytest.approx(p2, abs=1e-12)
    ref = stats.ttest_rel(a, b).pvalue
    if np.isfinite(ref):
        assert p1 == pytest.approx(ref, abs=1e-8)


@pytest.mark.parametrize("df", [1, 2, 4, 9, 30, 120])
@pytest.mark.parametrize("t", [-4.0, -1.0, 0.0, 0.3, 2.776, 12.0])
def test_t_tail_against_scipy(df, t):
    assert abs(t_sf(t, df) - stats.t.sf(t, df)) < 1e-8


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_betainc_against_scipy(a, b, x):
    assert abs(betainc(a, b, x) - special.betainc(a, b, x)) < 1e-8
