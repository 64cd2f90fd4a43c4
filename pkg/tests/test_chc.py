import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgfuse import numerics as nx
from hgfuse.aha import split_modalities
from hgfuse.chc import (FcmConfig, HyperedgeSet, build_initial_hyperedges, concat_vertices, fcm_refine,
                        fcm_trace, memberships)
from hgfuse.numerics import ConfigError, ShapeError, Tensor
from oracles import fcm_loop, fcm_objective


def rand(*shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


# -- initial hyperedges and vertices ----------------------------------------


def test_initial_edges_hand_average():
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    s = Tensor(np.array([[[5.0, 6.0], [7.0, 8.0]]]))
    e = build_initial_hyperedges(f, s, 1)
    assert e.edges.data.tolist() == [[2.5], [6.5]]
    assert e.provenance == ["frame:0,0", "event:0,0"]


def test_initial_edges_constant_maps():
    f, s = Tensor(np.full((3, 4, 4), 0.7)), Tensor(np.full((3, 4, 4), -2.0))
    e = build_initial_hyperedges(f, s, 2).edges.data
    assert e.shape == (8, 3)
    assert np.all(e[:4] == 0.7) and np.all(e[4:] == -2.0)


def test_initial_edges_identity_pooling():
    f, s = rand(2, 3, 3), rand(2, 3, 3, seed=1)
    e = build_initial_hyperedges(Tensor(f), Tensor(s), 3).edges.data
    assert np.array_equal(e[:9], f.reshape(2, -1).T)
    assert np.array_equal(e[9:], s.reshape(2, -1).T)


def test_initial_edges_errors():
    with pytest.raises(ShapeError):
        build_initial_hyperedges(Tensor(rand(2, 2, 2)), Tensor(rand(2, 3, 3)), 1)
    with pytest.raises(ConfigError):
        build_initial_hyperedges(Tensor(rand(2, 2, 2)), Tensor(rand(2, 2, 2)), 0)


def test_vertex_layout_and_inverse():
    f, s = rand(3, 2, 2), rand(3, 2, 2, seed=1)
    v = concat_vertices(Tensor(f), Tensor(s))
    assert v.n == 8
    assert np.array_equal(v.vertices.data[0], f[:, 0, 0])
    assert np.array_equal(v.vertices.data[4], s[:, 0, 0])
    f2, s2 = split_modalities(v.vertices, 2, 2)
    assert np.array_equal(f2.data, f) and np.array_equal(s2.data, s)


def test_vertex_gradient_is_ones():
    f, s = nx.parameter(rand(2, 2, 3)), nx.parameter(rand(2, 2, 3, seed=1))
    with nx.Tape() as tape:
        loss = nx.sum(concat_vertices(f, s).vertices)
    g = nx.backward(loss, tape)
    assert np.array_equal(g[f], np.ones(f.shape)) and np.array_equal(g[s], np.ones(s.shape))
    assert nx.finite_diff_check(lambda: nx.sum(concat_vertices(f, s).vertices), [f, s]).passed


# -- FCM --------------------------------------------------------------------


def test_fcm_config_validation():
    for kw in ({"iters": -1}, {"fuzzifier": 1.0}, {"eps": 0.0}):
        with pytest.raises(ConfigError):
            FcmConfig(**kw)


def test_fcm_zero_iterations_is_identity():
    init = HyperedgeSet(Tensor(rand(3, 2)), ["a", "b", "c"])
    out = fcm_refine(init, Tensor(rand(5, 2, seed=1)), FcmConfig(iters=0))
    assert out is init


def test_fcm_identical_vertices_collapse():
    v = np.tile([[0.3, -0.2]], (5, 1))
    out = fcm_refine(HyperedgeSet(Tensor(rand(2, 2))), Tensor(v), FcmConfig(iters=1)).edges.data
    np.testing.assert_allclose(out, np.tile(v[:1], (2, 1)), atol=1e-15)


@pytest.mark.parametrize("iters", [1, 5, 30])
def test_fcm_matches_loop_oracle_per_iteration(iters):
    verts = np.array([[0.0], [0.1], [10.0], [10.1]])
    init = np.array([[0.0], [10.0]])
    cents, _, _ = fcm_trace(init, verts, FcmConfig(iters=iters, fuzzifier=2.0))
    oracle = fcm_loop(verts.tolist(), init.tolist(), 2.0, iters)
    for got, want in zip(cents, oracle):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)
    final = fcm_refine(HyperedgeSet(Tensor(init)), Tensor(verts), FcmConfig(iters=iters)).edges.data
    np.testing.assert_allclose(final, oracle[-1], rtol=0, atol=1e-10)
    if iters == 5:
        np.testing.assert_allclose(final.ravel(), [0.05, 10.05], atol=1e-3)


def test_fcm_matches_oracle_multidimensional():
    verts, init = rand(7, 3, seed=4), rand(3, 3, seed=5)
    cents, _, _ = fcm_trace(init, verts, FcmConfig(iters=6, fuzzifier=1.7))
    oracle = fcm_loop(verts.tolist(), init.tolist(), 1.7, 6)
    np.testing.assert_allclose(np.array(cents), np.array(oracle), rtol=0, atol=1e-10)


def test_fcm_objective_matches_oracle():
    verts, init = rand(6, 2, seed=6), rand(2, 2, seed=7)
    _, _, objs = fcm_trace(init, verts, FcmConfig(iters=1))
    assert objs[0] == pytest.approx(fcm_objective(verts.tolist(), init.tolist(), 2.0), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**31))
def test_membership_columns_sum_to_one(m, n, c, seed):
    u = memberships(Tensor(rand(m, c, seed=seed)), Tensor(rand(n, c, seed=seed + 1)), FcmConfig()).data
    assert u.shape == (m, n) and np.all(u >= 0)
    np.testing.assert_allclose(u.sum(axis=0), 1.0, atol=1e-10)


def test_membership_coincident_vertex_is_finite():
    e = Tensor(np.array([[0.0], [1.0]]))
    u = memberships(e, Tensor(np.array([[0.0]])), FcmConfig()).data
    assert np.all(np.isfinite(u))
    assert u[0, 0] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(4, 12), st.integers(1, 3), st.sampled_from([1.5, 2.0, 3.0]),
       st.integers(0, 2**31))
def test_fcm_objective_non_increasing(m, n, c, f, seed):
    verts, init = rand(n, c, seed=seed), rand(m, c, seed=seed + 1)
    _, _, objs = fcm_trace(init, verts, FcmConfig(iters=15, fuzzifier=f))
    assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(1, 4))
def test_fcm_preserves_edge_count(iters, m):
    out = fcm_refine(HyperedgeSet(Tensor(rand(m, 2))), Tensor(rand(6, 2, seed=1)), FcmConfig(iters=iters))
    assert out.m == m


def test_fcm_warns_when_edges_outnumber_vertices():
    with pytest.warns(UserWarning):
        fcm_refine(HyperedgeSet(Tensor(rand(4, 2))), Tensor(rand(2, 2)), FcmConfig(iters=1))


def test_fcm_gradient_through_unrolled_iterations():
    init = nx.parameter(rand(3, 2, seed=8))
    verts = nx.parameter(rand(8, 2, seed=9))
    probe = Tensor(rand(3, 2, seed=10))

    def f():
        e = fcm_refine(HyperedgeSet(init), verts, FcmConfig(iters=3)).edges
        return nx.sum(nx.mul(e, probe))

    rep = nx.finite_diff_check(f, [init, verts], tolerance=1e-4)
    assert rep.passed, rep.worst
