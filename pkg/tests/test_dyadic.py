import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasidyadic import dyadic, space
from quasidyadic.errors import InternalError, ValidationError

import oracles


def test_singleton_has_one_center_per_level():
    c = space.PointCloud([[0.0]])
    S = dyadic.build_system(c, 1e-3)
    for k in S.levels:
        assert S.n_cubes(k) == 1 and S.members(k, 0).tolist() == [0]
    assert dyadic.verify_system(S).ok


def test_grid_net_levels():
    c = space.grid1d(1000)
    net = dyadic.build_net(c, 1e-3)
    assert net.k_min == 0 and net.k_max == 1
    assert net.level(0).size <= 2
    assert net.level(1).tolist() == list(range(1000))
    # greedy oracle: ascending scan keeps a point when it is 1-separated from the kept ones
    kept = []
    for p in range(1000):
        if all(c.dist[p, q] >= 1.0 - c.tol for q in kept):
            kept.append(p)
    assert net.level(0).tolist() == kept


def test_cantor_cloud_three_nontrivial_generations():
    S = dyadic.build_system(space.cantor_cloud(), 1e-3)
    counts = [S.n_cubes(k) for k in S.levels]
    assert counts == [1, 4, 16, 64]
    assert dyadic.verify_system(S).ok


def test_net_separation_and_cover():
    c = space.PointCloud.from_coords(np.random.default_rng(0).random((150, 2)))
    net = dyadic.build_net(c, 0.25)
    for k, (sep, cov) in zip(net.levels, net.achieved(c.dist)):
        if k < net.k_max:
            assert sep >= 0.25 ** k - c.tol
            assert cov < 0.25 ** k


def test_single_chain_relation():
    c = space.PointCloud([[0.0, 1.0], [1.0, 0.0]])
    S = dyadic.build_system(c, 1e-3)
    for k in list(S.levels)[1:]:
        assert np.all(S.parent_array(k)[S.mem(k)] == S.mem(k - 1))


def test_grid_parent_close_rule():
    c = space.grid1d(1000)
    net = dyadic.build_net(c, 1e-3)
    rel = dyadic.build_parent_relation(net, cloud=c)
    top = net.level(0)
    for i, p in enumerate(net.level(1)):
        close = [j for j, t in enumerate(top) if c.dist[p, t] < 1.0 / 16 - c.tol]
        if len(close) == 1:
            assert rel.parents[0][i] == close[0] and rel.rule[0][i]


def test_close_and_loose_rules_on_four_points():
    # level 0 centers at 0 and 1; level 1 points 0, 0.01, 0.5, 1 (delta = 0.1)
    x = np.array([0.0, 0.01, 0.5, 1.0])
    c = space.PointCloud.from_coords(x[:, None])
    net = dyadic.NetHierarchy(0.1, 0, 1, [np.array([0, 3]), np.arange(4)])
    rel = dyadic.build_parent_relation(net, cloud=c)
    assert rel.parents[0].tolist() == [0, 0, 0, 1]
    # 0.01 is within 1/16 of center 0 (close rule); 0.5 is not close to either (loose rule, tie to first)
    assert rel.rule[0].tolist() == [True, True, False, True]


def brute_force_cubes(S, k):
    """Chain closure from above: descendants of each generation-k center down to the points."""
    cubes = []
    for a in range(S.n_cubes(k)):
        idx = {a}
        for j in range(k, S.k_max):
            par = S.parent_array(j + 1)
            idx = {b for b in range(par.size) if par[b] in idx}
        cubes.append(sorted(int(S.centers(S.k_max)[b]) for b in idx))
    return cubes


@pytest.mark.parametrize("cloud,delta", [(space.grid1d(200), 1e-3), (space.grid1d(120), 0.25),
                                         (space.cantor_cloud(), 1e-3)])
def test_cubes_match_chain_closure(cloud, delta):
    S = dyadic.build_system(cloud, delta)
    for k in S.levels:
        assert brute_force_cubes(S, k) == [sorted(q) for q in oracles.cubes_of(S, k)]


@pytest.mark.parametrize("name", ["grid1d", "grid2d_sup", "cantor1000", "snowflake_half", "bergman"])
def test_corpus_systems_verify(name):
    from quasidyadic.cli import preset_cloud
    c = space.working_metric(preset_cloud(name))
    S = dyadic.build_system(c, 1e-3)
    assert dyadic.verify_system(S).ok
    assert oracles.structural_violations(S) == 0


def test_corrupted_relation_fails_small_ball():
    c = space.grid1d(300)
    S = dyadic.build_system(c, 0.25)
    side_c1 = lambda k: dyadic.C1 * S.side(k)
    for k in list(S.levels)[:-1]:
        for a, cen in enumerate(S.centers(k)):
            near = np.flatnonzero((c.dist[cen] < side_c1(k) - c.tol) & (S.mem(k + 1) != S.mem(k + 1)[cen]))
            if near.size and S.n_cubes(k) > 1:
                y = int(near[0])
                parents = [p.copy() for p in S.relation.parents]
                child = S.mem(k + 1)[y]
                parents[k + 1 - S.k_min - 1][child] = (a + 1) % S.n_cubes(k)
                rel = dyadic.ParentRelation(parents, S.relation.rule, 1 / 16, 4.0)
                bad = dyadic.DyadicSystem(S.net, rel, S.dist, S.tol)
                rep = dyadic.verify_system(bad, raise_on_failure=False)
                assert not rep.ok and rep.small_ball_slack < 0
                with pytest.raises(InternalError):
                    dyadic.verify_system(bad)
                return
    pytest.fail("no corruptible pair found")


def test_delta_range_enforced():
    c = space.grid1d(10)
    with pytest.raises(ValidationError):
        dyadic.build_system(c, 0.0)
    with pytest.raises(ValidationError):
        dyadic.build_system(c, 1.0)
    with pytest.warns(UserWarning):
        dyadic.build_system(c, 0.25)


def test_boundary_layer_edge_cases():
    c = space.grid1d(100)
    S = dyadic.build_system(c, 0.25)
    k = S.k_min + 1
    # eps large enough: all points within eps l of both Q and its complement
    eps = 10.0
    for a in range(S.n_cubes(k)):
        q = S.mem(k) == a
        layer = dyadic.boundary_layer(S, k, a, eps)
        d_in = c.dist[:, q].min(axis=1)
        d_out = c.dist[:, ~q].min(axis=1)
        ref = np.flatnonzero((d_in <= eps * S.side(k)) & (d_out <= eps * S.side(k)))
        assert layer.tolist() == ref.tolist()


def test_boundary_layer_naive_double_scan():
    c = space.grid1d(80)
    S = dyadic.build_system(c, 0.25)
    k = S.k_min + 2
    eps = 0.05
    thr = eps * S.side(k)
    for a in range(S.n_cubes(k)):
        q = set(S.members(k, a).tolist())
        ref = [x for x in range(80)
               if min(c.dist[x, y] for y in q) <= thr + S.tol
               and min((c.dist[x, y] for y in range(80) if y not in q), default=np.inf) <= thr + S.tol]
        assert dyadic.boundary_layer(S, k, a, eps).tolist() == ref


def test_whole_space_cube_has_empty_layer():
    S = dyadic.build_system(space.grid1d(20), 1e-3)
    assert S.n_cubes(S.k_min) == 1
    assert dyadic.boundary_layer(S, S.k_min, 0, 0.5).size == 0


def test_boundary_band_agrees_with_layers():
    c = space.grid1d(90)
    S = dyadic.build_system(c, 0.25)
    k, eps = S.k_min + 2, 0.2
    band = dyadic.boundary_band(S, k, eps)
    union = np.zeros(90, dtype=bool)
    for a in range(S.n_cubes(k)):
        union[dyadic.boundary_layer(S, k, a, eps)] = True
    # a point in some layer of a cube other than its own is in the band, and conversely
    np.testing.assert_array_equal(band, union)


def test_chain_separation_cases():
    c = space.grid1d(200)
    S = dyadic.build_system(c, 1e-3)
    assert dyadic.chain_separation_check(S, 100, S.k_min, 0, 1e-6)
    deep = int(S.centers(S.k_min)[0])
    assert dyadic.chain_separation_check(S, deep, S.k_min, 1, 1e-6)
    with pytest.raises(ValidationError):
        dyadic.chain_separation_check(S, 0, S.k_min, 1, 1.0)


def test_chain_separation_on_boundary_point():
    c = space.grid1d(1000)
    S = dyadic.build_system(c, 1e-3)
    k = S.k_min + 1
    # at the finest level every point is a cube, so every point sits on a boundary
    for x in (0, 1, 499, 999):
        ok = dyadic.chain_separation_check(S, x, k, 0, 2e-6 * 1000)
        chain = [S.center_of(x, j) for j in range(k, k + 1)]
        assert ok == all(c.dist[p, q] >= S.side(k) / 500 - S.tol for i, p in enumerate(chain) for q in chain[i + 1:])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.sampled_from([1e-3, 1e-4]))
def test_random_clouds_satisfy_structure(n, seed, delta):
    c = space.PointCloud.from_coords(np.random.default_rng(seed).random((n, 2)))
    S = dyadic.build_system(c, delta)
    assert dyadic.verify_system(S).ok
    assert oracles.structural_violations(S) == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 50), st.integers(0, 10_000))
def test_children_partition_parents(n, seed):
    c = space.PointCloud.from_coords(np.random.default_rng(seed).random((n, 1)))
    S = dyadic.build_system(c, 0.25)
    for k in list(S.levels)[:-1]:
        for a in range(S.n_cubes(k)):
            kids = S.children(k, a)
            union = np.sort(np.concatenate([S.members(k + 1, b) for b in kids]))
            assert union.tolist() == S.members(k, a).tolist()
