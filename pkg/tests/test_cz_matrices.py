import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasidyadic import cz_matrices as cz
from quasidyadic import random_dyadic as rd
from quasidyadic import space, tb
from quasidyadic.cli import preset_instance
from quasidyadic.errors import ValidationError
from quasidyadic.measure import DiscreteMeasure, Dominator

import calibrate

FROZEN = json.load(open(os.path.join(os.path.dirname(__file__), "frozen_constants.json")))


def test_gamma_values():
    assert cz.gamma(1.0, 2.0) == pytest.approx(0.25)
    assert cz.gamma(2.0, 4.0) == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        cz.gamma(0.0, 2.0)
    with pytest.raises(ValidationError):
        cz.gamma(1.0, 1.0)


def test_min_r_is_least():
    r = cz.min_r(0.25, 2.0, 2.0, 0.25)
    a = cz.C1 / (2.0 * cz.C0 * 2.0 + cz.C0 + cz.C3)
    ok = lambda r: 0.25 ** r <= a and 0.25 ** (-(0.75) * r) >= 2.0 * cz.C0 * 2.0
    assert ok(r) and not ok(r - 1)
    with pytest.raises(ValidationError):
        cz.TbParams(1.0, 2.0, 0.25, r=r - 1)
    with pytest.raises(ValidationError):
        cz.TbParams(1.0, 2.0, 0.25, kappa=1.0)


def test_norm_of_rank_one_and_zero():
    u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    est = cz.matrix_norm(np.outer(u, v))
    assert est.power == pytest.approx(15.0, rel=1e-8)
    assert est.exact == pytest.approx(15.0, rel=1e-12)
    z = cz.matrix_norm(np.zeros((4, 3)))
    assert z.power == 0.0 and z.exact == 0.0


def test_power_iteration_matches_dense_norm():
    rng = np.random.default_rng(0)
    for shape in [(30, 20), (120, 200), (300, 300)]:
        M = rng.random(shape)
        est = cz.matrix_norm(M, tol=1e-12)
        assert abs(est.power - est.exact) <= 1e-6 * est.exact
    big = cz.matrix_norm(rng.random((10, 600)), dense_limit=500)
    assert math.isnan(big.exact) and big.value == big.power


def test_power_iteration_on_clustered_spectrum():
    # sixteen top singular values within 1e-4 of each other, then a gap
    rng = np.random.default_rng(1)
    U, _ = np.linalg.qr(rng.standard_normal((150, 150)))
    W, _ = np.linalg.qr(rng.standard_normal((150, 150)))
    sv = np.concatenate([1 - 1e-5 * np.arange(16), 0.4 * rng.random(134)])
    M = (U * sv) @ W.T
    est = cz.matrix_norm(M, tol=1e-12)
    assert est.power == pytest.approx(1.0, rel=1e-6)
    assert est.exact == pytest.approx(1.0, rel=1e-12)


def small_instance(n=40, seed=0):
    c = space.grid1d(n)
    mu = DiscreteMeasure(np.random.default_rng(seed).random(n) + 0.5)
    lam = Dominator("power", C=3.0 * mu.weights.max() * n, d=1.0)
    f = rd.RandomDyadicFactory(c, 0.25)
    return c, mu, lam, f.sample(seed), f.sample(seed + 100)


def test_separated_entries_match_naive_formula():
    c, mu, lam, D, Dp = small_instance()
    sep = cz.assemble_separated(D, Dp, mu, lam, 1.0)
    rows, cols = sep.rows, sep.cols
    for i in range(0, len(rows), 3):
        q = rows.members(i)
        for j in range(0, len(cols), 2):
            r = cols.members(j)
            lq, lr = rows.side[i], cols.side[j]
            if lq > lr:
                assert sep.values[i, j] == 0.0
                continue
            dqr = min(c.dist[x, y] for x in q for y in r)
            big = lq + lr + dqr
            sl = max(lam(z, big) for z in q)
            ref = math.sqrt(lq * lr) / (big * sl) * math.sqrt(mu.weights[q].sum() * mu.weights[r].sum())
            assert sep.values[i, j] == pytest.approx(ref, rel=1e-12)


def test_nested_entries_only_for_good_nested_pairs():
    c, mu, lam, D, Dp = small_instance(60, 2)
    r = 1
    labels = rd.label_goodness(D, Dp, r, 0.25)
    nest = cz.assemble_nested(D, Dp, mu, labels, 1.0, r)
    for (kq, a, kr, b, v) in nest.coo():
        assert labels.good[kq][a] and kq > kr + r
        q = set(D.members(kq, a).tolist())
        assert q <= set(Dp.members(kr, b).tolist())
        assert 0 < v <= 1


def test_schur_sums_out_of_range_are_zero():
    c, mu, lam, D, Dp = small_instance()
    s = cz.schur_sums(D, Dp, mu, lam, 1.0, 0, Dp.k_max + 5)
    assert s.row_max == 0.0 and s.ratio == 0.0
    with pytest.raises(ValidationError):
        cz.schur_sums(D, Dp, mu, lam, 1.0, -1, D.k_min)


def test_schur_sums_match_direct_integrals():
    c, mu, lam, D, Dp = small_instance(30, 4)
    w = mu.weights
    sep = cz.assemble_separated(D, Dp, mu, lam, 1.0)
    m, k = 1, Dp.k_min + 1
    s = cz.schur_sums(D, Dp, mu, lam, 1.0, m, k, sep)
    # pointwise kernel on X x X, integrated directly
    Kxy = np.zeros((c.n, c.n))
    for a in range(D.n_cubes(k + m)):
        q = D.members(k + m, a)
        for b in range(Dp.n_cubes(k)):
            r = Dp.members(k, b)
            t = sep.values[sep.rows.flat(k + m, a), sep.cols.flat(k, b)]
            Kxy[np.ix_(q, r)] = t / math.sqrt(w[q].sum() * w[r].sum())
    assert s.row_max == pytest.approx(float((w @ Kxy).max()), rel=1e-12)
    assert s.col_max == pytest.approx(float((Kxy @ w).max()), rel=1e-12)


@pytest.mark.parametrize("name", ["cantor1000", "snowflake_half"])
def test_schur_ratio_below_frozen_constant(name):
    inst = preset_instance(name)
    f = rd.RandomDyadicFactory(space.working_metric(inst.cloud), 0.25)
    const = FROZEN["schur"][name]["constant"]
    for s in range(3):
        D, Dp = f.sample(rd.trial_seed(s, 0)), f.sample(rd.trial_seed(s, 1))
        assert calibrate.schur_sup(inst, D, Dp) <= const


def cauchy_pairs(seed=0, max_pairs=40):
    inst = tb.cauchy_preset(250)
    f = rd.RandomDyadicFactory(inst.cloud, 0.25)
    D, Dp = f.sample(rd.trial_seed(seed, 0)), f.sample(rd.trial_seed(seed, 1))
    gam = cz.gamma(inst.alpha, inst.lam.C_lambda)
    return inst, gam, calibrate.separated_pairs(D, Dp, 2.0, gam, max_pairs)


def test_separated_pairing_below_frozen_constant():
    inst, gam, pairs = cauchy_pairs()
    assert pairs
    w = inst.mu.weights
    rng = np.random.default_rng(5)
    const = FROZEN["separated_pairing"]["constant"]
    for q, r, lq, lr in pairs:
        phi = np.zeros(inst.cloud.n)
        phi[q] = rng.standard_normal(q.size)
        phi[q] -= np.sum(phi[q] * w[q]) / w[q].sum()
        psi = np.zeros(inst.cloud.n)
        psi[r] = rng.standard_normal(r.size)
        pb = cz.separated_pairing_bound(inst.kernel.values, inst.mu, phi, psi, q, r, lq, lr, inst.lam,
                                        inst.alpha, 2.0, gam, inst.cloud.dist)
        assert pb.ratio <= const
        # the extremal value dominates any single pair of test functions
        ext = cz.pairing_extremal(inst.kernel.values, inst.mu, q, r)
        nphi = math.sqrt(np.sum(phi ** 2 * w))
        npsi = math.sqrt(np.sum(psi ** 2 * w))
        assert pb.lhs <= ext * nphi * npsi * (1 + 1e-10)
        # bilinear in phi
        pb2 = cz.separated_pairing_bound(inst.kernel.values, inst.mu, 2 * phi, psi, q, r, lq, lr, inst.lam,
                                         inst.alpha, 2.0, gam, inst.cloud.dist)
        assert pb2.lhs == pytest.approx(2 * pb.lhs, rel=1e-12)


def test_separated_pairing_rejects_bad_inputs():
    inst, gam, pairs = cauchy_pairs(max_pairs=1)
    q, r, lq, lr = pairs[0]
    n = inst.cloud.n
    K, mu, lam, dist = inst.kernel.values, inst.mu, inst.lam, inst.cloud.dist
    psi = np.zeros(n)
    psi[r] = 1.0
    ones = np.zeros(n)
    ones[q] = 1.0
    with pytest.raises(ValidationError):  # nonzero mean
        cz.separated_pairing_bound(K, mu, ones, psi, q, r, lq, lr, lam, 1.0, 2.0, gam, dist)
    phi = np.zeros(n)
    phi[q[0]], phi[q[1]] = 1.0, -1.0
    with pytest.raises(ValidationError):  # pair swapped: R is not larger and not separated the right way
        cz.separated_pairing_bound(K, mu, psi, phi, r, q, lr, lq * 1e-3, lam, 1.0, 2.0, gam, dist)
    leak = phi.copy()
    leak[r[0]] = 1.0
    with pytest.raises(ValidationError):  # support outside Q
        cz.separated_pairing_bound(K, mu, leak, psi, q, r, lq, lr, lam, 1.0, 2.0, gam, dist)


def test_pairing_extremal_matches_sampling_supremum():
    inst, gam, pairs = cauchy_pairs(max_pairs=5)
    w = inst.mu.weights
    q, r, _, _ = pairs[0]
    ext = cz.pairing_extremal(inst.kernel.values, inst.mu, q, r)
    # random mean-free phi never beat the extremal value and come within a factor 2
    A = inst.kernel.values[np.ix_(r, q)]
    P = np.eye(q.size) - np.outer(w[q], np.ones(q.size)) / w[q].sum()
    best = 0.0
    rng = np.random.default_rng(1)
    for _ in range(2000):
        phi = P.T @ rng.standard_normal(q.size)
        phi -= np.sum(phi * w[q]) / w[q].sum()
        Tphi = A @ (phi * w[q])
        val = math.sqrt(np.sum(np.abs(Tphi) ** 2 * w[r])) / math.sqrt(np.sum(phi ** 2 * w[q]))
        best = max(best, val)
    assert best <= ext * (1 + 1e-10)
    assert best >= 0.5 * ext


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 10_000))
def test_norm_bounds_property(m, n, seed):
    M = np.random.default_rng(seed).random((m, n))  # positive entries: a clear spectral gap
    est = cz.matrix_norm(M, tol=1e-12)
    fro = np.linalg.norm(M)
    assert est.exact <= fro * (1 + 1e-12)
    assert est.exact >= fro / math.sqrt(min(m, n)) * (1 - 1e-12)
    assert abs(est.power - est.exact) <= 1e-6 * est.exact
