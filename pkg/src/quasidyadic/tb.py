"""Discrete Calderon-Zygmund operators and the Tb diagnostics.

The operator is Tf(x) = sum_{y != x} K(x, y) f(y) w(y); pairings are the
bilinear <f, g> = sum f g w. Norms on L2(mu) are spectral norms of the
similarity-weighted matrix sqrt(w) K sqrt(w).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import ball_cover, cz_matrices, dyadic, martingale
from .errors import InfeasibleError, InternalError, ValidationError
from .measure import DiscreteMeasure, Dominator, majorization_ratio, verify_upper_doubling
from .random_dyadic import (RandomDyadicFactory, goodness_depth, labels_from_depth, trial_seed)
from .space import PointCloud, validate_quasimetric, working_metric

SURGERY_RETRIES = 100
SUM_RTOL = 1e-8


# kernels -------------------------------------------------------------------


@dataclass
class KernelMatrix:
    values: np.ndarray  # diagonal is zero and never used
    name: str = "explicit"
    alpha: float = 1.0
    params: dict = field(default_factory=dict)
    certificate: object = None

    def scaled(self, c):
        return KernelMatrix(self.values * c, self.name, self.alpha, dict(self.params, scale=self.params.get("scale", 1.0) * c))


def _zero_diag(K):
    K = np.array(K)
    np.fill_diagonal(K, 0)
    return K


def cauchy_kernel(cloud):
    """1/(x - y) on a one-dimensional cloud, diagonal dropped."""
    if cloud.coords is None or cloud.coords.shape[1] != 1:
        raise ValidationError("the Cauchy kernel needs one-dimensional coordinates")
    x = cloud.coords[:, 0].astype(float)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return KernelMatrix(_zero_diag(1.0 / diff), "cauchy", 1.0)


def bergman_kernel(cloud, m=1.0):
    """(1 - conj(x).y)^-m on complex points of the closed unit ball."""
    z = np.asarray(cloud.coords, dtype=complex)
    s = 1 - z.conj() @ z.T
    np.fill_diagonal(s, 1.0)
    return KernelMatrix(_zero_diag(s ** (-float(m))), "bergman", 0.5, {"m": float(m)})


@dataclass
class KernelCertificate:
    C_size: float
    C_holder_x: float
    C_holder_y: float
    alpha: float
    C: float
    witness_size: tuple
    witness_x: tuple
    witness_y: tuple

    @property
    def C_holder(self):
        return max(self.C_holder_x, self.C_holder_y)

    def to_dict(self):
        return dict(self.__dict__)


@njit(cache=True)
def _kernel_scan(K, rho, L, alpha, C, tol):
    n = K.shape[0]
    cs, cx, cy = 0.0, 0.0, 0.0
    ws = (-1, -1)
    wx = (-1, -1, -1)
    wy = (-1, -1, -1)
    for x in range(n):
        for y in range(n):
            if x == y:
                continue
            lam = max(L[x, y], L[y, x])
            v = abs(K[x, y]) * lam
            if v > cs:
                cs = v
                ws = (x, y)
    for x in range(n):
        for y in range(n):
            if y == x:
                continue
            r = rho[x, y]
            for xp in range(n):
                if xp == x or xp == y:
                    continue
                h = rho[x, xp]
                if r >= C * h - tol:
                    # first variable: K(x, y) vs K(x', y)
                    v = abs(K[x, y] - K[xp, y]) * r ** alpha * L[x, y] / h ** alpha
                    if v > cx:
                        cx = v
                        wx = (x, xp, y)
                    # second variable with y, y' = x, x': K(y, x) vs K(y, x')
                    v = abs(K[y, x] - K[y, xp]) * r ** alpha * L[x, y] / h ** alpha
                    if v > cy:
                        cy = v
                        wy = (y, x, xp)
    return cs, cx, cy, ws, wx, wy


def lambda_matrix(lam, rho):
    """L[x, y] = lambda(x, rho(x, y))."""
    n = rho.shape[0]
    return np.asarray(lam(np.arange(n)[:, None], rho), dtype=float)


def verify_standard_kernel(K, cloud, lam, alpha, C=2.0):
    """Exhaustive scan for the smallest size and Holder constants."""
    vals = K.values if isinstance(K, KernelMatrix) else np.asarray(K)
    rho = cloud.dist
    L = lambda_matrix(lam, rho)
    cs, cx, cy, ws, wx, wy = _kernel_scan(vals.astype(complex), rho, L, float(alpha), float(C), cloud.tol)
    if not (math.isfinite(cs) and math.isfinite(cx) and math.isfinite(cy)):
        raise ValidationError("kernel estimates are unbounded", witness=(ws, wx, wy))
    cert = KernelCertificate(float(cs), float(cx), float(cy), float(alpha), float(C), tuple(ws), tuple(wx), tuple(wy))
    if isinstance(K, KernelMatrix):
        K.certificate = cert
    return cert


# the operator ------------------------------------------------------------


def _vals(K):
    return K.values if isinstance(K, KernelMatrix) else np.asarray(K)


def apply_operator(K, mu, f):
    """Tf(x) = sum_{y != x} K(x, y) f(y) w(y)."""
    A = _vals(K)
    fw = np.asarray(f) * mu.weights
    return A @ fw - np.diagonal(A) * fw


def apply_adjoint(K, mu, g):
    """T*g(y) = sum_{x != y} K(x, y) g(x) w(x), so <Tf, g> = <f, T*g>."""
    A = _vals(K)
    gw = np.asarray(g) * mu.weights
    return A.T @ gw - np.diagonal(A) * gw


def pairing(u, v, mu):
    return np.sum(np.asarray(u) * np.asarray(v) * mu.weights)


def weighted_matrix(K, mu):
    s = np.sqrt(mu.weights)
    A = s[:, None] * _vals(K) * s[None, :]
    np.fill_diagonal(A, 0)
    return A


def operator_norm(K, mu, method="dense"):
    """Norm of T on L2(mu): the spectral norm of sqrt(w) K sqrt(w)."""
    A = weighted_matrix(K, mu)
    if method == "dense":
        return float(np.linalg.norm(A, 2)) if A.size else 0.0
    if method == "power":
        return cz_matrices.matrix_norm(A, dense_limit=0).power
    raise ValidationError(f"unknown norm method {method!r}")


# ball functionals -----------------------------------------------------------


def ball_family(cloud):
    """Per center: sorting permutation, sorted distances, candidate radii.

    Radii are the positive distances from the center, the midpoints between
    consecutive ones, and one radius beyond the diameter (the whole space).
    """
    rho = cloud.dist
    order = np.argsort(rho, axis=1, kind="stable")
    srt = np.take_along_axis(rho, order, axis=1)
    big = 2.0 * cloud.diameter if cloud.n > 1 else 1.0
    radii = []
    for x in range(cloud.n):
        u = np.unique(srt[x][srt[x] > 0])
        radii.append(np.concatenate([u, 0.5 * (u[:-1] + u[1:]), [big]]))
    return order, srt, radii


def _counts(srt_row, r, tol):
    return np.searchsorted(srt_row, r - tol, side="left")


@dataclass
class BallSup:
    value: float
    center: int
    radius: float


def bmo2_norm(f, mu, cloud, kappa, family=None):
    """sup over balls of (int_B |f - <f>_B|^2 dmu / mu(kappa B))^(1/2)."""
    if not kappa > 1:
        raise ValidationError("kappa must exceed 1")
    f = np.asarray(f)
    w = mu.weights
    order, srt, radii = family or ball_family(cloud)
    best = BallSup(0.0, 0, 0.0)
    for x in range(cloud.n):
        o = order[x]
        g = f[o] - f[x]  # the oscillation is shift invariant; this shift keeps constants exact
        ww = w[o]
        S0 = np.concatenate([[0.0], np.cumsum(ww)])
        S1 = np.concatenate([[0.0], np.cumsum(g * ww)])
        S2 = np.concatenate([[0.0], np.cumsum(np.abs(g) ** 2 * ww)])
        r = radii[x]
        c = _counts(srt[x], r, cloud.tol)
        ck = _counts(srt[x], kappa * r, cloud.tol)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(c > 0, S2[c] - np.abs(S1[c]) ** 2 / np.where(c > 0, S0[c], 1.0), 0.0)
        val = np.maximum(var, 0.0) / S0[ck]
        i = int(np.argmax(val))
        if val[i] > best.value:
            best = BallSup(float(val[i]), x, float(r[i]))
    best.value = math.sqrt(best.value)
    return best


@njit(cache=True)
def _block_prefix(M, order):
    n = M.shape[0]
    out = np.zeros((n, n + 1), dtype=np.complex128)
    for x in range(n):
        o = order[x]
        s = 0.0 + 0.0j
        for j in range(n):
            a = o[j]
            for i in range(j):
                b = o[i]
                s += M[a, b] + M[b, a]
            out[x, j + 1] = s
    return out


def wbp_constant(K, mu, b1, b2, Lam, cloud, family=None):
    """sup over balls of |<T(b1 chi_B), b2 chi_B>| / mu(Lam B), balls in the original quasimetric."""
    if not Lam > 1:
        raise ValidationError("Lambda must exceed 1")
    w = mu.weights
    M = (np.asarray(b2) * w)[:, None] * _vals(K) * (np.asarray(b1) * w)[None, :]
    M = np.array(M, dtype=complex)
    np.fill_diagonal(M, 0)
    order, srt, radii = family or ball_family(cloud)
    pref = _block_prefix(M, order)
    best = BallSup(0.0, 0, 0.0)
    for x in range(cloud.n):
        ww = np.concatenate([[0.0], np.cumsum(w[order[x]])])
        r = radii[x]
        c = _counts(srt[x], r, cloud.tol)
        cl = _counts(srt[x], Lam * r, cloud.tol)
        val = np.abs(pref[x, c]) / ww[cl]
        i = int(np.argmax(val))
        if val[i] > best.value:
            best = BallSup(float(val[i]), x, float(r[i]))
    return best


def accretivity_constants(b, mu, systems=()):
    """(min Re b, [min over cubes of |<b>_Q| per system], flags for vanishing averages)."""
    b = np.asarray(b)
    strong = float(np.min(np.real(b)))
    weak, flags = [], []
    for S in systems:
        lo = math.inf
        for k in S.levels:
            avg = np.abs(martingale.averages(b, S, mu.weights, k))
            lo = min(lo, float(avg.min()))
        weak.append(lo)
        flags.append(lo <= 1e-14)
    return strong, weak, flags


# paraproduct -------------------------------------------------------------


def _cube_avg(u, mask, w):
    return np.sum(u[mask] * w[mask]) / np.sum(w[mask])


def adapted_difference(u, b, S, k, a, w):
    """Delta^b_Q u for Q = (k, a): sum over children of E^b u minus E^b_Q u."""
    q = S.mem(k) == a
    out = np.zeros(S.n, dtype=np.result_type(u, b, float))
    for c in np.unique(S.mem(k + 1)[q]):
        ch = S.mem(k + 1) == c
        out[ch] = _cube_avg(u, ch, w) / _cube_avg(b, ch, w) * b[ch]
    out[q] -= _cube_avg(u, q, w) / _cube_avg(b, q, w) * b[q]
    return out


def whitney_pairs(D_outer, D_inner, r, depth, kappa, C=2.0):
    """(outer cube, inner cube) with inner inside outer, depth generations down, d(inner, X \\ outer) >= C C0 kappa l(inner)."""
    pairs = []
    dist, tol = D_inner.dist, D_inner.tol
    for j in D_outer.levels:
        kk = j + depth
        if kk < D_inner.k_min or kk > D_inner.k_max:
            continue
        memo = D_outer.mem(j)
        memi = D_inner.mem(kk)
        for q in range(D_inner.n_cubes(kk)):
            pts = np.flatnonzero(memi == q)
            owner = np.unique(memo[pts])
            if owner.size != 1:
                continue
            R = int(owner[0])
            rest = np.flatnonzero(memo != R)
            d_out = dist[np.ix_(pts, rest)].min() if rest.size else math.inf
            if d_out >= C * dyadic.C0 * kappa * D_inner.side(kk) - tol:
                pairs.append(((j, R), (kk, q)))
    return pairs


@dataclass
class Paraproduct:
    matrix: np.ndarray  # Pi f = matrix @ f
    pairs: list
    norm: float
    empty: bool
    whitney_sum: float  # max over outer cubes of the Carleson-type sum / mu(Q)
    bmo_sq: float


def paraproduct(D, Dp, K, mu, b1, b2, r, kappa, C=2.0, cloud=None):
    """Matrix of Pi f = sum (E_R' b2)^-1 E_R' f (Delta^b1_Q')*(T* b2) over admissible (R', Q')."""
    w = mu.weights
    b1 = np.asarray(b1, dtype=complex)
    b2 = np.asarray(b2, dtype=complex)
    h = apply_adjoint(K, mu, b2)
    pairs = whitney_pairs(Dp, D, r, r, kappa, C)
    P = np.zeros((mu.n, mu.n), dtype=complex)
    for (j, R), (kk, q) in pairs:
        rmask = Dp.mem(j) == R
        phi = adapted_difference(b1 * h, b1, D, kk, q, w) / b1
        row = np.where(rmask, w, 0.0) / (np.sum(w[rmask]) * _cube_avg(b2, rmask, w))
        P += np.outer(phi, row)
    s = np.sqrt(w)
    norm = float(np.linalg.norm(s[:, None] * P / s[None, :], 2)) if pairs else 0.0
    ws = whitney_sum(Dp, D, b1, h, mu, r, kappa, C)
    bmo_sq = bmo2_norm(h, mu, cloud, kappa).value ** 2 if cloud is not None else float("nan")
    return Paraproduct(P, pairs, norm, not pairs, ws, bmo_sq)


def whitney_sum(D_outer, D_inner, b, phi, mu, r, kappa, C=2.0):
    """max over outer Q of sum ||Delta^b_R (b phi)||^2 / mu(Q) over admissible inner R inside Q."""
    w = mu.weights
    b = np.asarray(b, dtype=complex)
    acc = {}
    for depth in range(r, D_inner.k_max - D_outer.k_min + 1):
        for (j, Q), (kk, R) in whitney_pairs(D_outer, D_inner, r, depth, kappa, C):
            d = adapted_difference(b * phi, b, D_inner, kk, R, w)
            acc[(j, Q)] = acc.get((j, Q), 0.0) + float(np.sum(np.abs(d) ** 2 * w))
    best = 0.0
    for (j, Q), v in acc.items():
        best = max(best, v / float(np.sum(w[D_outer.mem(j) == Q])))
    return best


# adjacent pairs ----------------------------------------------------------


@dataclass
class AdjacentSurgeryReport:
    groups: dict  # name -> complex pairing
    total: complex
    sum_error: float
    bounds: dict  # right-hand side terms
    ratios: dict  # group magnitude over its bound family
    cs_ok: bool  # exact Cauchy-Schwarz for the norm-weighted groups
    lam_ok: bool  # Lambda B inside Delta for every kept ball
    n_balls: int
    attempts: int
    uncovered: float  # mu(tilde Delta minus union) / mu(tilde Delta)
    k_balls: int

    @property
    def magnitudes(self):
        return {k: abs(v) for k, v in self.groups.items()}

    @property
    def triangle_ok(self):
        return abs(self.total) <= sum(self.magnitudes.values()) * (1 + 1e-12) + 1e-300

    def to_dict(self):
        return {"groups": {k: [v.real, v.imag] for k, v in self.groups.items()},
                "total": [self.total.real, self.total.imag], "sum_error": self.sum_error,
                "bounds": self.bounds, "ratios": self.ratios, "cs_ok": self.cs_ok, "lam_ok": self.lam_ok,
                "triangle_ok": self.triangle_ok, "n_balls": self.n_balls, "attempts": self.attempts,
                "uncovered": self.uncovered, "k_balls": self.k_balls}


def surgery_cover_params(cloud, upsilon, pilot_trials=ball_cover.MIN_TRIALS, seed=0, A0=None):
    """Ball-cover parameters at theta = A0^-4/1000, shared by every pair on one cloud."""
    if A0 is None:
        A0 = validate_quasimetric(cloud, eps_grid=(1.0,)).A0
    theta = A0 ** -4 / 1000
    return ball_cover.derive_cover_params(cloud, theta, upsilon, pilot_trials=pilot_trials, seed=seed, A0=A0)


def _norm(u, w):
    return math.sqrt(float(np.sum(np.abs(u) ** 2 * w)))


def adjacent_surgery(D, Dp, Q, R, K, mu, b1, b2, eps, upsilon, Lam, cloud, seed=0, r=1, C=2.0,
                     T_norm=None, wbp=None, lam=None, C_size=1.0, cover_params=None):
    """Split <T(chi_Q b1), chi_R b2> into the groups A..G around a random almost-cover of the core."""
    if not eps > 0 or not 0 < upsilon < 1 or not Lam > 1:
        raise ValidationError("need eps > 0, upsilon in (0, 1), Lambda > 1")
    w = mu.weights
    n = mu.n
    b1 = np.asarray(b1, dtype=complex)
    b2 = np.asarray(b2, dtype=complex)
    (kq, aq), (kr, ar) = Q, R
    qm = D.mem(kq) == aq
    rm = Dp.mem(kr) == ar
    lq, lr = D.side(kq), Dp.side(kr)
    dist = D.dist
    dqr = float(dist[np.ix_(qm, rm)].min())
    if not (dqr < C * dyadic.C0 * min(lq, lr) and abs(kq - kr) <= r):
        raise ValidationError("pair is not adjacent and comparable")
    if T_norm is None:
        T_norm = operator_norm(K, mu)

    def layer(S, k, mask):
        thr = eps * S.side(k) + S.tol
        if mask.all():
            return np.zeros(n, dtype=bool)
        d_in = dist[:, mask].min(axis=1)
        d_out = dist[:, ~mask].min(axis=1)
        return (d_in <= thr) & (d_out <= thr)

    delta_set = qm & rm
    dQ, dR = layer(D, kq, qm), layer(Dp, kr, rm)
    q_s = qm & ~delta_set & ~dR
    q_b = qm & ~delta_set & ~q_s
    r_s = rm & ~delta_set & ~dQ
    r_b = rm & ~delta_set & ~r_s
    core = delta_set & ~dQ & ~dR

    # ball cover of the core at the scale fixed by eps and the smaller side
    rho = cloud.dist
    if cover_params is None:
        cover_params = surgery_cover_params(cloud, upsilon, seed=seed)
    theta = cover_params.theta
    same_metric = dist is rho or np.array_equal(dist, rho)
    beta = 1.0 if same_metric else math.log2(3 * cover_params.A0 ** 2)
    target = (eps * min(lq, lr) / 8) ** beta / Lam
    kb = math.ceil(math.log(target) / math.log(theta) - 1e-12)
    while theta ** kb > target:
        kb += 1
    while theta ** (kb - 1) <= target:
        kb -= 1
    core_ids = np.flatnonzero(core)
    mcore = float(np.sum(w[core]))
    U = np.zeros(n, dtype=bool)
    balls = []
    attempts = 0
    uncovered = 0.0
    if core_ids.size:
        for attempts in range(1, SURGERY_RETRIES + 1):
            fam = ball_cover.sample_almost_cover(cloud, cover_params, seed=trial_seed(seed, attempts),
                                                 domain=core_ids, k=kb)
            inside = rho[fam.centers] < fam.radii[:, None] - cloud.tol
            keep = np.flatnonzero(inside[:, core].any(axis=1))
            U = inside[keep].any(axis=0) if keep.size else np.zeros(n, dtype=bool)
            uncovered = float(np.sum(w[core & ~U])) / mcore
            if uncovered <= upsilon:
                balls = [(int(fam.centers[i]), float(fam.radii[i]), inside[i]) for i in keep]
                break
        else:
            raise InfeasibleError(f"no cover within {SURGERY_RETRIES} draws; last uncovered fraction {uncovered:.4g}",
                                  binding="retry_budget")
    lam_ok = all(bool(np.all(delta_set[rho[c] < Lam * rad - cloud.tol])) for c, rad, _ in balls)
    U = U & delta_set

    A_ = _vals(K)

    def pair(s1, s2):
        u = np.where(s1, b1 * w, 0)
        v = np.where(s2, b2 * w, 0)
        return complex(v @ A_ @ u - np.sum(v * np.diagonal(A_) * u))

    rest = delta_set & ~U
    om_i = core & ~U
    om_q = rest & dR
    om_r = rest & dQ & ~dR
    g = {
        "A": pair(qm, r_b), "B": pair(qm, r_s), "C": pair(q_b, delta_set), "D": pair(q_s, delta_set),
        "E1": pair(delta_set, om_q), "E2": pair(delta_set, om_r), "E3": pair(delta_set, om_i),
        "F1": pair(om_q, U), "F2": pair(om_r, U), "F3": pair(om_i, U),
    }
    G = pair(U, U)
    G1 = sum(pair(m & delta_set, m & delta_set) for _, _, m in balls) if balls else 0j
    g["G1"] = complex(G1)
    g["G2"] = G - G1
    total = pair(qm, rm)
    s = sum(g.values())
    sum_error = abs(s - total) / max(abs(total), sum(abs(v) for v in g.values()), 1e-300)

    # exact Cauchy-Schwarz for groups bounded through the operator norm
    cs_terms = {"A": (qm, r_b), "C": (q_b, delta_set), "E1": (delta_set, om_q), "E2": (delta_set, om_r),
                "E3": (delta_set, om_i), "F1": (om_q, U), "F2": (om_r, U), "F3": (om_i, U)}
    cs_ok = True
    for name, (s1, s2) in cs_terms.items():
        bound = T_norm * _norm(np.where(s1, b1, 0), w) * _norm(np.where(s2, b2, 0), w)
        cs_ok &= abs(g[name]) <= bound * (1 + 1e-9) + 1e-300

    mq, mr = float(np.sum(w[qm])), float(np.sum(w[rm]))
    qb_set = np.zeros(n, dtype=bool)
    qb_set[dyadic.boundary_region_qb(D, Dp, kq, aq, eps, r)] = True
    rb_set = np.zeros(n, dtype=bool)
    rb_set[dyadic.boundary_region_qb(Dp, D, kr, ar, eps, r)] = True
    d_exp = lam.d if lam is not None else 1.0
    bounds = {
        "Qb": T_norm * _norm(np.where(qb_set, b1, 0), w) * math.sqrt(mr),
        "Rb": T_norm * math.sqrt(mq) * _norm(np.where(rb_set, b2, 0), w),
        "upsilon": math.sqrt(upsilon) * T_norm * math.sqrt(mq * mr),
        "separated": C_size * eps ** -d_exp * math.sqrt(mq * mr),
    }
    if wbp is not None:
        lam_mass = sum(float(np.sum(w[rho[c] < Lam * rad - cloud.tol])) for c, rad, _ in balls)
        bounds["wbp"] = wbp * lam_mass
    mag = {k: abs(v) for k, v in g.items()}

    def ratio(num, den):
        return num / den if den > 0 else (0.0 if num == 0 else math.inf)

    ratios = {
        "C+E1+F1": ratio(mag["C"] + mag["E1"] + mag["F1"], bounds["Qb"]),
        "A+E2+F2": ratio(mag["A"] + mag["E2"] + mag["F2"], bounds["Rb"]),
        "E3+F3": ratio(mag["E3"] + mag["F3"], bounds["upsilon"]),
        "B+D": ratio(mag["B"] + mag["D"], bounds["separated"]),
    }
    if "wbp" in bounds:
        ratios["G1"] = ratio(mag["G1"], bounds["wbp"])
    return AdjacentSurgeryReport(g, total, float(sum_error), bounds, ratios, bool(cs_ok), bool(lam_ok),
                                 len(balls), attempts, uncovered, kb)


def adjacent_pairs(D, Dp, r, C=2.0):
    """All (Q, R) with d(Q, R) < C C0 min(l(Q), l(R)) and |gen gap| <= r."""
    rows = cz_matrices.CubeList(D, np.ones(D.n))
    cols = cz_matrices.CubeList(Dp, np.ones(Dp.n))
    dqr = cz_matrices.cube_distance_matrix(rows, cols)
    small = np.minimum(rows.side[:, None], cols.side[None, :])
    ok = (dqr < C * dyadic.C0 * small) & (np.abs(rows.gen[:, None] - cols.gen[None, :]) <= r)
    i, j = np.nonzero(ok)
    return [((int(rows.gen[a]), int(rows.idx[a])), (int(cols.gen[b]), int(cols.idx[b]))) for a, b in zip(i, j)]


# instances -----------------------------------------------------------------


@dataclass
class TbInstance:
    cloud: PointCloud
    mu: DiscreteMeasure
    lam: Dominator
    kernel: KernelMatrix
    b1: np.ndarray
    b2: np.ndarray
    name: str = "instance"
    meta: dict = field(default_factory=dict)

    @property
    def alpha(self):
        return self.kernel.alpha

    def scaled(self, c):
        return TbInstance(self.cloud, self.mu, self.lam, self.kernel.scaled(c), self.b1, self.b2, self.name,
                          dict(self.meta))

    def to_dict(self):
        spec = None
        if self.kernel is not None:
            spec = {"name": self.kernel.name, "alpha": self.kernel.alpha, "params": self.kernel.params}
        if spec is not None and self.kernel.name == "explicit":
            v = np.asarray(self.kernel.values, dtype=complex)
            spec["re"] = v.real.tolist()
            spec["im"] = v.imag.tolist()
        return {"name": self.name, "cloud": self.cloud.to_dict(), "measure": self.mu.to_dict(),
                "dominator": self.lam.to_dict(), "kernel": spec,
                "b1": _cplx_list(self.b1), "b2": _cplx_list(self.b2), "meta": self.meta}

    @classmethod
    def from_dict(cls, obj):
        cloud = PointCloud.from_dict(obj["cloud"])
        mu = DiscreteMeasure.from_dict(obj["measure"])
        if mu.n != cloud.n:
            raise ValidationError("measure and cloud sizes differ")
        lam = Dominator.from_dict(obj["dominator"]).bind(cloud)
        spec = obj.get("kernel")
        b1, b2 = _cplx_array(obj["b1"]), _cplx_array(obj["b2"])
        if spec is None:
            return cls(cloud, mu, lam, None, b1, b2, obj.get("name", "instance"), obj.get("meta", {}))
        scale = spec.get("params", {}).get("scale", 1.0)
        if spec["name"] == "cauchy":
            K = cauchy_kernel(cloud)
        elif spec["name"] == "bergman":
            K = bergman_kernel(cloud, spec["params"]["m"])
        elif spec["name"] == "explicit":
            K = KernelMatrix(_zero_diag(np.asarray(spec["re"]) + 1j * np.asarray(spec["im"])), "explicit",
                             spec.get("alpha", 1.0))
            scale = 1.0
        else:
            raise ValidationError(f"unknown kernel {spec['name']!r}")
        if scale != 1.0:
            K = K.scaled(scale)
        K.alpha = float(spec.get("alpha", K.alpha))
        K.params = dict(spec.get("params", {}))
        return cls(cloud, mu, lam, K, b1, b2, obj.get("name", "instance"), obj.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _cplx_list(b):
    b = np.asarray(b, dtype=complex)
    return [b.real.tolist(), b.imag.tolist()]


def _cplx_array(obj):
    return np.asarray(obj[0], dtype=float) + 1j * np.asarray(obj[1], dtype=float)


def cauchy_preset(n=250):
    """Grid on [0, 1) with uniform weights 1/n, lambda = 3r and the kernel 1/(x - y)."""
    from .space import grid1d
    cloud = grid1d(n)
    mu = DiscreteMeasure.uniform(n)
    lam = Dominator("power", C=3.0, d=1.0)
    verify_upper_doubling(mu, lam, cloud)
    one = np.ones(n, dtype=complex)
    return TbInstance(cloud, mu, lam, cauchy_kernel(cloud), one, one.copy(), f"cauchy{n}", {"n": n})


def bergman_points(n, sample_count, seed):
    """Points of the closed unit ball of C^n with radius 1 - 0.95 t^2, t uniform (boundary biased)."""
    rng = np.random.default_rng(seed)
    t = rng.random(sample_count)
    radius = 1 - 0.95 * t ** 2
    z = rng.standard_normal((sample_count, n)) + 1j * rng.standard_normal((sample_count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return radius[:, None] * z


def bergman_preset(n=1, m=1.0, sample_count=300, seed=0, max_halvings=50):
    """Bergman kernel, quasidistance and dominator max(delta(x)^m, r^m) on sampled points."""
    if n < 1 or not m > 0:
        raise ValidationError("need n >= 1 and m > 0")
    cloud = PointCloud.bergman(bergman_points(n, sample_count, seed))
    lam = Dominator("bergman", m=m).bind(cloud)
    w = np.full(sample_count, 1.0 / sample_count)
    # only the majorization depends on the weights and it is linear in them,
    # so the halving count follows from one scan; the full check confirms it
    worst, _ = majorization_ratio(DiscreteMeasure(w), lam, cloud)
    h = 0
    while worst * 2.0 ** -h > 1 + 1e-9 and h <= max_halvings:
        h += 1
    if h > max_halvings:
        raise InfeasibleError(f"weights fail the majorization after {max_halvings} halvings", binding="majorization")
    mu = DiscreteMeasure(w * 2.0 ** -h)
    if not verify_upper_doubling(mu, lam, cloud, raise_on_failure=False).ok:
        raise InfeasibleError("bergman dominator fails monotonicity or doubling on the sample", binding="doubling")
    one = np.ones(sample_count, dtype=complex)
    return TbInstance(cloud, mu, lam, bergman_kernel(cloud, m), one, one.copy(), f"bergman{sample_count}",
                      {"n": n, "m": m, "seed": seed, "halvings": h})


# end-to-end check -----------------------------------------------------------


@dataclass
class SeedDiagnostics:
    seed: int
    m: int
    pairing: complex
    class_abs: dict
    class_sum: dict
    sum_error: float
    f_bad_sq: dict  # r -> ||f_bad||^2
    g_bad_sq: dict
    separated_norm: float
    n_pieces: tuple


@dataclass
class TbReport:
    T_norm: float
    bmo_tb1: float
    bmo_tb2: float
    wbp: float
    ratio: float
    seeds: list
    r_list: list
    mean_f_bad: dict
    mean_g_bad: dict
    params: dict

    def to_dict(self):
        out = {k: getattr(self, k) for k in ("T_norm", "bmo_tb1", "bmo_tb2", "wbp", "ratio", "r_list", "params")}
        out["mean_f_bad"] = {str(k): v for k, v in self.mean_f_bad.items()}
        out["mean_g_bad"] = {str(k): v for k, v in self.mean_g_bad.items()}
        out["seeds"] = [{"seed": s.seed, "m": s.m, "pairing": [s.pairing.real, s.pairing.imag],
                         "class_abs": s.class_abs, "sum_error": s.sum_error,
                         "f_bad_sq": {str(k): v for k, v in s.f_bad_sq.items()},
                         "g_bad_sq": {str(k): v for k, v in s.g_bad_sq.items()},
                         "separated_norm": s.separated_norm, "n_pieces": list(s.n_pieces)} for s in self.seeds]
        return out

    def rows(self):
        return [{"seed": s.seed, "T_norm": self.T_norm, "bmo_tb1": self.bmo_tb1, "bmo_tb2": self.bmo_tb2,
                 "wbp": self.wbp, "ratio": self.ratio, **{f"abs_{k}": v for k, v in s.class_abs.items()},
                 "sum_error": s.sum_error} for s in self.seeds]


CLASSES = ("separated", "nested", "adjacent", "expectation", "bad")


def _pieces(f, b, S, mu, m):
    """Columns: E^b_Q f for generation-m cubes, then Delta^b_Q f for cubes of generation >= m."""
    dec = martingale.decompose(f, S, mu, m, b=b)
    cols, gen, idx, kind = [], [], [], []
    mem = S.mem(m)
    for a in range(S.n_cubes(m)):
        cols.append(np.where(mem == a, dec.top, 0))
        gen.append(m), idx.append(a), kind.append(0)
    for k in dec.levels:
        memk = S.mem(k)
        nz = np.unique(memk[np.abs(dec.diffs[k]) > 0])
        for a in nz:
            cols.append(np.where(memk == a, dec.diffs[k], 0))
            gen.append(k), idx.append(int(a)), kind.append(1)
    return np.array(cols).T, np.array(gen), np.array(idx), np.array(kind)


def tb_check(inst, seeds=(0,), r_list=(1, 2, 3, 4, 5), kappa=2.0, Lam=2.0, delta=0.25, C=2.0, r=None,
             separated_diagnostic=False, factory=None):
    """Norm, right-hand side functionals and per-class pairing sums over random grids."""
    mu, K, cloud = inst.mu, inst.kernel, inst.cloud
    if K is None:
        raise ValidationError("instance carries no kernel")
    w = mu.weights
    b1, b2 = np.asarray(inst.b1, dtype=complex), np.asarray(inst.b2, dtype=complex)
    params = cz_matrices.TbParams(inst.alpha, inst.lam.C_lambda, delta, kappa, Lam, C, r)
    fam = ball_family(cloud)
    T_norm = operator_norm(K, mu)
    bmo1 = bmo2_norm(apply_operator(K, mu, b1), mu, cloud, kappa, fam).value
    bmo2 = bmo2_norm(apply_adjoint(K, mu, b2), mu, cloud, kappa, fam).value
    wbp = wbp_constant(K, mu, b1, b2, Lam, cloud, fam).value
    ratio = T_norm / (bmo1 + bmo2 + wbp + 1)

    A = weighted_matrix(K, mu)
    diags = []
    if T_norm > 0:
        U, s, Vh = np.linalg.svd(A)
        sw = np.sqrt(w)
        f = Vh[0].conj() / sw
        g = U[:, 0].conj() / sw
        work = working_metric(cloud)
        fac = factory or RandomDyadicFactory(work, delta)
        M = _vals(K) * w[None, :] * w[:, None]
        M = np.array(M, dtype=complex)
        np.fill_diagonal(M, 0)
        for seed in seeds:
            D = fac.sample(trial_seed(seed, 0))
            Dp = fac.sample(trial_seed(seed, 1))
            diags.append(_seed_diagnostics(seed, f, g, D, Dp, M, mu, b1, b2, params, r_list, inst,
                                           separated_diagnostic))
    mean_f = {rr: float(np.mean([d.f_bad_sq[rr] for d in diags])) if diags else 0.0 for rr in r_list}
    mean_g = {rr: float(np.mean([d.g_bad_sq[rr] for d in diags])) if diags else 0.0 for rr in r_list}
    return TbReport(T_norm, bmo1, bmo2, wbp, ratio, diags, list(r_list), mean_f, mean_g, params.to_dict())


def _seed_diagnostics(seed, f, g, D, Dp, M, mu, b1, b2, params, r_list, inst, separated_diagnostic):
    w = mu.weights
    m = max(D.k_min, Dp.k_min)
    F, fg, fi, fk = _pieces(f, b1, D, mu, m)
    G, gg, gi, gk = _pieces(g, b2, Dp, mu, m)
    P = F.T @ M.T @ G  # P[i, j] = <T F_i, G_j>
    pairing_val = complex(g @ M @ f)
    rows = cz_matrices.CubeList(D, w)
    cols = cz_matrices.CubeList(Dp, w)
    dqr = cz_matrices.cube_distance_matrix(rows, cols)
    dd = dqr[np.ix_([rows.flat(k, a) for k, a in zip(fg, fi)], [cols.flat(k, a) for k, a in zip(gg, gi)])]
    dep_f = goodness_depth(D, Dp, params.gamma)
    dep_g = goodness_depth(Dp, D, params.gamma)
    bad_f = np.array([kd == 1 and dep_f[k][a] >= params.r for k, a, kd in zip(fg, fi, fk)])
    bad_g = np.array([kd == 1 and dep_g[k][a] >= params.r for k, a, kd in zip(gg, gi, gk)])
    small = D.delta ** np.maximum(fg[:, None], gg[None, :]).astype(float)
    near = dd < C_C0(params) * small
    gap = np.abs(fg[:, None] - gg[None, :])
    expect = (fk[:, None] == 0) | (gk[None, :] == 0)
    bad = ~expect & (bad_f[:, None] | bad_g[None, :])
    rest = ~expect & ~bad
    masks = {
        "expectation": expect,
        "bad": bad,
        "separated": rest & ~near,
        "nested": rest & near & (gap > params.r),
        "adjacent": rest & near & (gap <= params.r),
    }
    class_abs = {c: float(np.abs(P[masks[c]]).sum()) for c in CLASSES}
    class_sum = {c: complex(P[masks[c]].sum()) for c in CLASSES}
    tot = sum(class_sum.values())
    err = abs(tot - pairing_val) / max(abs(pairing_val), 1e-300)
    if err > SUM_RTOL:
        raise InternalError(f"class sums miss the pairing by {err:.3g} (seed {seed})")
    f_bad, g_bad = {}, {}
    for rr in r_list:
        fb = F[:, [i for i in range(F.shape[1]) if fk[i] == 1 and dep_f[fg[i]][fi[i]] >= rr]].sum(axis=1)
        gb = G[:, [i for i in range(G.shape[1]) if gk[i] == 1 and dep_g[gg[i]][gi[i]] >= rr]].sum(axis=1)
        f_bad[rr] = float(np.sum(np.abs(fb) ** 2 * w))
        g_bad[rr] = float(np.sum(np.abs(gb) ** 2 * w))
    sep_norm = float("nan")
    if separated_diagnostic:
        s1 = cz_matrices.assemble_separated(D, Dp, mu, inst.lam, inst.alpha, rows, cols)
        s2 = cz_matrices.assemble_separated(Dp, D, mu, inst.lam, inst.alpha, cols, rows)
        sep_norm = cz_matrices.matrix_norm(s1.values).value + cz_matrices.matrix_norm(s2.values).value
    return SeedDiagnostics(seed, m, pairing_val, class_abs, {k: [v.real, v.imag] for k, v in class_sum.items()},
                           float(err), f_bad, g_bad, sep_norm, (F.shape[1], G.shape[1]))


def C_C0(params):
    return params.C * params.C0
