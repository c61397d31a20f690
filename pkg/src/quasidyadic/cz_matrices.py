"""Cube-indexed matrices for separated and nested pairs, Schur sums, norms.

Cubes of a system are listed coarse to fine; all set distances are taken in
the metric the system was built on and are exact minima over member pairs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dyadic import C0, C1, C3
from .errors import InternalError, ValidationError


def gamma(alpha, C_lambda):
    """alpha / (2 (alpha + d)) with d = log2 C_lambda."""
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    if not C_lambda > 1:
        raise ValidationError("C_lambda must exceed 1")
    d = math.log2(C_lambda)
    return alpha / (2 * (alpha + d))


@dataclass
class TbParams:
    alpha: float
    C_lambda: float
    delta: float
    kappa: float = 2.0
    Lam: float = 2.0
    C: float = 2.0
    r: int = None
    C0: float = C0
    C1: float = C1
    C3: float = C3

    def __post_init__(self):
        if not self.kappa > 1 or not self.Lam > 1:
            raise ValidationError("kappa and Lambda must exceed 1")
        self.d = math.log2(self.C_lambda)
        self.gamma = gamma(self.alpha, self.C_lambda)
        r0 = min_r(self.delta, self.C, self.kappa, self.gamma, self.C0, self.C1, self.C3)
        if self.r is None:
            self.r = r0
        elif self.r < r0:
            raise ValidationError(f"r={self.r} violates the generation gap conditions (need r >= {r0})")

    def to_dict(self):
        return {k: getattr(self, k) for k in ("alpha", "C_lambda", "delta", "kappa", "Lam", "C", "r", "d", "gamma")}


def min_r(delta, C, kappa, gam, c0=C0, c1=C1, c3=C3):
    """Smallest r with delta^r <= C1/(C C0 kappa + C0 + C3) and delta^-(1-gamma) r >= C C0 kappa."""
    a = c1 / (C * c0 * kappa + c0 + c3)
    r = 1
    while not (delta ** r <= a and delta ** (-(1 - gam) * r) >= C * c0 * kappa):
        r += 1
    return r


class CubeList:
    """Flat enumeration of the cubes of a system over its stored generations."""

    def __init__(self, system, w):
        self.system = system
        gens, idx = [], []
        for k in system.levels:
            nc = system.n_cubes(k)
            gens.append(np.full(nc, k))
            idx.append(np.arange(nc))
        self.gen = np.concatenate(gens)
        self.idx = np.concatenate(idx)
        self.offset = {k: int(np.searchsorted(self.gen, k)) for k in system.levels}
        self.side = system.delta ** self.gen.astype(float)
        self.mass = np.concatenate([np.bincount(system.mem(k), w, system.n_cubes(k)) for k in system.levels])
        if np.any(self.mass <= 0):
            raise InternalError("empty cube encountered")
        self._dist = None

    def __len__(self):
        return self.gen.size

    def flat(self, k, a):
        return self.offset[k] + a

    def members(self, i):
        return self.system.members(int(self.gen[i]), int(self.idx[i]))

    def point_distances(self):
        """(#cubes x n) matrix of d(x, Q)."""
        if self._dist is None:
            S = self.system
            rows = []
            for k in S.levels:
                mem = S.mem(k)
                order = np.argsort(mem, kind="stable")
                starts = np.searchsorted(mem[order], np.arange(S.n_cubes(k)))
                rows.append(np.minimum.reduceat(S.dist[order], starts, axis=0))
            self._dist = np.vstack(rows)
        return self._dist


def cube_distance_matrix(cl_q, cl_r):
    """d(Q, R) for all Q in cl_q and R in cl_r."""
    dq = cl_q.point_distances()
    S = cl_r.system
    out = np.empty((len(cl_q), len(cl_r)))
    for k in S.levels:
        mem = S.mem(k)
        order = np.argsort(mem, kind="stable")
        starts = np.searchsorted(mem[order], np.arange(S.n_cubes(k)))
        o = cl_r.offset[k]
        out[:, o:o + S.n_cubes(k)] = np.minimum.reduceat(dq[:, order], starts, axis=1)
    return out


def sup_lambda(lam, members_list, radii):
    """max over z in Q of lambda(z, r) for each row Q and each radius in the row."""
    out = np.empty_like(radii, dtype=float)
    for i, mem in enumerate(members_list):
        out[i] = lam.sup_over(mem, radii[i])
    return out


@dataclass
class CubeMatrix:
    values: np.ndarray
    rows: CubeList
    cols: CubeList

    def coo(self):
        """(gen_Q, idx_Q, gen_R, idx_R, value) for nonzero entries."""
        i, j = np.nonzero(self.values)
        return [(int(self.rows.gen[a]), int(self.rows.idx[a]), int(self.cols.gen[b]), int(self.cols.idx[b]),
                 float(self.values[a, b])) for a, b in zip(i, j)]


def assemble_separated(D, Dp, mu, lam, alpha, rows=None, cols=None):
    """T_QR for l(Q) <= l(R); zero otherwise."""
    w = mu.weights
    rows = rows or CubeList(D, w)
    cols = cols or CubeList(Dp, w)
    dqr = cube_distance_matrix(rows, cols)
    lq, lr = rows.side[:, None], cols.side[None, :]
    big = lq + lr + dqr
    sl = sup_lambda(lam, [rows.members(i) for i in range(len(rows))], big)
    vals = (lq ** (alpha / 2) * lr ** (alpha / 2) / (big ** alpha * sl)
            * np.sqrt(rows.mass)[:, None] * np.sqrt(cols.mass)[None, :])
    vals = np.where(rows.gen[:, None] >= cols.gen[None, :], vals, 0.0)
    return CubeMatrix(vals, rows, cols)


def assemble_nested(D, Dp, mu, labels, alpha, r, rows=None, cols=None):
    """(l(Q)/l(R))^(alpha/2) (mu(Q)/mu(R1))^(1/2) for good Q inside R with gen(Q) > gen(R) + r."""
    w = mu.weights
    rows = rows or CubeList(D, w)
    cols = cols or CubeList(Dp, w)
    vals = np.zeros((len(rows), len(cols)))
    for i in range(len(rows)):
        k, a = int(rows.gen[i]), int(rows.idx[i])
        if not labels.good[k][a]:
            continue
        q = D.members(k, a)
        for j in range(Dp.k_min, min(k - r - 1, Dp.k_max) + 1):
            owners = np.unique(Dp.mem(j)[q])
            if owners.size != 1:
                continue
            R = int(owners[0])
            r1 = np.unique(Dp.mem(j + 1)[q])
            if r1.size != 1:
                continue
            m1 = float(np.sum(w[Dp.mem(j + 1) == r1[0]]))
            vals[i, cols.flat(j, R)] = (rows.side[i] / cols.side[cols.flat(j, R)]) ** (alpha / 2) * math.sqrt(rows.mass[i] / m1)
    return CubeMatrix(vals, rows, cols)


@dataclass
class SchurSums:
    row_max: float  # max over y of the integral in x
    col_max: float  # max over x of the integral in y
    reference: float  # delta^(alpha m / 2)

    @property
    def ratio(self):
        if self.reference == 0:
            return 0.0
        return max(self.row_max, self.col_max) / self.reference


def schur_sums(D, Dp, mu, lam, alpha, m, k, sep=None):
    """Integrals of K_{m,k} in each variable, K_{m,k} = T_QR (mu(Q) mu(R))^-1/2 on Q x R."""
    if m < 0:
        raise ValidationError("m must be nonnegative")
    ref = D.delta ** (alpha * m / 2)
    if not (D.k_min <= k + m <= D.k_max and Dp.k_min <= k <= Dp.k_max):
        return SchurSums(0.0, 0.0, ref)
    if sep is None:
        sep = assemble_separated(D, Dp, mu, lam, alpha)
    rq, rr = sep.rows, sep.cols
    iq = slice(rq.offset[k + m], rq.offset[k + m] + D.n_cubes(k + m))
    ir = slice(rr.offset[k], rr.offset[k] + Dp.n_cubes(k))
    mq, mr = rq.mass[iq], rr.mass[ir]
    kern = sep.values[iq, ir] / np.sqrt(mq)[:, None] / np.sqrt(mr)[None, :]
    row = kern.T @ mq  # per R: integral over x
    col = kern @ mr  # per Q: integral over y
    return SchurSums(float(row.max()), float(col.max()), ref)


@dataclass
class NormEstimate:
    power: float
    exact: float
    iterations: int

    @property
    def value(self):
        return self.exact if not math.isnan(self.exact) else self.power


def matrix_norm(M, tol=1e-8, max_iter=10_000, dense_limit=500, seed=0, block=32):
    """l2 operator norm by block power iteration on M^T M, plus the dense value when small.

    A block of vectors with a Rayleigh-Ritz step converges at the rate of the gap
    after the block, so clusters of near-equal top singular values (symmetric
    clouds) do not stall it.
    """
    M = np.asarray(M)
    if M.size == 0 or not np.any(M):
        return NormEstimate(0.0, 0.0, 0)
    p = min(block, M.shape[1])
    V = np.random.default_rng(seed).random((M.shape[1], p)) + 0.5
    V, _ = np.linalg.qr(V)
    lam_old = 0.0
    for it in range(1, max_iter + 1):
        V, _ = np.linalg.qr(M.conj().T @ (M @ V))
        MV = M @ V
        lam_new = float(np.linalg.eigvalsh(MV.conj().T @ MV)[-1])
        if abs(lam_new - lam_old) <= tol * lam_new:
            break
        lam_old = lam_new
    else:
        raise InternalError(f"power iteration did not converge in {max_iter} steps")
    power = math.sqrt(lam_new)
    exact = float(np.linalg.norm(M, 2)) if max(M.shape) <= dense_limit else float("nan")
    return NormEstimate(power, exact, it)


@dataclass
class PairingBound:
    lhs: float
    bound: float

    @property
    def ratio(self):
        return self.lhs / self.bound if self.bound > 0 else 0.0


def separated_hypotheses(dist, q, r, lq, lr, C, gam, tol=0.0):
    dqr = float(dist[np.ix_(q, r)].min())
    return lq <= lr and dqr >= C * C0 * lq - tol and dqr >= lq ** gam * lr ** (1 - gam) - tol, dqr


def separated_pairing_bound(K, mu, phi, psi, q, r, lq, lr, lam, alpha, C, gam, dist):
    """|<T phi, psi>| and the separated-cube bound of the matrix entry times ||phi|| ||psi||."""
    w = mu.weights
    ok, dqr = separated_hypotheses(dist, q, r, lq, lr, C, gam)
    if not ok:
        raise ValidationError("pair does not satisfy the separation hypotheses")
    if np.any(phi[np.setdiff1d(np.arange(w.size), q)] != 0) or np.any(psi[np.setdiff1d(np.arange(w.size), r)] != 0):
        raise ValidationError("test functions must be supported in their cubes")
    mean = abs(np.sum(phi * w))
    if mean > 1e-12 * max(1.0, float(np.sum(np.abs(phi) * w))):
        raise ValidationError("phi must have zero integral")
    Kr = K[np.ix_(r, q)].copy()
    lhs = abs(np.sum((psi[r] * w[r]) @ Kr * (phi[q] * w[q])))
    big = lq + lr + dqr
    entry = lq ** (alpha / 2) * lr ** (alpha / 2) / (big ** alpha * float(lam.sup_over(q, big)))
    nphi = math.sqrt(float(np.sum(np.abs(phi) ** 2 * w)))
    npsi = math.sqrt(float(np.sum(np.abs(psi) ** 2 * w)))
    bound = entry * math.sqrt(w[q].sum() * w[r].sum()) * nphi * npsi
    return PairingBound(float(lhs), float(bound))


def pairing_extremal(K, mu, q, r):
    """sup of |<T phi, psi>| / (||phi|| ||psi||) over phi on q with zero mean and psi on r."""
    w = mu.weights
    sq, sr = np.sqrt(w[q]), np.sqrt(w[r])
    A = sr[:, None] * K[np.ix_(r, q)] * sq[None, :]
    v = sq / np.linalg.norm(sq)
    P = np.eye(q.size) - np.outer(v, v)
    return float(np.linalg.norm(A @ P, 2)) if q.size > 1 else 0.0
