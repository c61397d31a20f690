"""Multi-scale nets, parent relations and exact half-open dyadic cubes.

On a finite cloud the bottom net is the whole cloud, so the half-open cube of
(k, a) is the set of points whose ancestor chain passes through (k, a).
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InternalError, ValidationError

C0 = 10.0
C1 = 1.0 / 100
C3 = 4.0
REGIME_DELTA = 1e-3


@njit(cache=True)
def _greedy_kernel(dist, ids, thr):
    m = ids.size
    keep = np.zeros(m, dtype=np.bool_)
    acc = np.empty(m, dtype=np.int64)
    na = 0
    for i in range(m):
        p = ids[i]
        ok = True
        for j in range(na):
            if dist[p, acc[j]] < thr:
                ok = False
                break
        if ok:
            keep[i] = True
            acc[na] = p
            na += 1
    return keep


def greedy_select(dist, ids, thr):
    """Scan ``ids`` in order, keeping each one at distance >= thr from all kept."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids
    return ids[_greedy_kernel(dist, ids, float(thr))]


@dataclass
class NetHierarchy:
    delta: float
    k_min: int
    k_max: int
    centers: list  # centers[k - k_min] = point ids at generation k
    sep_factor: float = 1.0
    sep: list = field(default_factory=list)  # achieved separation per level
    cover: list = field(default_factory=list)  # achieved covering radius per level

    def level(self, k):
        return self.centers[k - self.k_min]

    def achieved(self, dist):
        """(separation, covering radius) per level, recomputed from ``dist``."""
        return [_achieved(dist, c) for c in self.centers]

    @property
    def levels(self):
        return range(self.k_min, self.k_max + 1)


def _check_delta(delta):
    if not 0 < delta <= 0.25:
        raise ValidationError(f"delta must lie in (0, 1/4], got {delta}")
    if delta > REGIME_DELTA:
        warnings.warn(f"delta={delta} exceeds 1e-3; structural bounds are only guaranteed below it",
                      stacklevel=3)


def level_range(dist, delta, sep_factor, tol):
    """(k_min, k_max): finest level with one center, first level with all points."""
    n = dist.shape[0]
    if n == 1:
        return 0, 0
    off = dist[~np.eye(n, dtype=bool)]
    diam, gap = float(off.max()), float(off.min())
    ld = math.log(delta)
    # k_min: largest k with sep * delta^k > diam
    k_min = math.floor(math.log(diam / sep_factor) / ld)
    while sep_factor * delta ** k_min <= diam + tol:
        k_min -= 1
    while sep_factor * delta ** (k_min + 1) > diam + tol:
        k_min += 1
    # k_max: smallest k with sep * delta^k <= gap
    k_max = math.ceil(math.log(gap / sep_factor) / ld)
    while sep_factor * delta ** k_max > gap + tol:
        k_max += 1
    while sep_factor * delta ** (k_max - 1) <= gap + tol:
        k_max -= 1
    return k_min, max(k_max, k_min)


def _achieved(dist, centers):
    if centers.size > 1:
        sub = dist[np.ix_(centers, centers)]
        sep = float(sub[~np.eye(centers.size, dtype=bool)].min())
    else:
        sep = math.inf
    cover = float(dist[:, centers].min(axis=1).max())
    return sep, cover


def build_net(cloud, delta, sep_factor=1.0, k_range=None, dist=None):
    """Greedy maximal sep_factor*delta^k separated subsets, ascending id order."""
    _check_delta(delta)
    if not sep_factor > 0:
        raise ValidationError("sep_factor must be positive")
    dist = cloud.dist if dist is None else dist
    tol = cloud.tol
    n = dist.shape[0]
    k_min, k_max = level_range(dist, delta, sep_factor, tol) if k_range is None else k_range
    ids = np.arange(n)
    centers, seps, covers = [], [], []
    for k in range(k_min, k_max + 1):
        thr = sep_factor * delta ** k
        c = ids.copy() if k == k_max else greedy_select(dist, ids, thr - tol)
        if k == k_max and n > 1 and thr > float(dist[~np.eye(n, dtype=bool)].min()) + tol:
            raise ValidationError("k_max is too coarse to hold every point")
        centers.append(c)
        s, cv = _achieved(dist, c)
        seps.append(s)
        covers.append(cv)
    return NetHierarchy(float(delta), k_min, k_max, centers, float(sep_factor), seps, covers)


def net_from_centers(cloud, delta, k_min, centers, dist=None):
    """Wrap explicit per-level center lists; the last level must be all points."""
    dist = cloud.dist if dist is None else dist
    centers = [np.asarray(c, dtype=np.int64) for c in centers]
    return NetHierarchy(float(delta), k_min, k_min + len(centers) - 1, centers, float("nan"))


@dataclass
class ParentRelation:
    parents: list  # parents[k - k_min - 1][a] = parent index at level k-1, for k > k_min
    rule: list  # same shape, True where the close rule fired
    close_frac: float
    loose_frac: float


@njit(cache=True)
def _parent_kernel(dist, child, up, close_thr, loose_thr):
    nc = child.size
    par = np.empty(nc, dtype=np.int64)
    rule = np.zeros(nc, dtype=np.bool_)
    for i in range(nc):
        p = child[i]
        best = -1
        bestd = np.inf
        hit = -1
        for j in range(up.size):
            d = dist[p, up[j]]
            if d < close_thr:
                if hit >= 0:
                    return par, rule, i, 2
                hit = j
            if d < bestd:
                bestd = d
                best = j
        if hit >= 0:
            par[i] = hit
            rule[i] = True
        elif bestd < loose_thr:
            par[i] = best
        else:
            return par, rule, i, 1
    return par, rule, -1, 0


def build_parent_relation(net, close_frac=1.0 / 16, loose_frac=4.0, dist=None, cloud=None, tol=None):
    """Close rule first (unique center within close_frac*delta^(k-1)), else nearest within loose_frac."""
    if dist is None:
        dist = cloud.dist
    if tol is None:
        tol = cloud.tol if cloud is not None else 1e-12 * float(dist.max())
    parents, rules = [], []
    for k in range(net.k_min + 1, net.k_max + 1):
        scale = net.delta ** (k - 1)
        par, rule, bad, code = _parent_kernel(dist, np.ascontiguousarray(net.level(k), dtype=np.int64),
                                              np.ascontiguousarray(net.level(k - 1), dtype=np.int64),
                                              close_frac * scale - tol, loose_frac * scale - tol)
        if code == 2:
            raise InternalError(f"two close parents for ({k}, {bad})", witness=(k, int(bad)))
        if code == 1:
            raise InternalError(f"no parent candidate for ({k}, {bad})", witness=(k, int(bad)))
        parents.append(par)
        rules.append(rule)
    return ParentRelation(parents, rules, float(close_frac), float(loose_frac))


class DyadicSystem:
    """Half-open cubes realized through ancestor chains.

    ``membership[k - k_min][x]`` is the index of the generation-k cube that
    contains point x. Cube (k, a) has center ``net.level(k)[a]`` and side
    length delta^k.
    """

    def __init__(self, net, relation, dist, tol):
        self.net = net
        self.relation = relation
        self.dist = dist
        self.tol = tol
        self.delta = net.delta
        self.k_min, self.k_max = net.k_min, net.k_max
        n = dist.shape[0]
        bottom = net.level(net.k_max)
        if bottom.size != n or np.any(np.sort(bottom) != np.arange(n)):
            raise ValidationError("bottom level must contain every point exactly once")
        mem = np.empty(n, dtype=np.int64)
        mem[bottom] = np.arange(n)
        levels = [mem]
        for k in range(net.k_max, net.k_min, -1):
            mem = relation.parents[k - net.k_min - 1][mem]
            levels.append(mem)
        self.membership = levels[::-1]
        for m in self.membership:
            m.setflags(write=False)

    @property
    def n(self):
        return self.dist.shape[0]

    @property
    def levels(self):
        return range(self.k_min, self.k_max + 1)

    def mem(self, k):
        """Cube index per point at generation k (constant outside [k_min, k_max])."""
        if k < self.k_min:
            return np.zeros(self.n, dtype=np.int64)
        return self.membership[min(k, self.k_max) - self.k_min]

    def centers(self, k):
        if k < self.k_min:
            return self.net.level(self.k_min)
        if k > self.k_max:
            return np.arange(self.n)[np.argsort(self.net.level(self.k_max))]
        return self.net.level(k)

    def n_cubes(self, k):
        return self.centers(k).size

    def members(self, k, a):
        return np.flatnonzero(self.mem(k) == a)

    def side(self, k):
        return self.delta ** k

    def cube_of(self, x, k):
        return int(self.mem(k)[x])

    def center_of(self, x, k):
        return int(self.centers(k)[self.mem(k)[x]])

    def children(self, k, a):
        """Indices of generation k+1 cubes inside (k, a)."""
        if k >= self.k_max:
            return np.array([a])
        return np.flatnonzero(self.relation.parents[k + 1 - self.k_min - 1] == a)

    def parent_array(self, k):
        """Parent index at k-1 of each generation k cube."""
        return self.relation.parents[k - self.k_min - 1]

    def cubes(self):
        """All (k, a) over the stored generations, coarse to fine."""
        return [(k, a) for k in self.levels for a in range(self.n_cubes(k))]

    def to_dict(self):
        return {
            "delta": self.delta,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "centers": [c.tolist() for c in self.net.centers],
            "parents": [p.tolist() for p in self.relation.parents],
            "membership": [m.tolist() for m in self.membership],
            "close_frac": self.relation.close_frac,
            "loose_frac": self.relation.loose_frac,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def build_cubes(net, relation, dist=None, cloud=None):
    dist = cloud.dist if dist is None else dist
    tol = cloud.tol if cloud is not None else 1e-12 * float(dist.max())
    return DyadicSystem(net, relation, dist, tol)


def build_system(cloud, delta, dist=None):
    """Deterministic system with the separation 1/8 nets and (1/16, 4) parent rules."""
    dist = cloud.dist if dist is None else dist
    net = build_net(cloud, delta, sep_factor=1.0 / 8, dist=dist)
    rel = build_parent_relation(net, 1.0 / 16, 4.0, dist=dist, tol=cloud.tol)
    return DyadicSystem(net, rel, dist, cloud.tol)


# verification ------------------------------------------------------------


@dataclass
class SystemReport:
    ok: bool
    partition: bool
    nesting: bool
    small_ball_slack: float  # min over violators-or-not of the ball test margin; >= 0 fine
    diameter_slack: float  # min of 5 delta^k - max dist to center; > 0 fine
    diam_ratio: float  # max diam(Q) / (C0 delta^k); < 1 fine
    center_member: bool
    witness: tuple = ()

    def to_dict(self):
        return dict(self.__dict__, witness=list(self.witness))


def verify_system(system, raise_on_failure=True):
    """Exhaustive check of the partition, nesting, small ball, diameter and center properties."""
    dist, tol = system.dist, system.tol
    n = system.n
    partition = nesting = center_ok = True
    sb_slack = math.inf
    dm_slack = math.inf
    diam_ratio = 0.0
    witness = ()
    for k in system.levels:
        mem = system.mem(k)
        cen = system.centers(k)
        nc = cen.size
        side = system.side(k)
        if mem.min() < 0 or mem.max() >= nc or np.unique(mem).size != nc:
            partition = False
            witness = witness or ("partition", k, -1, -1)
        if k > system.k_min:
            par = system.parent_array(k)
            if np.any(par[mem] != system.mem(k - 1)):
                x = int(np.argmax(par[mem] != system.mem(k - 1)))
                nesting = False
                witness = witness or ("nesting", k, int(mem[x]), x)
        own = mem[cen] != np.arange(nc)
        if np.any(own):
            a = int(np.argmax(own))
            center_ok = False
            witness = witness or ("center", k, a, int(cen[a]))
        # small ball: points within C1 delta^k of a center must sit in its cube
        dc = dist[cen]  # nc x n
        near = dc < C1 * side - tol
        wrong = near & (mem[None, :] != np.arange(nc)[:, None])
        if np.any(wrong):
            a, x = np.unravel_index(int(np.argmax(wrong)), wrong.shape)
            witness = witness or ("small_ball", k, int(a), int(x))
            sb_slack = min(sb_slack, float(dc[a, x] - C1 * side))
        else:
            # margin: distance from each center to the nearest foreign point
            foreign = np.where(mem[None, :] != np.arange(nc)[:, None], dc, np.inf)
            sb_slack = min(sb_slack, float(foreign.min() - C1 * side))
        # diameter: members within 5 delta^k of center, diam < C0 delta^k
        rad = dc[mem, np.arange(n)]
        i = int(np.argmax(rad))
        dm_slack = min(dm_slack, float(5 * side - rad[i]))
        if rad[i] >= 5 * side - tol:
            witness = witness or ("diameter_ball", k, int(mem[i]), i)
        order = np.argsort(mem, kind="stable")
        bounds = np.searchsorted(mem[order], np.arange(nc + 1))
        for a in range(nc):
            ids = order[bounds[a]:bounds[a + 1]]
            if ids.size > 1:
                dq = float(dist[np.ix_(ids, ids)].max())
                ratio = dq / (C0 * side)
                if ratio > diam_ratio:
                    diam_ratio = ratio
                    if dq >= C0 * side - tol:
                        witness = witness or ("diameter", k, a, int(ids[0]))
    ok = partition and nesting and center_ok and sb_slack >= -tol and dm_slack > tol and diam_ratio < 1
    rep = SystemReport(ok, partition, nesting, sb_slack, dm_slack, diam_ratio, center_ok, witness)
    if raise_on_failure and not ok:
        raise InternalError(f"dyadic system violates {witness[0]} at (k, a, x) = {witness[1:]}",
                            witness=witness)
    return rep


# boundary sets -----------------------------------------------------------


def set_distance(dist, rows, cols):
    """min over rows x cols, +inf when either side is empty."""
    if len(rows) == 0 or len(cols) == 0:
        return math.inf
    return float(dist[np.ix_(rows, cols)].min())


def boundary_layer(system, k, a, eps):
    """Points x with d(x, Q) <= eps l(Q) and d(x, X \\ Q) <= eps l(Q), Q = cube (k, a)."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    dist = system.dist
    inside = system.mem(k) == a
    if inside.all():
        return np.array([], dtype=np.int64)
    thr = eps * system.side(k) + system.tol
    d_in = dist[:, inside].min(axis=1)
    d_out = dist[:, ~inside].min(axis=1)
    return np.flatnonzero((d_in <= thr) & (d_out <= thr))


def boundary_band(system, k, eps, points=None):
    """Mask of points lying in the layer of some generation-k cube.

    x is in the layer of a generation-k cube exactly when some y within
    eps delta^k of x lies in a different generation-k cube than x.
    """
    mem = system.mem(k)
    thr = eps * system.side(k) + system.tol
    pts = np.arange(system.n) if points is None else np.asarray(points)
    near = system.dist[pts] <= thr
    return np.any(near & (mem[None, :] != mem[pts, None]), axis=1)


def boundary_region_qb(D, Dp, k, a, eps, r):
    """Q intersected with the layers of all D' cubes within r generations of Q."""
    q = D.members(k, a)
    hit = np.zeros(q.size, dtype=bool)
    for j in range(k - r, k + r + 1):
        hit |= boundary_band(Dp, j, eps, q)
    return q[hit]


def chain_separation_check(system, x, k, m, eps):
    """Separation of the chain centers of x when x is within eps delta^k of the cube boundary.

    Returns True when the band test fails (vacuous) or when every pair
    j < i in [k, k+m] of chain centers satisfies d >= delta^j / 500.
    """
    if m < 0 or not eps > 0:
        raise ValidationError("need m >= 0 and eps > 0")
    if 500 * eps > system.delta ** m * (1 + 1e-12):
        raise ValidationError(f"500*eps={500 * eps} exceeds delta^m={system.delta ** m}")
    dist = system.dist
    inside = system.mem(k) == system.mem(k)[x]
    d_out = dist[x, ~inside].min() if not inside.all() else math.inf
    if not d_out < eps * system.side(k) - system.tol:
        return True
    chain = np.array([system.center_of(x, j) for j in range(k, k + m + 1)])
    dc = dist[np.ix_(chain, chain)]
    for jj in range(m + 1):
        for ii in range(jj + 1, m + 1):
            if dc[jj, ii] < system.delta ** (k + jj) / 500 - system.tol:
                return False
    return True

