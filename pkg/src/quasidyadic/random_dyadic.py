"""Randomized dyadic systems built by promoting children of a reference net.

Each generation-k reference center picks one of its children uniformly at
random, the picked children become candidate centers, and candidates that
come too close to an earlier one (in index order) are dropped. The
survivors are rebuilt into half-open cubes.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import dyadic
from .errors import ValidationError

LEVEL_OFFSET = 1 << 20
ARROW_TAG = 0x5EED
MIN_TRIALS_PROMOTION = 1000
MIN_TRIALS_MC = 10_000


def level_rng(seed, k, tag=ARROW_TAG):
    """Independent stream for generation k; element a of it drives pair (k, a)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), k + LEVEL_OFFSET, tag])))


def wilson_ci(hits, trials, level=0.95):
    if trials == 0:
        return 0.0, 1.0
    ci = binomtest(int(hits), int(trials)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


class ChildTable:
    """Children (k+1, b) <= (k, a) of every reference pair, grouped by parent."""

    def __init__(self, parents, n_parent):
        self.order = np.argsort(parents, kind="stable")
        self.counts = np.bincount(parents, minlength=n_parent)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def pick(self, pos):
        return self.order[self.starts + pos]

    def draw(self, rng):
        u = rng.random(self.counts.size)
        return np.minimum((u * self.counts).astype(np.int64), self.counts - 1)


@dataclass
class ArrowSample:
    seed: int
    positions: dict = field(default_factory=dict)  # k -> chosen child position per reference pair


class RandomDyadicFactory:
    """Reference nets (separation delta^k, parent rules 1/2 and 1) plus sampling."""

    def __init__(self, cloud, delta):
        dyadic._check_delta(delta)
        self.cloud = cloud
        self.delta = float(delta)
        self.dist = cloud.dist
        self.tol = cloud.tol
        self.net = dyadic.build_net(cloud, delta, sep_factor=1.0)
        self.relation = dyadic.build_parent_relation(self.net, 0.5, 1.0, dist=self.dist, tol=self.tol)
        self.k_min, self.k_max = self.net.k_min, self.net.k_max
        self.children = {}
        for k in range(self.k_min, self.k_max):
            par = self.relation.parents[k + 1 - self.k_min - 1]
            self.children[k] = ChildTable(par, self.net.level(k).size)

    def draw_arrows(self, seed):
        return ArrowSample(seed, {k: t.draw(level_rng(seed, k)) for k, t in self.children.items()})

    def promoted(self, k, pos):
        """Candidate centers y^k (point ids) in reference index order."""
        return self.net.level(k + 1)[self.children[k].pick(pos)]

    def centers_from_arrows(self, arrows):
        centers = []
        for k in range(self.k_min, self.k_max):
            y = self.promoted(k, arrows.positions[k])
            centers.append(dyadic.greedy_select(self.dist, y, self.delta ** k / 4 - self.tol))
        centers.append(np.arange(self.cloud.n))
        return centers

    def sample(self, seed=0, arrows=None):
        """Random system for ``seed`` (or for explicit ``arrows``)."""
        if arrows is None:
            arrows = self.draw_arrows(seed)
        centers = self.centers_from_arrows(arrows)
        net = dyadic.net_from_centers(self.cloud, self.delta, self.k_min, centers)
        rel = dyadic.build_parent_relation(net, 1.0 / 16, 4.0, dist=self.dist, tol=self.tol)
        sys_ = dyadic.DyadicSystem(net, rel, self.dist, self.tol)
        sys_.arrows = arrows
        return sys_

    def arrow_space(self):
        """Number of choices per (k, a), for exhaustive enumeration."""
        return {k: t.counts.copy() for k, t in self.children.items()}


def sample_random_system(cloud, delta, seed=0, arrows=None):
    return RandomDyadicFactory(cloud, delta).sample(seed, arrows)


# Monte Carlo estimators ---------------------------------------------------


@dataclass
class RandomizationStats:
    hits: int
    trials: int
    freq: float
    ci_lo: float
    ci_hi: float

    @property
    def pi0_hat(self):
        return self.ci_lo

    @property
    def pi1_hat(self):
        return 1.0 - self.ci_lo

    def eta_hat(self, delta):
        p1 = self.pi1_hat
        if p1 <= 0:
            return math.inf
        if p1 >= 1:
            return 0.0
        return math.log(p1) / math.log(delta)

    def to_dict(self):
        return dict(self.__dict__)


def _stats(hits, trials):
    lo, hi = wilson_ci(hits, trials)
    return RandomizationStats(int(hits), int(trials), hits / trials, lo, hi)


def promotion_probability(cloud, delta, k, child, trials=MIN_TRIALS_PROMOTION, seed=0, factory=None):
    """Frequency of the event: the reference child (k+1, child) is kept as the center of its parent."""
    if trials < MIN_TRIALS_PROMOTION:
        raise ValidationError(f"need at least {MIN_TRIALS_PROMOTION} trials")
    f = factory or RandomDyadicFactory(cloud, delta)
    if not f.k_min <= k < f.k_max:
        raise ValidationError(f"k must lie in [{f.k_min}, {f.k_max})")
    table = f.children[k]
    parent = int(f.relation.parents[k + 1 - f.k_min - 1][child])
    pos_target = int(np.flatnonzero(table.order[table.starts[parent]:table.starts[parent] + table.counts[parent]] == child)[0])
    target = int(f.net.level(k + 1)[child])
    hits = 0
    for t in range(trials):
        pos = table.draw(level_rng(trial_seed(seed, t), k))
        if pos[parent] != pos_target:
            continue
        y = f.promoted(k, pos)
        kept = dyadic.greedy_select(f.dist, y, f.delta ** k / 4 - f.tol)
        hits += int(target in kept)
    return _stats(hits, trials)


def trial_seed(master, t):
    """Per-trial seed derived from (master, trial index)."""
    return int(np.random.SeedSequence([int(master), int(t)]).generate_state(2, np.uint32).view(np.uint64)[0])


def loglog_slope(eps, hits, trials):
    """Least squares slope of log((hits + 1/2)/(trials + 1)) against log eps."""
    eps = np.asarray(eps, dtype=float)
    p = (np.asarray(hits, dtype=float) + 0.5) / (trials + 1.0)
    if eps.size < 2:
        return 0.0
    x = np.log(eps)
    y = np.log(p)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


@dataclass
class BoundaryEstimate:
    eps: list
    hits: list
    trials: int
    freq: list
    ci_lo: list
    ci_hi: list
    slope: float
    m: list  # largest m with 500 eps <= delta^m, per eps

    def rows(self):
        return [dict(eps=e, freq=f, ci_lo=lo, ci_hi=hi, hits=h, trials=self.trials)
                for e, f, lo, hi, h in zip(self.eps, self.freq, self.ci_lo, self.ci_hi, self.hits)]


def chain_depth(eps, delta):
    """Largest m with 500 eps <= delta^m."""
    if 500 * eps > delta * (1 + 1e-12):
        raise ValidationError(f"eps={eps} too large: need 500*eps <= delta")
    m = math.floor(math.log(500 * eps) / math.log(delta) + 1e-12)
    while delta ** m < 500 * eps * (1 - 1e-12):
        m -= 1
    return m


def boundary_probability(cloud, delta, x, k, eps_list, trials=MIN_TRIALS_MC, seed=0, factory=None):
    """Frequency of x lying in the eps-layer of some generation-k cube, shared trials over eps."""
    if trials < MIN_TRIALS_MC:
        raise ValidationError(f"need at least {MIN_TRIALS_MC} trials")
    eps_list = [float(e) for e in eps_list]
    ms = [chain_depth(e, delta) for e in eps_list]
    f = factory or RandomDyadicFactory(cloud, delta)
    hits = np.zeros(len(eps_list), dtype=np.int64)
    for t in range(trials):
        s = f.sample(trial_seed(seed, t))
        for i, e in enumerate(eps_list):
            hits[i] += int(dyadic.boundary_band(s, k, e, [x])[0])
    cis = [wilson_ci(h, trials) for h in hits]
    return BoundaryEstimate(eps_list, hits.tolist(), trials, (hits / trials).tolist(),
                            [c[0] for c in cis], [c[1] for c in cis],
                            loglog_slope(eps_list, hits, trials), ms)


# goodness -----------------------------------------------------------------


def _dist_to_set(dist, members):
    return dist[members].min(axis=0)


def is_good(D, Dp, k, a, r, gamma):
    """Exhaustive goodness test of cube (k, a) of D against all D' cubes r or more generations up."""
    dQ = _dist_to_set(D.dist, D.members(k, a))
    return _good_from_dq(Dp, dQ, k, r, gamma)


def _good_from_dq(Dp, dQ, k, r, gamma):
    lq = D_side(Dp.delta, k)
    i0 = int(np.argmin(dQ))
    for j in range(Dp.k_min, k - r + 1):
        mem = Dp.mem(j)
        nc = Dp.n_cubes(j)
        thr = lq ** gamma * D_side(Dp.delta, j) ** (1 - gamma) - Dp.tol
        d_in = np.full(nc, np.inf)
        np.minimum.at(d_in, mem, dQ)
        # distance from Q to the complement of R: the global minimum unless R holds it
        d_out = np.full(nc, dQ[i0])
        c0 = mem[i0]
        rest = mem != c0
        d_out[c0] = dQ[rest].min() if rest.any() else np.inf
        if np.any((d_in < thr) & (d_out < thr)):
            return False
    return True


def D_side(delta, k):
    return delta ** k


@dataclass
class GoodnessLabels:
    r: int
    gamma: float
    good: dict  # k -> bool array over generation-k cubes of D


def label_goodness(D, Dp, r, gamma):
    if r < 1:
        raise ValidationError("r must be at least 1")
    if not 0 < gamma < 0.5:
        raise ValidationError("gamma must lie in (0, 1/2)")
    good = {}
    for k in D.levels:
        lab = np.ones(D.n_cubes(k), dtype=bool)
        for a in range(D.n_cubes(k)):
            lab[a] = is_good(D, Dp, k, a, r, gamma)
        good[k] = lab
    return GoodnessLabels(int(r), float(gamma), good)


@dataclass
class BadnessEstimate:
    r: list
    hits: list
    trials: int
    freq: list
    ci_lo: list
    ci_hi: list

    def rows(self):
        return [dict(r=r, freq=f, ci_lo=lo, ci_hi=hi, hits=h, trials=self.trials)
                for r, f, lo, hi, h in zip(self.r, self.freq, self.ci_lo, self.ci_hi, self.hits)]


def badness_probability(cloud, delta, D, k, a, r_list, gamma, trials=MIN_TRIALS_MC, seed=0, factory=None,
                        min_trials=MIN_TRIALS_MC):
    """Frequency over random D' of cube (k, a) of D being bad, for each r (shared trials)."""
    if trials < min_trials:
        raise ValidationError(f"need at least {min_trials} trials")
    f = factory or RandomDyadicFactory(cloud, delta)
    dQ = _dist_to_set(D.dist, D.members(k, a))
    hits = np.zeros(len(r_list), dtype=np.int64)
    for t in range(trials):
        s = f.sample(trial_seed(seed, t))
        for i, r in enumerate(r_list):
            hits[i] += int(not _good_from_dq(s, dQ, k, r, gamma))
    cis = [wilson_ci(h, trials) for h in hits]
    return BadnessEstimate(list(r_list), hits.tolist(), trials, (hits / trials).tolist(),
                           [c[0] for c in cis], [c[1] for c in cis])


def goodness_depth(D, Dp, gamma):
    """Per cube of D the largest r for which it is bad against Dp (0 if never bad).

    A cube Q of generation k is bad for gap r exactly when some generation
    j <= k - r of Dp holds a cube R with both d(Q, R) and d(Q, X \\ R) below
    l(Q)^gamma l(R)^(1-gamma); so the depth is k - (smallest such j).
    """
    if not 0 < gamma < 0.5:
        raise ValidationError("gamma must lie in (0, 1/2)")
    depth = {}
    for k in D.levels:
        mem = D.mem(k)
        nq = D.n_cubes(k)
        order = np.argsort(mem, kind="stable")
        starts = np.searchsorted(mem[order], np.arange(nq))
        dQ = np.minimum.reduceat(D.dist[order], starts, axis=0)  # nq x n
        out = np.zeros(nq, dtype=np.int64)
        lq = D_side(D.delta, k)
        for j in range(Dp.k_min, k):
            memj = Dp.mem(j)
            nr = Dp.n_cubes(j)
            oj = np.argsort(memj, kind="stable")
            sj = np.searchsorted(memj[oj], np.arange(nr))
            d_in = np.minimum.reduceat(dQ[:, oj], sj, axis=1)  # nq x nr
            if nr > 1:
                part = np.partition(d_in, 1, axis=1)
                lo1, lo2 = part[:, :1], part[:, 1:2]
                d_out = np.where(d_in <= lo1, lo2, lo1)
                # ties at the minimum: another cube attains it too
                ties = (d_in == lo1).sum(axis=1, keepdims=True) > 1
                d_out = np.where(ties, lo1, d_out)
            else:
                d_out = np.full_like(d_in, np.inf)
            thr = lq ** gamma * D_side(Dp.delta, j) ** (1 - gamma) - Dp.tol
            bad = np.any((d_in < thr) & (d_out < thr), axis=1)
            out = np.where(bad & (out == 0), k - j, out)
        depth[k] = out
    return depth


def labels_from_depth(depth, r, gamma):
    if r < 1:
        raise ValidationError("r must be at least 1")
    return GoodnessLabels(int(r), float(gamma), {k: d < r for k, d in depth.items()})
