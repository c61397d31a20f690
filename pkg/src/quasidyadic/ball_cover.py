"""Random almost-coverings by separated quasimetric balls.

Stage m works at generation k + m s on the part of the cloud not yet hit by
a buffered ball. Each stage promotes random children of a theta-net, drops
conflicting candidates, and places balls of radius tau A0^-4 theta^g / 32
with one uniform tau in [1, 2] per stage. Balls always use the original
quasimetric.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import dyadic
from .errors import InfeasibleError, InternalError, ValidationError
from .random_dyadic import ChildTable, trial_seed, wilson_ci
from .space import regularity_constant, validate_quasimetric

GEN_OFFSET = 1 << 20
TAG_ARROW = 0xB411
TAG_TAU = 0x7A0
MIN_TRIALS = 1000
OMEGA_MAX_J = 60
PILOT_ESCALATION = 16


def _rng(seed, stage, g, tag):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [int(seed) & (2**64 - 1), int(stage), int(g) + GEN_OFFSET, tag])))


@dataclass
class CoverParams:
    theta: float
    upsilon: float
    A0: float
    k: int
    pi0: float
    omega: float
    eta0: float
    eps_reg: float
    A_reg: float
    s: int
    M: int
    g_floor: int
    c_omega: float  # separation coefficient multiplying theta^(k + min stage * s)
    checks: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


def theta_bound(A0):
    return A0 ** -4 / 32


def floor_generation(cloud, theta, A0):
    """First generation whose balls and nets can no longer split the cloud."""
    gap = cloud.min_gap if cloud.n > 1 else 1.0
    g = math.ceil(math.log(gap) / math.log(theta))
    while theta ** g > gap:
        g += 1
    return g


def default_start(cloud, theta):
    """Coarsest generation whose net has a single center: theta^k >= diam."""
    diam = cloud.diameter if cloud.n > 1 else 1.0
    return math.floor(math.log(diam) / math.log(theta) + 1e-12)


def check_params(p):
    """Re-evaluate the four defining inequalities."""
    return {
        "buffer": p.pi0 / (p.pi0 + p.eta0) >= 1 - p.upsilon / 2,
        "coverage": 1 - (1 - p.pi0 - p.eta0) ** p.M > (1 - p.upsilon) / (1 - p.upsilon / 2),
        "regularity_eps": (1 + p.eps_reg) ** 2 < 1 + p.omega / 3,
        "regularity_s": 2 * p.A_reg * p.theta ** p.s < p.omega / 3,
    }


def solve_params(theta, upsilon, A0, pi0, A_of_eps, k=0, g_floor=None):
    """Grid search for (omega, eps, s, M) given pi0 and a regularity oracle A_of_eps."""
    if not 0 < theta < theta_bound(A0):
        raise ValidationError(f"theta must lie in (0, A0^-4/32) = (0, {theta_bound(A0):.6g})")
    if not 0 < upsilon < 1:
        raise ValidationError("upsilon must lie in (0, 1)")
    if not pi0 > 0:
        raise InfeasibleError("promotion probability estimate is zero", binding="pi0")
    omega = None
    for j in range(1, OMEGA_MAX_J + 1):
        w = 2.0 ** -j
        if pi0 / (pi0 + 4 * w) >= 1 - upsilon / 2:
            omega = w
            break
    if omega is None:
        raise InfeasibleError("no omega on the grid satisfies the buffer inequality", binding="buffer")
    eta0 = 4 * omega
    target = (1 - upsilon) / (1 - upsilon / 2)
    base = 1 - pi0 - eta0
    M = 1
    while not 1 - base ** M > target:
        M += 1
        if M > 10 ** 7:
            raise InfeasibleError("no stage count satisfies the coverage inequality", binding="coverage")
    eps = None
    for j in range(1, OMEGA_MAX_J + 1):
        e = 2.0 ** -j
        if (1 + e) ** 2 < 1 + omega / 3:
            eps = e
            break
    if eps is None:
        raise InfeasibleError("no eps on the grid satisfies (1+eps)^2 < 1 + omega/3", binding="regularity_eps")
    A = max(float(A_of_eps(eps)), 1.0)
    s = 1
    while not 2 * A * theta ** s < omega / 3:
        s += 1
        if s > 10 ** 4:
            raise InfeasibleError("no s satisfies 2 A(eps) theta^s < omega/3", binding="regularity_s")
    c_omega = (omega / 3) / ((1 + eps) * A) * A0 ** -4 / 32
    p = CoverParams(theta, upsilon, A0, k, pi0, omega, eta0, eps, A, s, M,
                    g_floor if g_floor is not None else k, c_omega)
    p.checks = check_params(p)
    if not all(p.checks.values()):
        raise InternalError(f"derived parameters fail their own inequalities: {p.checks}")
    return p


def derive_cover_params(cloud, theta, upsilon, pilot_trials=MIN_TRIALS, k=None, seed=0, pi0=None, A0=None):
    """Pilot-estimate pi0 (lowest lower confidence bound) then solve for omega, eps, s, M."""
    if A0 is None:
        A0 = validate_quasimetric(cloud, eps_grid=(1.0,)).A0
    if not 0 < theta < theta_bound(A0):
        raise ValidationError(f"theta must lie in (0, A0^-4/32) = (0, {theta_bound(A0):.6g})")
    k = default_start(cloud, theta) if k is None else k
    g_floor = max(floor_generation(cloud, theta, A0), k)
    if pi0 is None:
        # a zero lower bound usually means too few trials for a small pi0: quadruple, at most twice
        trials = pilot_trials
        pi0 = pilot_pi0(cloud, theta, A0, k, g_floor, trials, seed)
        while pi0 == 0 and trials < PILOT_ESCALATION * pilot_trials:
            trials *= 4
            pi0 = pilot_pi0(cloud, theta, A0, k, g_floor, trials, seed)
    return solve_params(theta, upsilon, A0, pi0, lambda e: regularity_constant(cloud, e), k, g_floor)


def pilot_pi0(cloud, theta, A0, k, g_floor, trials, seed):
    """min over points and generations k..g_floor of the lower CI of single-stage coverage."""
    if trials < MIN_TRIALS:
        raise ValidationError(f"pilot needs at least {MIN_TRIALS} trials")
    worst = 1.0
    domain = np.arange(cloud.n)
    for g in range(k, g_floor + 1):
        hits = np.zeros(cloud.n, dtype=np.int64)
        for t in range(trials):
            st = sample_stage(cloud, theta, A0, g, domain, trial_seed(seed, t), 0)
            hits += st["label"] >= 0
        lo = min(wilson_ci(h, trials)[0] for h in np.unique(hits))
        worst = min(worst, lo)
    return worst


def sample_stage(cloud, theta, A0, g, domain, seed, stage):
    """One stage at generation g on ``domain``: balls labelled over the full cloud."""
    rho, tol = cloud.dist, cloud.tol
    n = cloud.n
    ids = np.asarray(domain, dtype=np.int64)
    top = dyadic.greedy_select(rho, ids, theta ** g - tol)
    low = dyadic.greedy_select(rho, ids, theta ** (g + 1) - tol)
    par, _, bad, code = dyadic._parent_kernel(rho, low, top, theta ** g / (2 * A0) - tol, theta ** g - tol)
    if code:
        raise InternalError(f"no parent at stage {stage}, generation {g}", witness=(g, int(bad)))
    table = ChildTable(par, top.size)
    pos = table.draw(_rng(seed, stage, g, TAG_ARROW))
    y = low[table.pick(pos)]
    centers = dyadic.greedy_select(rho, y, theta ** g / (2 * A0) ** 2 - tol)
    tau = 1.0 + _rng(seed, stage, g, TAG_TAU).random()
    radius = tau * A0 ** -4 * theta ** g / 32
    dc = rho[centers]
    inside = dc < radius - tol
    label = np.full(n, -1, dtype=np.int64)
    hit = inside.any(axis=0)
    if np.any(inside.sum(axis=0) > 1):
        x = int(np.argmax(inside.sum(axis=0) > 1))
        raise InternalError(f"overlapping balls at generation {g}", witness=(g, x))
    label[hit] = np.argmax(inside[:, hit], axis=0)
    return {"centers": centers, "radius": radius, "tau": tau, "label": label, "dc": dc}


@dataclass
class RandomBallFamily:
    centers: np.ndarray
    radii: np.ndarray
    stages: np.ndarray
    gens: np.ndarray
    taus: list
    omega: float
    label: np.ndarray  # ball index per point, -1 if uncovered
    params: CoverParams = None

    @property
    def covered(self):
        return self.label >= 0

    def to_dict(self):
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(), "stages": self.stages.tolist(),
                "gens": self.gens.tolist(), "taus": list(self.taus), "omega": self.omega}


def sample_almost_cover(cloud, params, seed=0, domain=None, k=None):
    """Run the M stages; stage m uses generation min(k + m s, g_floor) on the unbuffered remainder."""
    k = params.k if k is None else k
    A0, theta, omega = params.A0, params.theta, params.omega
    rho, tol = cloud.dist, cloud.tol
    remaining = np.arange(cloud.n) if domain is None else np.asarray(domain, dtype=np.int64)
    g_floor = max(params.g_floor, k)
    centers, radii, stages, gens, taus = [], [], [], [], []
    label = np.full(cloud.n, -1, dtype=np.int64)
    for m in range(params.M):
        if remaining.size == 0:
            break
        g = min(k + m * params.s, g_floor)
        st = sample_stage(cloud, theta, A0, g, remaining, seed, m)
        c, r = st["centers"], st["radius"]
        new = st["label"] >= 0
        if np.any(label[new] >= 0):
            x = int(np.flatnonzero(new & (label >= 0))[0])
            raise InternalError(f"stage {m} ball meets an earlier ball", witness=(m, x))
        label[new] = st["label"][new] + len(centers)
        centers.extend(c.tolist())
        radii.extend([r] * c.size)
        stages.extend([m] * c.size)
        gens.extend([g] * c.size)
        taus.append(st["tau"])
        buf = (st["dc"] < (1 + omega) * r - tol).any(axis=0)
        remaining = remaining[~buf[remaining]]
    return RandomBallFamily(np.asarray(centers, dtype=np.int64), np.asarray(radii, dtype=float),
                            np.asarray(stages, dtype=np.int64), np.asarray(gens, dtype=np.int64),
                            taus, omega, label, params)


@dataclass
class SeparationReport:
    disjoint: bool
    same_stage_slack: float  # min of rho(B, B') / bound, >= 1 fine
    cross_stage_slack: float
    witness: tuple = ()

    @property
    def ok(self):
        return self.disjoint and self.same_stage_slack >= 1 - 1e-9 and self.cross_stage_slack >= 1 - 1e-9


def check_family(cloud, fam):
    """Exact pairwise scan of disjointness and both separation bounds."""
    p = fam.params
    rho = cloud.dist
    # disjointness: every point lies in at most one ball
    within = rho[fam.centers] < fam.radii[:, None] - cloud.tol
    disjoint = bool(np.all(within.sum(axis=0) <= 1))
    pts = np.flatnonzero(fam.label >= 0)
    same, cross = math.inf, math.inf
    wit = ()
    if pts.size > 1:
        lb = fam.label[pts]
        st = fam.stages[lb]
        gen = fam.gens[lb]
        sub = rho[np.ix_(pts, pts)]
        diff = lb[:, None] != lb[None, :]
        same_mask = diff & (st[:, None] == st[None, :])
        cross_mask = diff & (st[:, None] != st[None, :])
        same_bound = 2.0 ** -3 * p.A0 ** -4 * p.theta ** gen.astype(float)
        if same_mask.any():
            ratio = np.where(same_mask, sub / same_bound[:, None], np.inf)
            i = int(np.argmin(ratio))
            same = float(ratio.flat[i])
            if same < 1 - 1e-9:
                wit = ("same_stage",) + tuple(int(pts[j]) for j in np.unravel_index(i, ratio.shape))
        if cross_mask.any():
            # the earlier stage of the pair sets the scale
            first = np.where(st[:, None] <= st[None, :], gen[:, None], gen[None, :]).astype(float)
            bound = p.c_omega * p.theta ** first
            ratio = np.where(cross_mask, sub / bound, np.inf)
            i = int(np.argmin(ratio))
            cross = float(ratio.flat[i])
            if cross < 1 - 1e-9 and not wit:
                wit = ("cross_stage",) + tuple(int(pts[j]) for j in np.unravel_index(i, ratio.shape))
    return SeparationReport(disjoint, same, cross, wit)


@dataclass
class CoverageEstimate:
    hits: np.ndarray
    trials: int
    freq: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    families_ok: bool


def coverage_probability(cloud, params, trials=MIN_TRIALS, seed=0, points=None, check=True):
    """Per-point frequency of x in the union of balls, with exact family checks."""
    if trials < MIN_TRIALS:
        raise ValidationError(f"need at least {MIN_TRIALS} trials")
    pts = np.arange(cloud.n) if points is None else np.asarray(points)
    hits = np.zeros(pts.size, dtype=np.int64)
    ok = True
    for t in range(trials):
        fam = sample_almost_cover(cloud, params, trial_seed(seed, t))
        hits += fam.label[pts] >= 0
        if check:
            ok &= check_family(cloud, fam).ok
    cis = {h: wilson_ci(h, trials) for h in np.unique(hits)}
    lo = np.array([cis[h][0] for h in hits])
    hi = np.array([cis[h][1] for h in hits])
    return CoverageEstimate(hits, trials, hits / trials, lo, hi, ok)


def buffer_probability(cloud, params, trials=MIN_TRIALS, seed=0, g=None):
    """Per-point frequency of falling in the buffer ring of a first-stage ball."""
    g = params.k if g is None else g
    hits = np.zeros(cloud.n, dtype=np.int64)
    for t in range(trials):
        st = sample_stage(cloud, params.theta, params.A0, g, np.arange(cloud.n), trial_seed(seed, t), 0)
        ring = ((st["dc"] < (1 + params.omega) * st["radius"] - cloud.tol).any(axis=0)) & (st["label"] < 0)
        hits += ring
    return hits / trials, hits
