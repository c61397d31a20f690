"""Finite quasimetric point clouds.

A cloud stores its full distance matrix. Constants of the quasimetric
(A0, the regularity table A(eps), a doubling estimate) are computed by
exhaustive scans, never estimated. ``macias_segovia_metric`` turns a
quasimetric into an honest metric comparable to a power of it.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.sparse.csgraph import shortest_path

from .errors import InternalError, ValidationError

KINDS = ("euclidean", "sup", "snowflake", "explicit", "bergman")

# relative tolerance used for every distance comparison downstream
REL_TOL = 1e-12
MAX_POINTS = 2000


class PointCloud:
    """Points 0..n-1 with a symmetric quasimetric matrix ``dist``.

    Parameters
    ----------
    dist : array_like, shape (n, n)
        Quasimetric values. Must be symmetric, zero exactly on the diagonal.
    coords : array_like, optional
        Coordinates the matrix was computed from (kept for serialization).
    metric : str
        One of ``KINDS``.
    beta : float, optional
        Exponent for snowflake clouds.
    """

    def __init__(self, dist, coords=None, metric="explicit", beta=None, max_points=MAX_POINTS):
        if metric not in KINDS:
            raise ValidationError(f"unknown metric kind {metric!r}")
        dist = np.array(dist, dtype=float)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1] or dist.shape[0] == 0:
            raise ValidationError("distance matrix must be square and nonempty")
        n = dist.shape[0]
        if n > max_points:
            raise ValidationError(f"{n} points exceeds the cap of {max_points}")
        _check_matrix(dist)
        self.dist = dist
        self.dist.setflags(write=False)
        self.coords = None if coords is None else np.array(coords)
        self.metric = metric
        self.beta = beta
        self.n = n
        self.scale = float(dist.max()) if n > 1 else 1.0
        self.tol = REL_TOL * self.scale

    # constructors -------------------------------------------------------

    @classmethod
    def from_coords(cls, coords, metric="euclidean"):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        diff = coords[:, None, :] - coords[None, :, :]
        if metric == "euclidean":
            dist = np.sqrt((diff ** 2).sum(-1))
        elif metric == "sup":
            dist = np.abs(diff).max(-1)
        else:
            raise ValidationError(f"coordinates need metric euclidean or sup, got {metric!r}")
        return cls(dist, coords=coords, metric=metric)

    @classmethod
    def snowflake(cls, coords, beta):
        """Euclidean distance raised to the power ``beta``."""
        if not beta > 0:
            raise ValidationError("snowflake exponent must be positive")
        base = cls.from_coords(coords, "euclidean")
        return cls(base.dist ** beta, coords=base.coords, metric="snowflake", beta=float(beta))

    @classmethod
    def bergman(cls, points):
        """Complex points of the closed unit ball with the Bergman quasidistance.

        ``points`` has shape (N, n) and complex dtype; no point may be 0.
        """
        z = np.atleast_2d(np.asarray(points, dtype=complex))
        return cls(bergman_quasidistance(z), coords=z, metric="bergman")

    # serialization ------------------------------------------------------

    def to_dict(self):
        out = {"n": self.n, "coords": None, "dist": None, "metric": self.metric}
        if self.coords is not None:
            c = self.coords
            if np.iscomplexobj(c):
                c = np.stack([c.real, c.imag], axis=-1).reshape(c.shape[0], -1)
            out["coords"] = c.tolist()
        if self.metric in ("explicit", "snowflake") or self.coords is None:
            out["dist"] = self.dist.tolist()
        if self.beta is not None:
            out["beta"] = self.beta
        return out

    @classmethod
    def from_dict(cls, obj):
        metric = obj.get("metric", "explicit")
        coords = obj.get("coords")
        dist = obj.get("dist")
        if metric == "bergman":
            c = np.asarray(coords, dtype=float)
            c = c.reshape(c.shape[0], -1, 2)
            cloud = cls.bergman(c[..., 0] + 1j * c[..., 1])
        elif dist is not None:
            cloud = cls(dist, coords=coords, metric=metric, beta=obj.get("beta"))
        elif metric == "snowflake":
            cloud = cls.snowflake(coords, obj["beta"])
        elif coords is not None:
            cloud = cls.from_coords(coords, metric)
        else:
            raise ValidationError("cloud JSON needs either coords or dist")
        if "n" in obj and obj["n"] != cloud.n:
            raise ValidationError(f"declared n={obj['n']} but found {cloud.n} points")
        return cloud

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # simple geometry ----------------------------------------------------

    @property
    def diameter(self):
        return float(self.dist.max())

    @property
    def min_gap(self):
        if self.n < 2:
            return math.inf
        iu = np.triu_indices(self.n, 1)
        return float(self.dist[iu].min())

    def ball(self, center, r):
        """Boolean mask of the open ball {y : rho(y, center) < r}."""
        return self.dist[center] < r - self.tol

    def subcloud(self, ids):
        ids = np.asarray(ids)
        coords = None if self.coords is None else self.coords[ids]
        return PointCloud(self.dist[np.ix_(ids, ids)], coords=coords, metric=self.metric, beta=self.beta)


def _check_matrix(dist):
    n = dist.shape[0]
    if not np.all(np.isfinite(dist)):
        i, j = np.argwhere(~np.isfinite(dist))[0]
        raise ValidationError(f"non-finite distance at pair ({i}, {j})", witness=(int(i), int(j)))
    if np.any(dist < 0):
        i, j = np.argwhere(dist < 0)[0]
        raise ValidationError(f"negative distance at pair ({i}, {j})", witness=(int(i), int(j)))
    scale = dist.max() if n > 1 else 1.0
    asym = np.abs(dist - dist.T) > REL_TOL * max(scale, 1e-300)
    if np.any(asym):
        i, j = np.argwhere(asym)[0]
        raise ValidationError(f"asymmetric distance at pair ({i}, {j})", witness=(int(i), int(j)))
    if np.any(np.diag(dist) != 0):
        i = int(np.argmax(np.diag(dist) != 0))
        raise ValidationError(f"nonzero self-distance at point {i}", witness=(i, i))
    off = dist + np.eye(n)
    if np.any(off <= 0):
        i, j = np.argwhere(off <= 0)[0]
        raise ValidationError(f"distinct points ({i}, {j}) at distance zero", witness=(int(i), int(j)))


def bergman_quasidistance(z):
    """||x|-|y|| + |1 - conj(x).y/(|x||y|)| for rows of ``z``."""
    r = np.linalg.norm(z, axis=1)
    if np.any(r == 0):
        raise ValidationError("the Bergman quasidistance is undefined at the origin")
    u = z / r[:, None]
    inner = u.conj() @ u.T
    d = np.abs(r[:, None] - r[None, :]) + np.abs(1 - inner)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


# certificates ------------------------------------------------------------


@dataclass
class QuasimetricCertificate:
    A0: float
    regularity_table: list  # (eps, A(eps)) pairs
    doubling_N: int
    geometric_dim: float
    witness_A0: tuple = field(default=None)

    def A(self, eps):
        """Look up A(eps) for a tabulated eps."""
        for e, a in self.regularity_table:
            if abs(e - eps) <= 1e-15 * max(1.0, abs(eps)):
                return a
        raise ValidationError(f"eps={eps} is not in the regularity table")

    def to_dict(self):
        return {"A0": self.A0, "regularity_table": [list(r) for r in self.regularity_table],
                "doubling_N": self.doubling_N, "geometric_dim": self.geometric_dim}


DEFAULT_EPS_GRID = (0.25, 0.5, 1.0, 2.0)


def validate_quasimetric(cloud, eps_grid=DEFAULT_EPS_GRID):
    """Exhaustive triple scan for A0 and the regularity table A(eps).

    A0 = max rho(x,y)/(rho(x,z)+rho(z,y)), clamped to >= 1.
    A(eps) = max (rho(x,y) - (1+eps) rho(x,z))/rho(z,y), clamped to >= 0.
    Both maxima run over triples of distinct points, so a two-point cloud
    has A0 = 1 and A(eps) = 0.
    """
    eps_grid = [float(e) for e in eps_grid]
    if any(not e > 0 for e in eps_grid):
        raise ValidationError("regularity eps values must be positive")
    A0, amax, wit = _triple_scan(cloud.dist, np.array(eps_grid, dtype=float))
    table = [(e, float(max(a, 0.0))) for e, a in zip(eps_grid, amax)]
    N = doubling_estimate(cloud)
    return QuasimetricCertificate(A0=A0, regularity_table=table, doubling_N=N,
                                  geometric_dim=math.log2(N) if N > 1 else 0.0, witness_A0=wit)


@njit(cache=True)
def _triple_scan_kernel(rho, eps):
    n = rho.shape[0]
    ne = eps.shape[0]
    a0 = 1.0
    wit = np.array([-1, -1, -1])
    amax = np.zeros(ne)
    c = 1.0 + eps
    inv = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                inv[i, j] = 1.0 / rho[i, j]
    for x in range(n):
        for z in range(n):
            if z == x:
                continue
            rxz = rho[x, z]
            for y in range(n):
                if y == x or y == z:
                    continue
                rxy = rho[x, y]
                v = rxy / (rxz + rho[z, y])
                if v > a0:
                    a0 = v
                    wit[0] = x
                    wit[1] = y
                    wit[2] = z
                p = rxy * inv[z, y]
                q = rxz * inv[z, y]
                for i in range(ne):
                    w = p - c[i] * q
                    if w > amax[i]:
                        amax[i] = w
    return a0, amax, wit


def _triple_scan(rho, eps):
    """A0 and A(eps) over distinct triples (x, y, z); witness for A0."""
    if rho.shape[0] < 3:
        return 1.0, np.zeros(eps.size), None
    a0, amax, wit = _triple_scan_kernel(np.ascontiguousarray(rho), eps)
    wit = None if wit[0] < 0 else tuple(int(v) for v in wit)
    return float(a0), amax, wit


def regularity_constant(cloud, eps):
    """A(eps) for a single eps by the same exhaustive scan."""
    return float(max(_triple_scan(cloud.dist, np.array([float(eps)]))[1][0], 0.0))


def doubling_estimate(cloud):
    """Smallest N verified on a dyadic radius ladder.

    For every center and every radius r = diam / 2^j down to the minimum gap,
    a greedy r/2-separated subset of B(x, r) is built; by maximality the
    r/2-balls around it cover B(x, r). N is the largest such count.
    """
    n = cloud.n
    if n == 1:
        return 1
    rho = cloud.dist
    tol = cloud.tol
    radii = []
    r = cloud.diameter * 2.0
    while r >= cloud.min_gap * 0.5:
        radii.append(r)
        r *= 0.5
    best = 1
    for x in range(n):
        for r in radii:
            inside = np.flatnonzero(rho[x] < r - tol)
            if inside.size <= best:
                continue
            best = max(best, _greedy_count(rho, inside, r / 2, tol))
    return best


def _greedy_count(rho, members, sep, tol):
    blocked = np.zeros(members.size, dtype=bool)
    count = 0
    start = 0
    while True:
        free = np.flatnonzero(~blocked[start:])
        if free.size == 0:
            return count
        i = start + free[0]
        count += 1
        blocked |= rho[members[i], members] < sep - tol
        start = i + 1


def packing_number(cloud, center, r, alpha):
    """Greedy count of points of B(center, r) that are pairwise >= 2*alpha*r apart.

    Points are scanned in ascending id; the alpha*r balls around the chosen
    points are disjoint, so the count is compared with N alpha^-n.
    """
    if not r > 0:
        raise ValidationError("packing radius must be positive")
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    inside = np.flatnonzero(cloud.dist[center] < r - cloud.tol)
    return _greedy_count(cloud.dist, inside, 2 * alpha * r, cloud.tol)


# snowflake reduction -----------------------------------------------------


@dataclass
class SnowflakeResult:
    dist: np.ndarray
    beta: float
    lower_slack: float  # min rho / (2^-beta d^beta), >= 1 when the bound holds
    upper_slack: float  # min 4^beta d^beta / rho, >= 1 when the bound holds


def macias_segovia_metric(cloud, A0=None):
    """Metric d with 2^-b d^b <= rho <= 4^b d^b where 2^b = 3 A0^2.

    d(x, y) is the infimum over chains of sum rho(p_i, p_i+1)^(1/b), which on a
    finite set is the all-pairs shortest path on edge weights rho^(1/b).
    """
    if A0 is None:
        A0 = validate_quasimetric(cloud, eps_grid=(1.0,)).A0
    beta = math.log2(3.0 * A0 * A0)
    if cloud.n == 1:
        return SnowflakeResult(np.zeros((1, 1)), beta, math.inf, math.inf)
    w = cloud.dist ** (1.0 / beta)
    d = shortest_path(w, method="FW", directed=False)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    off = ~np.eye(cloud.n, dtype=bool)
    db = d[off] ** beta
    rho = cloud.dist[off]
    lower = float(np.min(rho / (2.0 ** -beta * db)))
    upper = float(np.min((4.0 ** beta) * db / rho))
    slack_tol = 1e-9
    if lower < 1 - slack_tol or upper < 1 - slack_tol:
        raise InternalError(f"snowflake sandwich violated: slacks {lower}, {upper}")
    return SnowflakeResult(d, beta, lower, upper)


def working_metric(cloud, A0=None):
    """Honest metric used to build dyadic cubes.

    Returns the cloud itself when its triangle constant is 1, otherwise a
    new explicit cloud carrying the Macias-Segovia metric.
    """
    if A0 is None and cloud.metric in ("euclidean", "sup"):
        return cloud
    if A0 is None:
        A0 = validate_quasimetric(cloud, eps_grid=(1.0,)).A0
    if A0 <= 1.0 + 1e-12:
        return cloud
    res = macias_segovia_metric(cloud, A0)
    return PointCloud(res.dist, metric="explicit")


# corpus generators -------------------------------------------------------


def grid1d(n, length=1.0):
    return PointCloud.from_coords((np.arange(n) * (length / n))[:, None], "euclidean")


def grid2d_sup(m):
    g = np.arange(m) / m
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return PointCloud.from_coords(np.column_stack([xx.ravel(), yy.ravel()]), "sup")


def cantor_points(depth=3, ratio=1e-3, branching=4):
    """Nested clusters: ``branching`` children per level, each level ``ratio`` times finer."""
    pts = np.zeros(1)
    offs = np.arange(branching) / branching
    for j in range(depth):
        pts = (pts[:, None] + offs[None, :] * ratio ** j).ravel()
    return np.sort(pts)


def cantor_cloud(depth=3, ratio=1e-3, branching=4):
    return PointCloud.from_coords(cantor_points(depth, ratio, branching)[:, None], "euclidean")


def snowflake_grid(n, beta=0.5):
    return PointCloud.snowflake((np.arange(n) / n)[:, None], beta)
