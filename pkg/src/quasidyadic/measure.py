"""Discrete measures and upper doubling dominating functions.

A dominator lambda(x, r) majorizes ball masses, is non-decreasing in r and
satisfies lambda(x, 2r) <= C_lambda * lambda(x, r). Everything here is an
exact finite scan over the point cloud.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

C_LAMBDA_FLOOR = 1.0 + 1e-9


class DiscreteMeasure:
    """Strictly positive point masses."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float).ravel()
        if w.size == 0:
            raise ValidationError("measure needs at least one weight")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            i = int(np.argmax(~(np.isfinite(w) & (w > 0))))
            raise ValidationError(f"weight of point {i} is not strictly positive", witness=(i,))
        self.weights = w
        self.weights.setflags(write=False)

    @classmethod
    def uniform(cls, n, total=1.0):
        return cls(np.full(n, total / n))

    @property
    def n(self):
        return self.weights.size

    @property
    def total(self):
        return float(self.weights.sum())

    def mass(self, mask):
        return float(self.weights[mask].sum())

    def scaled(self, factor):
        return DiscreteMeasure(self.weights * factor)

    def to_dict(self):
        return {"weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["weights"])


def _normalize_c_lambda(c):
    # a constant-in-r dominator has C_lambda = 1, which leaves d = 0; such
    # degenerate dominators get the valid constant 2 instead
    if c <= 1.0:
        return 2.0
    return max(float(c), C_LAMBDA_FLOOR)


class Dominator:
    """Dominating function lambda(x, r).

    kinds
      power      lambda = C r^d, doubling constant 2^d
      bergman    lambda = max(delta(x)^m, r^m), doubling constant 2^m;
                 ``boundary`` holds delta(x) per point
      tabulated  ``radii`` (increasing) and ``values`` (n x len(radii)),
                 extended as a right-continuous step function
    """

    def __init__(self, kind, C=1.0, d=1.0, m=None, boundary=None, radii=None, values=None,
                 C_lambda=None):
        self.kind = kind
        self.C = float(C)
        self.m = None if m is None else float(m)
        self.boundary = None if boundary is None else np.asarray(boundary, dtype=float)
        if kind == "power":
            if not self.C > 0 or d < 0:
                raise ValidationError("power dominator needs C > 0 and d >= 0")
            base = 2.0 ** float(d)
        elif kind == "bergman":
            if self.m is None or not self.m > 0:
                raise ValidationError("bergman dominator needs m > 0")
            base = 2.0 ** self.m
        elif kind == "tabulated":
            self.radii = np.asarray(radii, dtype=float)
            self.values = np.atleast_2d(np.asarray(values, dtype=float))
            if self.radii.ndim != 1 or np.any(np.diff(self.radii) <= 0):
                raise ValidationError("tabulated radii must be strictly increasing")
            if self.values.shape[1] != self.radii.size:
                raise ValidationError("tabulated values need one column per radius")
            base = C_lambda if C_lambda is not None else _table_doubling(self.radii, self.values)
        else:
            raise ValidationError(f"unknown dominator kind {kind!r}")
        if C_lambda is not None and kind != "tabulated":
            base = float(C_lambda)
        self.C_lambda = _normalize_c_lambda(base)
        self.d = math.log2(self.C_lambda)
        self._power_d = float(d)

    def bind(self, cloud):
        """Fill delta(x) = 1 - |x| from a Bergman cloud if it is missing."""
        if self.kind == "bergman" and self.boundary is None:
            if cloud.coords is None:
                raise ValidationError("bergman dominator needs boundary distances or coordinates")
            self.boundary = 1.0 - np.linalg.norm(cloud.coords, axis=1)
        return self

    def __call__(self, x, r):
        """lambda(x, r); ``x`` and ``r`` broadcast against each other."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return self.C * np.power(r, self._power_d) * np.ones_like(np.asarray(x, dtype=float))
        if self.kind == "bergman":
            if self.boundary is None:
                raise ValidationError("bergman dominator is not bound to a cloud")
            b = self.boundary[np.asarray(x)]
            return np.maximum(b, r) ** self.m
        j = np.searchsorted(self.radii, r, side="right") - 1
        j = np.clip(j, 0, self.radii.size - 1)
        return self.values[np.asarray(x), j]

    def sup_over(self, members, r):
        """max over z in ``members`` of lambda(z, r), vectorized in r."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return self.C * np.power(r, self._power_d)
        if self.kind == "bergman":
            b = float(self.boundary[members].max())
            return np.maximum(b, r) ** self.m
        return np.max(self(np.asarray(members)[:, None], r[None, ...]), axis=0)

    def to_dict(self):
        out = {"kind": self.kind, "C": self.C, "d": self._power_d if self.kind == "power" else self.d}
        if self.m is not None:
            out["m"] = self.m
        if self.kind == "tabulated":
            out["radii"] = self.radii.tolist()
            out["values"] = self.values.tolist()
            out["C_lambda"] = self.C_lambda
        if self.boundary is not None:
            out["boundary"] = self.boundary.tolist()
        return out

    @classmethod
    def from_dict(cls, obj):
        kind = obj["kind"]
        if kind == "power":
            return cls("power", C=obj.get("C", 1.0), d=obj.get("d", 1.0))
        if kind == "bergman":
            return cls("bergman", m=obj["m"], boundary=obj.get("boundary"))
        return cls("tabulated", radii=obj["radii"], values=obj["values"], C_lambda=obj.get("C_lambda"))


def _table_doubling(radii, values):
    j2 = np.clip(np.searchsorted(radii, 2 * radii, side="right") - 1, 0, radii.size - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = values[:, j2] / values
    ratio = ratio[np.isfinite(ratio)]
    return float(ratio.max()) if ratio.size else 1.0


# verification ------------------------------------------------------------


@dataclass
class UpperDoublingReport:
    ok: bool
    worst_monotone: float  # max of lambda(x, r) - lambda(x, r') over grid r < r', <= 0 when fine
    worst_doubling: float  # max lambda(x, 2r) / (C_lambda lambda(x, r)), <= 1 when fine
    worst_majorization: float  # max mu(B(x, r)) / lambda(x, r), <= 1 when fine
    witness: tuple  # (property, x, r) of the worst offender

    def to_dict(self):
        return {"ok": self.ok, "worst_monotone": self.worst_monotone,
                "worst_doubling": self.worst_doubling,
                "worst_majorization": self.worst_majorization, "witness": list(self.witness)}


def radius_grid(cloud):
    """All distinct pairwise distances together with their doubles."""
    if cloud.n < 2:
        return np.array([1.0, 2.0])
    d = cloud.dist[np.triu_indices(cloud.n, 1)]
    return np.unique(np.concatenate([d, 2 * d]))


def verify_upper_doubling(mu, lam, cloud, raise_on_failure=True, rtol=1e-9):
    """Check monotonicity, doubling and majorization of ``lam``.

    Monotonicity and doubling are checked on the radius grid (pairwise
    distances and their doubles). Majorization is checked for every real
    radius r >= the minimal gap: on each interval between consecutive
    distances from x the ball mass is constant, so the binding radius is the
    left end, where the open ball of a slightly larger radius is the closed
    ball. This covers the grid and every dyadic multiple of a grid radius.
    """
    if mu.n != cloud.n:
        raise ValidationError("measure and cloud have different sizes")
    lam.bind(cloud)
    n = cloud.n
    grid = radius_grid(cloud)
    worst_mono, w_mono = -math.inf, None
    worst_dbl, w_dbl = 0.0, None
    if lam.kind == "power":
        vals = lam(0, grid)
        diff = vals[:-1] - vals[1:]
        i = int(np.argmax(diff))
        worst_mono, w_mono = float(diff[i]), ("monotone", 0, float(grid[i]))
        ratio = lam(0, 2 * grid) / (lam.C_lambda * vals)
        i = int(np.argmax(ratio))
        worst_dbl, w_dbl = float(ratio[i]), ("doubling", 0, float(grid[i]))
    else:
        # each point is checked on the full grid, chunked to bound memory
        chunk = max(1, int(4e6 // max(grid.size, 1)))
        for s in range(0, n, chunk):
            xs = np.arange(s, min(n, s + chunk))
            vals = lam(xs[:, None], grid[None, :])
            diff = vals[:, :-1] - vals[:, 1:]
            if diff.size:
                i = int(np.argmax(diff))
                if diff.flat[i] > worst_mono:
                    a, b = divmod(i, diff.shape[1])
                    worst_mono, w_mono = float(diff.flat[i]), ("monotone", int(xs[a]), float(grid[b]))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = lam(xs[:, None], 2 * grid[None, :]) / (lam.C_lambda * vals)
            ratio = np.where(np.isfinite(ratio), ratio, math.inf)
            i = int(np.argmax(ratio))
            if ratio.flat[i] > worst_dbl:
                a, b = divmod(i, ratio.shape[1])
                worst_dbl, w_dbl = float(ratio.flat[i]), ("doubling", int(xs[a]), float(grid[b]))
    worst_maj, w_maj = majorization_ratio(mu, lam, cloud)
    ok = worst_mono <= rtol * max(1.0, abs(worst_mono)) and worst_dbl <= 1 + rtol and worst_maj <= 1 + rtol
    cands = [(worst_maj - 1, w_maj), (worst_dbl - 1, w_dbl), (worst_mono, w_mono)]
    witness = max(cands, key=lambda t: -math.inf if t[1] is None else t[0])[1]
    report = UpperDoublingReport(ok, float(worst_mono), float(worst_dbl), float(worst_maj), witness)
    if raise_on_failure and not ok:
        prop, x, r = witness
        raise ValidationError(f"upper doubling fails ({prop}) at x={x}, r={r:.6g}", witness=witness)
    return report


def majorization_ratio(mu, lam, cloud):
    n = cloud.n
    w = mu.weights
    if n == 1:
        val = w[0] / float(lam(0, 1.0))
        return val, ("majorization", 0, 1.0)
    g = cloud.min_gap
    tol = cloud.tol
    worst, wit = 0.0, None
    for x in range(n):
        order = np.argsort(cloud.dist[x], kind="stable")
        dx = cloud.dist[x][order]
        cum = np.cumsum(w[order])
        # last index of each tie group
        last = np.searchsorted(dx, dx + tol, side="right") - 1
        mass = cum[last]
        r = np.maximum(dx, g)
        ratio = mass / lam(x, r)
        i = int(np.argmax(ratio))
        if ratio[i] > worst:
            worst, wit = float(ratio[i]), ("majorization", x, float(r[i]))
    return worst, wit


def ball_mass(mu, cloud, center, r):
    """mu of the open ball {x : rho(x, center) < r}."""
    if r < 0:
        raise ValidationError("radius must be nonnegative")
    return mu.mass(cloud.dist[center] < r - cloud.tol)


def fit_power_dominator(mu, cloud, d):
    """Smallest C (up to 1e-9 relative) making C r^d a valid dominator."""
    probe = Dominator("power", C=1.0, d=d)
    worst, _ = majorization_ratio(mu, probe, cloud)
    return Dominator("power", C=worst * (1 + 1e-9), d=d)


# tail integral -----------------------------------------------------------


def a_eps(eps):
    return 2.0 ** eps / (2.0 ** eps - 1.0)


@dataclass
class TailBoundReport:
    lhs: float
    rhs: float
    ratio: float
    center: int = -1
    radius: float = float("nan")


def tail_integral_bound(mu, lam, cloud, center, r, eps):
    """Exact sum over x outside B(center, r) of rho^-eps / lambda(center, rho) dmu."""
    if not r > 0:
        raise ValidationError("ball radius must be positive")
    lam.bind(cloud)
    rho = cloud.dist[center]
    out = rho >= r - cloud.tol
    out[center] = False
    terms = rho[out] ** (-eps) / lam(center, rho[out]) * mu.weights[out]
    lhs = float(terms.sum())
    rhs = lam.C_lambda * a_eps(eps) * r ** (-eps)
    return TailBoundReport(lhs, rhs, lhs / rhs, center, float(r))


def tail_bound_all_balls(mu, lam, cloud, eps):
    """Worst tail ratio over all balls with center in X and radius > 0.

    For fixed center the left side is constant between consecutive distances
    while the right side decreases, so the sup over all radii is attained at
    radii equal to distances from the center; those are scanned exactly.
    """
    lam.bind(cloud)
    n = cloud.n
    if n == 1:
        return TailBoundReport(0.0, lam.C_lambda * a_eps(eps), 0.0, 0, 1.0)
    tol = cloud.tol
    best = None
    ce = lam.C_lambda * a_eps(eps)
    for c in range(n):
        rho = cloud.dist[c]
        order = np.argsort(rho, kind="stable")[1:]
        dc = rho[order]
        terms = dc ** (-eps) / lam(c, dc) * mu.weights[order]
        suffix = np.concatenate([np.cumsum(terms[::-1])[::-1], [0.0]])
        first = np.searchsorted(dc, dc - tol, side="left")
        lhs = suffix[first]
        ratio = lhs * dc ** eps / ce
        i = int(np.argmax(ratio))
        if best is None or ratio[i] > best.ratio:
            best = TailBoundReport(float(lhs[i]), float(ce * dc[i] ** (-eps)), float(ratio[i]), c, float(dc[i]))
    return best


def load_measure(path):
    with open(path) as fh:
        return DiscreteMeasure.from_dict(json.load(fh))
