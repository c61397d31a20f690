"""Expectations, martingale differences (plain and b-adapted), Carleson embedding.

For a generation k the operator E_k replaces f on each cube by its mu-average;
the adapted E^b_k f = <f>_Q / <b>_Q * b on Q. Differences Delta_k = E_{k+1} - E_k
(or their adapted analogues) are supported cube by cube, so per-cube norms are
bincounts of per-point values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, ValidationError

AVG_FLOOR = 1e-14


def cube_sums(values, mem, ncubes):
    v = np.asarray(values)
    if np.iscomplexobj(v):
        return np.bincount(mem, v.real, ncubes) + 1j * np.bincount(mem, v.imag, ncubes)
    return np.bincount(mem, v, ncubes)


def cube_masses(system, w, k):
    return np.bincount(system.mem(k), w, system.n_cubes(k) if k >= system.k_min else 1)


def _ncubes(system, k):
    return system.n_cubes(k) if k >= system.k_min else 1


def averages(f, system, w, k):
    """Per-cube mu-averages of f at generation k."""
    mem = system.mem(k)
    nc = _ncubes(system, k)
    return cube_sums(f * w, mem, nc) / np.bincount(mem, w, nc)


def expectation(f, system, w, k, b=None):
    """E_k f (plain) or E^b_k f (adapted) as a point function."""
    mem = system.mem(k)
    af = averages(f, system, w, k)
    if b is None:
        return af[mem]
    ab = averages(b, system, w, k)
    _check_avg(ab, b, k)
    return (af / ab)[mem] * b


def _check_avg(ab, b, k):
    small = np.abs(ab) <= AVG_FLOOR * max(1.0, float(np.max(np.abs(b))))
    if np.any(small):
        a = int(np.argmax(small))
        raise ValidationError(f"<b> vanishes on cube ({k}, {a}): accretivity fails", witness=(k, a))


@dataclass
class MartingaleDecomposition:
    m: int
    levels: list  # generations k with a difference term Delta_k = E_{k+1} - E_k
    diffs: dict  # k -> point array of sum over generation-k cubes of Delta_Q f
    top: np.ndarray  # sum over generation-m cubes of E_Q f
    coeffs: dict  # k -> per generation-(k+1) cube coefficient A_Q'
    top_coeffs: np.ndarray
    adapted: bool

    def reconstruct(self):
        out = self.top.copy()
        for k in self.levels:
            out = out + self.diffs[k]
        return out


def decompose(f, system, mu, m, b=None):
    """Coefficients of f = sum_{k>=m} Delta_k f + E_m f, computed top-down."""
    w = mu.weights
    f = np.asarray(f)
    dtype = complex if (np.iscomplexobj(f) or (b is not None and np.iscomplexobj(b))) else float
    f = f.astype(dtype)
    levels = list(range(m, system.k_max))
    prev = averages(f, system, w, m)
    if b is not None:
        ab = averages(b, system, w, m)
        _check_avg(ab, b, m)
        prev = prev / ab
    top_coeffs = prev
    mem_m = system.mem(m)
    top = prev[mem_m] * (b if b is not None else 1.0)
    diffs, coeffs = {}, {}
    for k in levels:
        cur = averages(f, system, w, k + 1)
        if b is not None:
            abk = averages(b, system, w, k + 1)
            _check_avg(abk, b, k + 1)
            cur = cur / abk
        if k + 1 > system.k_min:
            par = system.parent_array(k + 1)
        else:
            par = np.zeros(_ncubes(system, k + 1), dtype=np.int64)
        coeffs[k] = cur - prev[par]
        d = coeffs[k][system.mem(k + 1)]
        diffs[k] = d * b if b is not None else d
        prev = cur
    return MartingaleDecomposition(m, levels, diffs, top, coeffs, top_coeffs, b is not None)


def l2_norm_sq(f, w):
    return float(np.sum(np.abs(f) ** 2 * w))


def per_cube_norms(values, system, w, k):
    """||chi_Q values||^2 for each generation-k cube."""
    return np.bincount(system.mem(k), np.abs(values) ** 2 * w, _ncubes(system, k))


def pythagoras_check(f, system, mu, m):
    w = mu.weights
    dec = decompose(f, system, mu, m)
    lhs = l2_norm_sq(f, w)
    rhs = l2_norm_sq(dec.top, w) + sum(l2_norm_sq(dec.diffs[k], w) for k in dec.levels)
    ratio = rhs / lhs if lhs > 0 else 1.0
    return lhs, rhs, ratio


def orthogonality_defect(f, system, mu, m):
    """max |<Delta_Q f, Delta_R f>| over distinct cubes Q, R (and the top terms)."""
    w = mu.weights
    dec = decompose(f, system, mu, m)
    pieces = [(m, a, np.where(system.mem(m) == a, dec.top, 0)) for a in range(_ncubes(system, m))]
    for k in dec.levels:
        mem = system.mem(k)
        for a in range(_ncubes(system, k)):
            pieces.append((k, a, np.where(mem == a, dec.diffs[k], 0)))
    V = np.array([p[2] for p in pieces])
    G = (V * w) @ V.conj().T
    np.fill_diagonal(G, 0)
    return float(np.abs(G).max()) if G.size else 0.0


def adapted_quadratic_form(b, system, mu, m):
    """Hermitian G with f* G f = sum ||Delta^b_Q f||^2 + sum ||E^b_Q f||^2 (dense)."""
    w = mu.weights
    n = system.n
    b = np.asarray(b, dtype=complex)

    def ops(k):
        mem = system.mem(k)
        nc = _ncubes(system, k)
        mass = np.bincount(mem, w, nc)
        ab = averages(b, system, w, k)
        _check_avg(ab, b, k)
        same = mem[:, None] == mem[None, :]
        return b[:, None] * same * (w[None, :] / (mass * ab)[mem][:, None])

    W = np.diag(w)
    Ek = ops(m)
    G = Ek.conj().T @ W @ Ek
    for k in range(m, system.k_max):
        En = ops(k + 1)
        D = En - Ek
        G += D.conj().T @ W @ D
        Ek = En
    return 0.5 * (G + G.conj().T)


def adapted_bracket(b, system, mu, m):
    """Extremal values of the adapted square sum over ||f||^2 (generalized eigenvalues)."""
    w = mu.weights
    G = adapted_quadratic_form(b, system, mu, m)
    s = 1 / np.sqrt(w)
    ev = np.linalg.eigvalsh(s[:, None] * G * s[None, :])
    return float(ev[0]), float(ev[-1])


def adapted_comparability(f, b, system, mu, m, bracket=False):
    """(sum ||Delta^b_Q f||^2 + sum ||E^b_Q f||^2) / ||f||^2, optionally with the exact bracket."""
    w = mu.weights
    dec = decompose(f, system, mu, m, b=b)
    num = l2_norm_sq(dec.top, w) + sum(l2_norm_sq(dec.diffs[k], w) for k in dec.levels)
    den = l2_norm_sq(f, w)
    ratio = num / den if den > 0 else 1.0
    if bracket:
        return ratio, adapted_bracket(b, system, mu, m)
    return ratio


def square_function(h, system, mu, m, b=None):
    """S h = sum_Q ||Delta_Q h||^2 / mu(Q) chi_Q + sum over generation-m cubes of ||E_Q h||^2 / mu(Q) chi_Q."""
    w = mu.weights
    dec = decompose(h, system, mu, m, b=b)
    mem = system.mem(m)
    mass = np.bincount(mem, w, _ncubes(system, m))
    S = (per_cube_norms(dec.top, system, w, m) / mass)[mem]
    for k in dec.levels:
        # Delta_Q lives on generation-k cubes Q
        memk = system.mem(k)
        massk = np.bincount(memk, w, _ncubes(system, k))
        S = S + (per_cube_norms(dec.diffs[k], system, w, k) / massk)[memk]
    return S


def square_sum(h, system, mu, m, b=None):
    w = mu.weights
    dec = decompose(h, system, mu, m, b=b)
    return l2_norm_sq(dec.top, w) + sum(l2_norm_sq(dec.diffs[k], w) for k in dec.levels)


# maximal function and Carleson embedding ------------------------------------


def dyadic_maximal(f, system, mu):
    """sup over cubes Q containing x of <|f|>_Q."""
    w = mu.weights
    af = np.abs(np.asarray(f))
    out = np.zeros(system.n)
    for k in system.levels:
        out = np.maximum(out, averages(af, system, w, k)[system.mem(k)])
    return out


def subtree_sums(a, system, mu):
    """For each cube, sum of a_R mu(R) over R contained in it (itself included)."""
    w = mu.weights
    S = {}
    for k in range(system.k_max, system.k_min - 1, -1):
        mass = np.bincount(system.mem(k), w, system.n_cubes(k))
        s = np.asarray(a[k], dtype=float) * mass
        if k < system.k_max:
            s = s + np.bincount(system.parent_array(k + 1), S[k + 1], system.n_cubes(k))
        S[k] = s
    return S


@dataclass
class CarlesonReport:
    lhs: float
    norm_sq: float
    ratio: float
    worst_packing: float  # max subtree sum / mu(Q)


def check_packing(a, system, mu, tol=1e-12):
    w = mu.weights
    S = subtree_sums(a, system, mu)
    worst, wit = 0.0, None
    for k in system.levels:
        if np.any(np.asarray(a[k]) < 0):
            raise ValidationError(f"negative Carleson weight at generation {k}", witness=(k, int(np.argmin(a[k]))))
        mass = np.bincount(system.mem(k), w, system.n_cubes(k))
        r = S[k] / mass
        i = int(np.argmax(r))
        if r[i] > worst:
            worst, wit = float(r[i]), (k, i)
    if worst > 1 + tol:
        raise ValidationError(f"packing condition fails at cube {wit}: ratio {worst:.6g}", witness=wit)
    return worst


def carleson_check(a, f, system, mu, constant=4.0):
    """sum |<f>_Q|^2 a_Q mu(Q) against constant * ||f||^2 for a packing-valid sequence."""
    w = mu.weights
    worst = check_packing(a, system, mu)
    lhs = 0.0
    for k in system.levels:
        mass = np.bincount(system.mem(k), w, system.n_cubes(k))
        lhs += float(np.sum(np.abs(averages(f, system, w, k)) ** 2 * np.asarray(a[k]) * mass))
    nf = l2_norm_sq(f, w)
    ratio = lhs / nf if nf > 0 else 0.0
    if ratio > constant * (1 + 1e-12):
        raise InternalError(f"Carleson embedding ratio {ratio:.6g} exceeds {constant}")
    return CarlesonReport(lhs, nf, ratio, worst)


def random_carleson_sequence(system, mu, rng):
    """Random nonnegative weights scaled down until the packing condition holds."""
    a = {k: rng.random(system.n_cubes(k)) * rng.random() for k in system.levels}
    S = subtree_sums(a, system, mu)
    worst = max(float(np.max(S[k] / np.bincount(system.mem(k), mu.weights, system.n_cubes(k))))
                for k in system.levels)
    if worst > 1:
        a = {k: v / worst for k, v in a.items()}
    return a
