"""Pilot runs that freeze the constants used by the test suite.

Run once with ``python3 tests/calibrate.py``; writes tests/frozen_constants.json.
Pilot seeds are disjoint from the seeds the tests use.
"""

import json
import os
import sys
import warnings

import numpy as np

from quasidyadic import cz_matrices as cz
from quasidyadic import dyadic, space, tb
from quasidyadic import random_dyadic as rd
from quasidyadic.cli import PRESETS, preset_instance
from quasidyadic.measure import DiscreteMeasure

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "frozen_constants.json")
MARGIN = 1.25
PILOT_SEED = 900_000

BOUNDARY = {"n": 1000, "delta": 1e-3, "x": 500, "divisors": [5000, 2000, 1000, 500]}
BADNESS = {"n": 512, "cloud_seed": 1, "delta": 0.25, "k": 6, "a": 126, "r": [1, 2, 3, 4, 5], "gamma": 0.25}


def badness_cloud():
    x = np.sort(np.random.default_rng(BADNESS["cloud_seed"]).random(BADNESS["n"]))
    return space.PointCloud.from_coords(x[:, None])


def preset_alpha(inst):
    return inst.kernel.alpha if inst.kernel is not None else 1.0


def schur_sup(inst, D, Dp):
    alpha = preset_alpha(inst)
    sep = cz.assemble_separated(D, Dp, inst.mu, inst.lam, alpha)
    worst = 0.0
    for m in range(D.k_max - D.k_min + 1):
        for k in range(Dp.k_min, Dp.k_max + 1):
            worst = max(worst, cz.schur_sums(D, Dp, inst.mu, inst.lam, alpha, m, k, sep).ratio)
    return worst


def pilot_eta():
    c = space.grid1d(BOUNDARY["n"])
    d = BOUNDARY["delta"]
    f = rd.RandomDyadicFactory(c, d)
    eps = [d / q for q in BOUNDARY["divisors"]]
    est = rd.boundary_probability(c, d, BOUNDARY["x"], f.k_min + 1, eps, 100_000, PILOT_SEED, f)
    return {"eta_floor": est.slope, "hits": est.hits, "trials": est.trials, "k": f.k_min + 1}


def pilot_schur(seeds=range(PILOT_SEED, PILOT_SEED + 50)):
    out = {}
    for name in PRESETS:
        inst = preset_instance(name)
        f = rd.RandomDyadicFactory(space.working_metric(inst.cloud), 0.25)
        sup = max(schur_sup(inst, f.sample(rd.trial_seed(s, 0)), f.sample(rd.trial_seed(s, 1))) for s in seeds)
        out[name] = {"pilot_sup": sup, "constant": sup * MARGIN}
    return out


def pilot_badness(trials=20_000):
    c = badness_cloud()
    b = BADNESS
    D = dyadic.build_system(c, b["delta"])
    est = rd.badness_probability(c, b["delta"], D, b["k"], b["a"], b["r"], b["gamma"], trials, PILOT_SEED)
    p = np.array(est.freq)
    steps = [p[i + 1] / p[i] for i in range(len(p) - 1) if p[i] > 0]
    return {"freq": est.freq, "trials": trials, "rho_max": max(steps) * MARGIN if steps else 1.0}


def pilot_promotion(trials=100_000):
    c = space.grid1d(BOUNDARY["n"])
    est = rd.promotion_probability(c, BOUNDARY["delta"], 0, 500, trials, PILOT_SEED)
    return {"k": 0, "child": 500, "freq": est.freq, "lower": est.ci_lo, "trials": trials}


def pilot_separated(seeds=range(PILOT_SEED, PILOT_SEED + 5), max_pairs=300):
    inst = tb.cauchy_preset(250)
    w = inst.mu.weights
    f = rd.RandomDyadicFactory(inst.cloud, 0.25)
    gam = cz.gamma(inst.alpha, inst.lam.C_lambda)
    worst = 0.0
    for s in seeds:
        D, Dp = f.sample(rd.trial_seed(s, 0)), f.sample(rd.trial_seed(s, 1))
        for q, r, lq, lr in separated_pairs(D, Dp, 2.0, gam, max_pairs):
            big = lq + lr + float(D.dist[np.ix_(q, r)].min())
            entry = lq ** 0.5 * lr ** 0.5 / (big * float(inst.lam.sup_over(q, big)))
            ext = cz.pairing_extremal(inst.kernel.values, inst.mu, q, r)
            worst = max(worst, ext / (entry * np.sqrt(w[q].sum() * w[r].sum())))
    return {"pilot_sup": worst, "constant": worst * MARGIN}


def separated_pairs(D, Dp, C, gam, max_pairs):
    """(q, r, l(Q), l(R)) for pairs meeting the separation hypotheses, with |q| > 1."""
    out = []
    for k in D.levels:
        for a in range(D.n_cubes(k)):
            q = D.members(k, a)
            if q.size < 2:
                continue
            for j in Dp.levels:
                if j > k:
                    continue
                for b in range(Dp.n_cubes(j)):
                    r = Dp.members(j, b)
                    ok, _ = cz.separated_hypotheses(D.dist, q, r, D.side(k), Dp.side(j), C, gam)
                    if ok:
                        out.append((q, r, D.side(k), Dp.side(j)))
                        if len(out) >= max_pairs:
                            return out
    return out


def main():
    warnings.simplefilter("ignore")
    frozen = {}
    for key, fn in [("boundary", pilot_eta), ("schur", pilot_schur), ("badness", pilot_badness),
                    ("promotion", pilot_promotion), ("separated_pairing", pilot_separated)]:
        print(f"pilot {key} ...", file=sys.stderr, flush=True)
        frozen[key] = fn()
    frozen["config"] = {"boundary": BOUNDARY, "badness": BADNESS, "margin": MARGIN, "pilot_seed": PILOT_SEED}
    with open(OUT, "w") as fh:
        json.dump(frozen, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(frozen, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
