"""Command line runner: corpus generation, Monte Carlo batches, Tb checks, reports, replay.

Every command writes its outputs plus ``manifest.json`` into the output
directory (``--out-dir``, else $QUASIDYADIC_OUT, else the current
directory). ``replay`` re-runs a manifest and compares output hashes.
Exit codes: 0 ok, 1 validation, 2 infeasible, 3 internal.
"""

import argparse
import csv
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
import time
import warnings

import numpy as np

from . import __version__, ball_cover, dyadic, space, tb
from . import random_dyadic as rd
from .errors import InfeasibleError, InternalError, ValidationError
from .measure import DiscreteMeasure, Dominator, fit_power_dominator, verify_upper_doubling

OUT_ENV = "QUASIDYADIC_OUT"
SIG = 12
CSV_FIELDS = ["kind", "source", "x", "param", "hits", "trials", "freq", "ci_lo", "ci_hi"]


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), f".{SIG}g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([fmt(r[h]) for h in header])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# corpus ----------------------------------------------------------------------

PRESETS = ("grid1d", "grid2d_sup", "cantor1000", "snowflake_half", "bergman")


def preset_cloud(name):
    if name == "grid1d":
        return space.grid1d(1000)
    if name == "grid2d_sup":
        return space.grid2d_sup(16)
    if name == "cantor1000":
        return space.cantor_cloud(depth=3, ratio=1e-3, branching=4)
    if name == "snowflake_half":
        return space.snowflake_grid(200, 0.5)
    if name == "bergman":
        return space.PointCloud.bergman(tb.bergman_points(1, 300, 0))
    raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def preset_instance(name):
    """Cloud, measure and a verified dominator (plus a kernel where one is natural)."""
    if name == "bergman":
        inst = tb.bergman_preset(n=1, m=1.0, sample_count=300, seed=0)
        inst.name = name
        return inst
    cloud = preset_cloud(name)
    mu = DiscreteMeasure.uniform(cloud.n)
    if name == "grid1d":
        lam = Dominator("power", C=3.0, d=1.0)
        kernel = tb.cauchy_kernel(cloud)
    else:
        d = {"grid2d_sup": 2.0, "cantor1000": 1.0, "snowflake_half": 2.0}[name]
        lam = fit_power_dominator(mu, cloud, d)
        kernel = None
    verify_upper_doubling(mu, lam, cloud)
    one = np.ones(cloud.n, dtype=complex)
    return tb.TbInstance(cloud, mu, lam, kernel, one, one.copy(), name, {"preset": name})


# argument parsing --------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _floats(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {s!r}")


def _ints(s):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {s!r}")


def build_parser():
    p = Parser(prog="quasidyadic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", parser_class=Parser)

    def out(sp):
        sp.add_argument("--out-dir", default=None)

    sp = sub.add_parser("space")
    ssub = sp.add_subparsers(dest="action", parser_class=Parser)
    g = ssub.add_parser("gen")
    g.add_argument("--type", required=True, choices=["grid1d", "grid2d_sup", "cantor", "snowflake", "bergman"])
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--beta", type=float, default=0.5)
    g.add_argument("--depth", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    out(g)

    dp = sub.add_parser("dyadic")
    dsub = dp.add_subparsers(dest="action", parser_class=Parser)
    b = dsub.add_parser("build")
    b.add_argument("--cloud", required=True)
    b.add_argument("--delta", type=float, default=dyadic.REGIME_DELTA)
    b.add_argument("--random", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    out(b)

    mp = sub.add_parser("mc")
    msub = mp.add_subparsers(dest="action", parser_class=Parser)
    m = msub.add_parser("boundary")
    m.add_argument("--cloud", required=True)
    m.add_argument("--delta", type=float, default=dyadic.REGIME_DELTA)
    m.add_argument("--x", type=int, default=0)
    m.add_argument("--k", type=int, default=None)
    m.add_argument("--eps", type=_floats, required=True)
    m.add_argument("--trials", type=int, default=rd.MIN_TRIALS_MC)
    m.add_argument("--seed", type=int, default=0)
    out(m)
    m = msub.add_parser("badness")
    m.add_argument("--cloud", required=True)
    m.add_argument("--delta", type=float, default=0.25)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--a", type=int, required=True)
    m.add_argument("--r", type=_ints, required=True)
    m.add_argument("--gamma", type=float, default=0.25)
    m.add_argument("--trials", type=int, default=rd.MIN_TRIALS_MC)
    m.add_argument("--min-trials", type=int, default=rd.MIN_TRIALS_MC)
    m.add_argument("--seed", type=int, default=0)
    out(m)
    m = msub.add_parser("cover")
    m.add_argument("--cloud", required=True)
    m.add_argument("--theta", type=float, required=True)
    m.add_argument("--upsilon", type=float, required=True)
    m.add_argument("--trials", type=int, default=ball_cover.MIN_TRIALS)
    m.add_argument("--pilot-trials", type=int, default=ball_cover.MIN_TRIALS)
    m.add_argument("--seed", type=int, default=0)
    out(m)

    tp = sub.add_parser("tb")
    tsub = tp.add_subparsers(dest="action", parser_class=Parser)
    t = tsub.add_parser("check")
    t.add_argument("--instance", required=True)
    t.add_argument("--seeds", type=_ints, default=[0])
    t.add_argument("--r", type=int, default=None)
    t.add_argument("--kappa", type=float, default=2.0)
    t.add_argument("--lambda", dest="Lam", type=float, default=2.0)
    t.add_argument("--eps", type=float, default=0.1)
    t.add_argument("--upsilon", type=float, default=0.25)
    t.add_argument("--delta", type=float, default=0.25)
    out(t)

    c = sub.add_parser("corpus")
    c.add_argument("--preset", required=True, choices=list(PRESETS) + ["all"])
    out(c)

    r = sub.add_parser("report")
    r.add_argument("--inputs", nargs="*", default=[])
    out(r)

    rp = sub.add_parser("replay")
    rp.add_argument("manifest")
    rp.add_argument("--out-dir", default=None)
    return p


# commands ----------------------------------------------------------------------


def cmd_space_gen(a, out):
    if a.type == "grid1d":
        cloud = space.grid1d(a.n)
    elif a.type == "grid2d_sup":
        cloud = space.grid2d_sup(a.n)
    elif a.type == "cantor":
        cloud = space.cantor_cloud(depth=a.depth)
    elif a.type == "snowflake":
        cloud = space.snowflake_grid(a.n, a.beta)
    else:
        cloud = space.PointCloud.bergman(tb.bergman_points(1, a.n, a.seed))
    path = os.path.join(out, "cloud.json")
    write_json(path, cloud.to_dict())
    return [path]


def cmd_dyadic_build(a, out):
    cloud = space.working_metric(space.PointCloud.from_json(a.cloud))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if a.random:
            S = rd.sample_random_system(cloud, a.delta, seed=a.seed)
        else:
            S = dyadic.build_system(cloud, a.delta)
    rep = dyadic.verify_system(S, raise_on_failure=False)
    p1, p2 = os.path.join(out, "system.json"), os.path.join(out, "verify.json")
    write_json(p1, S.to_dict())
    write_json(p2, rep.to_dict())
    if not rep.ok:
        raise InternalError(f"system fails verification: {rep.witness}", witness=rep.witness)
    return [p1, p2]


def _rows(kind, xs, param, hits, trials, src=""):
    out = []
    for x, h in zip(xs, hits):
        lo, hi = rd.wilson_ci(h, trials)
        out.append({"kind": kind, "source": src, "x": x, "param": param, "hits": int(h), "trials": int(trials),
                    "freq": h / trials, "ci_lo": lo, "ci_hi": hi})
    return out


def cmd_mc_boundary(a, out):
    cloud = space.working_metric(space.PointCloud.from_json(a.cloud))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fac = rd.RandomDyadicFactory(cloud, a.delta)
    k = fac.k_min + 1 if a.k is None else a.k
    est = rd.boundary_probability(cloud, a.delta, a.x, k, a.eps, a.trials, a.seed, fac)
    path = os.path.join(out, "boundary.csv")
    write_csv(path, CSV_FIELDS, _rows("boundary", est.eps, k, est.hits, est.trials))
    return [path]


def cmd_mc_badness(a, out):
    cloud = space.working_metric(space.PointCloud.from_json(a.cloud))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        D = dyadic.build_system(cloud, a.delta)
        fac = rd.RandomDyadicFactory(cloud, a.delta)
    if not (D.k_min <= a.k <= D.k_max and 0 <= a.a < D.n_cubes(a.k)):
        raise ValidationError(f"cube ({a.k}, {a.a}) does not exist")
    est = rd.badness_probability(cloud, a.delta, D, a.k, a.a, a.r, a.gamma, a.trials, a.seed, fac, a.min_trials)
    path = os.path.join(out, "badness.csv")
    write_csv(path, CSV_FIELDS, _rows("badness", est.r, a.gamma, est.hits, est.trials))
    return [path]


def cmd_mc_cover(a, out):
    cloud = space.PointCloud.from_json(a.cloud)
    params = ball_cover.derive_cover_params(cloud, a.theta, a.upsilon, a.pilot_trials, seed=a.seed)
    est = ball_cover.coverage_probability(cloud, params, a.trials, a.seed + 1)
    if not est.families_ok:
        raise InternalError("a sampled family failed disjointness or separation")
    path = os.path.join(out, "cover.csv")
    write_csv(path, CSV_FIELDS, _rows("cover", list(range(cloud.n)), a.upsilon, est.hits, est.trials))
    p2 = os.path.join(out, "cover_params.json")
    write_json(p2, params.to_dict())
    return [path, p2]


TB_FIELDS = ["seed", "T_norm", "bmo_tb1", "bmo_tb2", "wbp", "ratio", "abs_separated", "abs_nested",
             "abs_adjacent", "abs_expectation", "abs_bad", "sum_error"]


def cmd_tb_check(a, out):
    inst = tb.TbInstance.load(a.instance)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = tb.tb_check(inst, seeds=a.seeds, kappa=a.kappa, Lam=a.Lam, delta=a.delta, r=a.r)
    p1, p2 = os.path.join(out, "tb_report.json"), os.path.join(out, "tb_summary.csv")
    d = rep.to_dict()
    d["eps"], d["upsilon"] = a.eps, a.upsilon
    write_json(p1, d)
    write_csv(p2, TB_FIELDS, rep.rows())
    return [p1, p2]


def cmd_corpus(a, out):
    names = PRESETS if a.preset == "all" else [a.preset]
    paths = []
    for name in names:
        inst = preset_instance(name)
        path = os.path.join(out, f"{name}.json")
        inst.save(path)
        paths.append(path)
    return paths


def read_rows(path):
    with open(path, newline="") as fh:
        rd_ = csv.reader(fh)
        header = next(rd_, None)
        if header != CSV_FIELDS:
            raise ValidationError(f"{path}: header {header} does not match {CSV_FIELDS}")
        return [dict(zip(header, r)) for r in rd_]


def summarize(rows):
    """One summary row per (source, kind) with frequency range and fitted slope."""
    groups = {}
    for r in rows:
        groups.setdefault((r["source"], r["kind"]), []).append(r)
    out = []
    for (src, kind), rs in sorted(groups.items()):
        x = np.array([float(r["x"]) for r in rs])
        hits = np.array([float(r["hits"]) for r in rs])
        trials = float(rs[0]["trials"])
        freq = np.array([float(r["freq"]) for r in rs])
        slope = float("nan")
        if kind == "boundary" and x.size > 1:
            slope = rd.loglog_slope(x, hits, trials)
        elif kind == "badness" and x.size > 1:
            y = np.log((hits + 0.5) / (trials + 1))
            xc = x - x.mean()
            slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
        out.append({"source": src, "kind": kind, "rows": len(rs), "freq_min": float(freq.min()),
                    "freq_max": float(freq.max()), "slope": slope})
    return out


SUMMARY_FIELDS = ["source", "kind", "rows", "freq_min", "freq_max", "slope"]
FIGURES = {"boundary": ("eps_decay", "eps", "boundary frequency", True),
           "badness": ("r_decay", "r", "badness frequency", False),
           "cover": ("coverage", "point", "coverage frequency", False)}


def cmd_report(a, out):
    rows = []
    for path in a.inputs:
        src = os.path.basename(path)
        for r in read_rows(path):
            r["source"] = r["source"] or src
            rows.append(r)
    paths = []
    merged = os.path.join(out, "merged.csv")
    with open(merged, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_FIELDS)
        for r in rows:
            wr.writerow([r[h] for h in CSV_FIELDS])
    paths.append(merged)
    summary = os.path.join(out, "summary.csv")
    write_csv(summary, SUMMARY_FIELDS, summarize(rows))
    paths.append(summary)
    for kind, (fig, xlab, ylab, logx) in FIGURES.items():
        sel = [r for r in rows if r["kind"] == kind]
        if not sel:
            continue
        series = os.path.join(out, f"series_{fig}.csv")
        write_csv(series, ["source", "x", "y", "ci_lo", "ci_hi"],
                  [{"source": r["source"], "x": float(r["x"]), "y": float(r["freq"]),
                    "ci_lo": float(r["ci_lo"]), "ci_hi": float(r["ci_hi"])} for r in sel])
        paths.append(series)
        png = os.path.join(out, f"{fig}.png")
        render_series(sel, xlab, ylab, logx, png)
        paths.append(png)
    return paths


def render_series(rows, xlab, ylab, logx, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for src in sorted({r["source"] for r in rows}):
        rs = [r for r in rows if r["source"] == src]
        x = np.array([float(r["x"]) for r in rs])
        y = np.array([float(r["freq"]) for r in rs])
        lo = np.array([float(r["ci_lo"]) for r in rs])
        hi = np.array([float(r["ci_hi"]) for r in rs])
        o = np.argsort(x)
        ax.errorbar(x[o], y[o], yerr=[np.maximum(y - lo, 0)[o], np.maximum(hi - y, 0)[o]], marker="o", ms=3,
                    lw=1, capsize=2, label=src)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlab)
    ax.set_ylabel(ylab)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {
    ("space", "gen"): cmd_space_gen,
    ("dyadic", "build"): cmd_dyadic_build,
    ("mc", "boundary"): cmd_mc_boundary,
    ("mc", "badness"): cmd_mc_badness,
    ("mc", "cover"): cmd_mc_cover,
    ("tb", "check"): cmd_tb_check,
    ("corpus", None): cmd_corpus,
    ("report", None): cmd_report,
}
INPUT_FLAGS = ("cloud", "instance", "inputs")


def _out_dir(a):
    d = a.out_dir or os.environ.get(OUT_ENV) or "."
    os.makedirs(d, exist_ok=True)
    return d


def _strip_out_dir(argv):
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        out.append(tok)
    return out


def run(argv):
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.cmd is None:
        parser.print_usage(sys.stderr)
        return 1
    if a.cmd == "replay":
        return replay(a.manifest, a.out_dir)
    key = (a.cmd, getattr(a, "action", None))
    if key not in COMMANDS:
        parser.print_usage(sys.stderr)
        return 1
    out = _out_dir(a)
    t0 = time.perf_counter()
    inputs = {}
    for flag in INPUT_FLAGS:
        v = getattr(a, flag, None)
        for path in ([v] if isinstance(v, str) else (v or [])):
            if not os.path.exists(path):
                raise ValidationError(f"input file {path} not found")
            inputs[os.path.abspath(path)] = sha256(path)
    files = COMMANDS[key](a, out)
    params = {k: v for k, v in vars(a).items() if k not in ("out_dir",)}
    manifest = {
        "command": " ".join(x for x in key if x),
        "argv": [os.path.abspath(t) if os.path.abspath(t) in inputs else t for t in _strip_out_dir(argv)],
        "params": params,
        "seed": getattr(a, "seed", getattr(a, "seeds", None)),
        "version": __version__,
        "inputs": inputs,
        "outputs": {os.path.basename(f): sha256(f) for f in files},
        "wall_time": time.perf_counter() - t0,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    return 0


def replay(manifest_path, out_dir=None):
    with open(manifest_path) as fh:
        man = json.load(fh)
    for path, h in man.get("inputs", {}).items():
        if not os.path.exists(path) or sha256(path) != h:
            raise ValidationError(f"input {path} is missing or changed since the manifest was written")
    tmp = out_dir or tempfile.mkdtemp(prefix="quasidyadic-replay-")
    try:
        code = run(list(man["argv"]) + ["--out-dir", tmp])
        if code:
            return code
        bad = [name for name, h in man["outputs"].items()
               if not os.path.exists(os.path.join(tmp, name)) or sha256(os.path.join(tmp, name)) != h]
        if bad:
            raise InternalError(f"replay differs in {', '.join(sorted(bad))}")
        print(f"replay identical: {len(man['outputs'])} files")
        return 0
    finally:
        if out_dir is None:
            shutil.rmtree(tmp, ignore_errors=True)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except SystemExit as e:
        return int(e.code or 0) if not isinstance(e.code, str) else 1
    except (ValidationError, InfeasibleError, InternalError) as e:
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
