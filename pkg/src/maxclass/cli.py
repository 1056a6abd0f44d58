"""Command-line front end: declarative TOML jobs in, JSON reports and
CSV profiles out.

Commands
--------
growth        small growth vector at each base point
class         fiber-sampled class report at each base point
characteristic  integrate the characteristic curve through a sampled
                regular covector; emit time samples
rho-profile   density profile rho(t) along the reduced curve (CSV)
projectivize  projectivizing chart psi samples plus the post-check
              (recomputed rho in the new parameter)
verify-model  realize and verify the model symmetry frame for --n N
report        all job-applicable sections in one JSON document

Every command writes `<command>.json` into the output directory
(`rho_profile.json` for `rho-profile`, and so on); curve commands also
write a CSV.  Reports are deterministic: same job file and seed give
byte-identical files.  Exit status: 0 success, 1 input error, 2 a
numerical decision failed at the requested tolerance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python 3.10
    import tomli

from .distributions import Distribution2, from_ode, growth_vector
from .errors import (
    EvaluationDomainError,
    InputError,
    MaxclassError,
    NumericalInstabilityError,
)
from .expr import Chart, ChartPoint, parse
from .fields import VecField, flow
from .frames import model_frame
from .linalg import collect_records
from .projective import jacobi_curve, projectivize, rho
from .symplectic import (
    characteristic_field,
    class_at,
    sample_regular_covector,
)

SCHEMA_VERSION = "1"

_CURVE_COMMANDS = ("characteristic", "rho-profile", "projectivize")
_JOB_COMMANDS = ("growth", "class") + _CURVE_COMMANDS + ("report",)


# ---------------------------------------------------------------------------
# job files


class Job:
    """A parsed and validated job file."""

    __slots__ = ("distribution", "source", "points", "sampled_points",
                 "seed", "out", "options")

    def __init__(self, distribution, source, points, sampled_points,
                 seed, out, options):
        self.distribution = distribution
        self.source = source          # dict describing where D came from
        self.points = points          # list[ChartPoint]
        self.sampled_points = sampled_points  # bool: were they drawn?
        self.seed = seed              # int or None
        self.out = out                # str or None
        self.options = options        # dict of per-command knobs


def _job_error(msg):
    return InputError(f"job file: {msg}")


def _require_table(data, key):
    v = data.get(key)
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise _job_error(f"[{key}] must be a table")
    return v


def _build_distribution(dist):
    """The [distribution] table: exactly one of `ode` or `fields`."""
    if not isinstance(dist, dict) or not dist:
        raise _job_error("missing [distribution] table")
    keys = sorted(dist.keys())
    if keys not in (["ode"], ["fields"]):
        raise _job_error(
            "[distribution] needs exactly one of 'ode' or 'fields', "
            f"got {keys}"
        )
    if "ode" in dist:
        spec = dist["ode"]
        if not isinstance(spec, dict):
            raise _job_error("distribution.ode must be a table")
        missing = [k for k in ("r", "s", "F") if k not in spec]
        if missing:
            raise _job_error(f"distribution.ode is missing {missing}")
        extra = sorted(set(spec) - {"r", "s", "F"})
        if extra:
            raise _job_error(f"distribution.ode has unknown keys {extra}")
        r, s, F = spec["r"], spec["s"], spec["F"]
        if not isinstance(r, int) or isinstance(r, bool):
            raise _job_error("distribution.ode.r must be an integer")
        if not isinstance(s, int) or isinstance(s, bool):
            raise _job_error("distribution.ode.s must be an integer")
        if not isinstance(F, str):
            raise _job_error("distribution.ode.F must be an expression string")
        D = from_ode(r, s, F)
        source = {"form": "ode", "r": r, "s": s, "F": F}
        return D, source
    spec = dist["fields"]
    if not isinstance(spec, dict):
        raise _job_error("distribution.fields must be a table")
    missing = [k for k in ("chart", "x1", "x2") if k not in spec]
    if missing:
        raise _job_error(f"distribution.fields is missing {missing}")
    extra = sorted(set(spec) - {"chart", "x1", "x2"})
    if extra:
        raise _job_error(f"distribution.fields has unknown keys {extra}")
    names = spec["chart"]
    if (not isinstance(names, list) or not names
            or not all(isinstance(nm, str) for nm in names)):
        raise _job_error("distribution.fields.chart must be a list of names")
    chart = Chart(tuple(names))
    comps = {}
    for key in ("x1", "x2"):
        texts = spec[key]
        if (not isinstance(texts, list)
                or not all(isinstance(tx, str) for tx in texts)):
            raise _job_error(
                f"distribution.fields.{key} must be a list of "
                "component expression strings"
            )
        if len(texts) != chart.dim:
            raise _job_error(
                f"distribution.fields.{key} has {len(texts)} components "
                f"for a {chart.dim}-dimensional chart"
            )
        comps[key] = [parse(tx, chart) for tx in texts]
    D = Distribution2(chart, VecField(chart, comps["x1"]),
                      VecField(chart, comps["x2"]))
    source = {
        "form": "fields", "chart": list(names),
        "x1": list(spec["x1"]), "x2": list(spec["x2"]),
    }
    return D, source


def _resolve_points(pts_table, chart, seed):
    """[points]: explicit `values`, or `count`/`box` uniform draws.

    Returns (points, sampled).  Sampling without a seed is refused so
    that reports stay reproducible.
    """
    values = pts_table.get("values")
    if values is not None:
        if "count" in pts_table or "box" in pts_table:
            raise _job_error("points.values excludes points.count/box")
        if not isinstance(values, list) or not values:
            raise _job_error("points.values must be a nonempty list of points")
        pts = []
        for i, row in enumerate(values):
            if (not isinstance(row, list)
                    or not all(isinstance(v, (int, float)) for v in row)):
                raise _job_error(f"points.values[{i}] must be a number list")
            if len(row) != chart.dim:
                raise _job_error(
                    f"points.values[{i}] has {len(row)} coordinates, "
                    f"the chart has {chart.dim}"
                )
            pts.append(ChartPoint(chart, [float(v) for v in row]))
        return pts, False
    count = pts_table.get("count", 1)
    if not isinstance(count, int) or isinstance(count, bool) or count < 1:
        raise _job_error("points.count must be a positive integer")
    box = pts_table.get("box", 0.5)
    if not isinstance(box, (int, float)) or not box > 0:
        raise _job_error("points.box must be a positive number")
    if seed is None:
        raise _job_error(
            "sampling base points requires a seed (job `seed` or --seed)"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    draws = rng.uniform(-float(box), float(box), size=(count, chart.dim))
    return [ChartPoint(chart, row) for row in draws], True


_KNOWN_OPTIONS = {
    "depth": int,            # growth: bracket depth
    "fiber_samples": int,    # class: covectors per base point
    "time": float,           # characteristic: integrate over [-time, time]
    "samples": int,          # curve commands: number of samples
    "margin": float,         # rho-profile: window inset fraction
    "nodes": int,            # projectivize: interpolation nodes
    "rho_rtol": float,       # rho acceptance tolerance
}


def load_job(path, seed_override=None, out_override=None) -> Job:
    """Parse and validate one TOML job file."""
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise _job_error(f"no such file: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise _job_error(f"{path}: {exc}") from None

    known_top = {"distribution", "points", "seed", "out", "tolerances",
                 "options"}
    extra = sorted(set(data) - known_top)
    if extra:
        raise _job_error(f"unknown top-level keys {extra}")

    seed = data.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise _job_error("seed must be an integer")
    if seed_override is not None:
        seed = int(seed_override)

    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise _job_error("out must be a directory path string")
    if out_override is not None:
        out = out_override

    tols = _require_table(data, "tolerances")
    extra = sorted(set(tols) - {"rank"})
    if extra:
        raise _job_error(f"[tolerances] has unknown keys {extra}")
    if "rank" in tols:
        rank = tols["rank"]
        if not isinstance(rank, (int, float)) or not 0.0 < float(rank) < 1.0:
            raise _job_error("tolerances.rank must be a number in (0, 1)")
        # the documented override channel for the default rank tolerance
        os.environ["MAXCLASS_TOL"] = repr(float(rank))

    options = {}
    opts = _require_table(data, "options")
    for key, val in opts.items():
        want = _KNOWN_OPTIONS.get(key)
        if want is None:
            raise _job_error(f"[options] has unknown key {key!r}")
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise _job_error(f"options.{key} must be a number")
        if want is int and not isinstance(val, int):
            raise _job_error(f"options.{key} must be an integer")
        options[key] = want(val)

    D, source = _build_distribution(data.get("distribution"))
    points, sampled = _resolve_points(
        _require_table(data, "points"), D.chart, seed
    )
    return Job(D, source, points, sampled, seed, out, options)


# ---------------------------------------------------------------------------
# serialization


def _plain(obj):
    """JSON-ready deep copy: numpy scalars/arrays to Python numbers and
    lists, tuples to lists, dict keys to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _fmt17(x):
    return format(float(x), ".17g")


def _write_report(outdir, name, payload):
    path = os.path.join(outdir, name)
    text = json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _write_csv(outdir, name, header, rows):
    path = os.path.join(outdir, name)
    lines = [header]
    lines.extend(",".join(_fmt17(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _point_seed(seed, index, purpose):
    """A deterministic child seed per (base point, purpose)."""
    if seed is None:
        return None
    return np.random.SeedSequence([int(seed), 1 + purpose, index])


def _require_seed(job, what):
    if job.seed is None:
        raise InputError(
            f"{what} samples covectors and requires a seed "
            "(job `seed` or --seed)"
        )


# ---------------------------------------------------------------------------
# command bodies (each returns a JSON-ready `data` dict; CSVs are
# written as side effects and referenced by file name)


def _run_growth(job, outdir, emit):
    depth = job.options.get("depth")
    rows = []
    for q in job.points:
        gv = growth_vector(job.distribution, q, depth=depth)
        rows.append({"point": list(q.coords), "growth_vector": list(gv)})
        emit(f"q = ({', '.join(format(c, '.6g') for c in q.coords)}): "
             f"growth {tuple(gv)}")
    return {"depth": depth, "points": rows}


def _run_class(job, outdir, emit):
    _require_seed(job, "class")
    fiber = job.options.get("fiber_samples", 5)
    rows = []
    for i, q in enumerate(job.points):
        rep = class_at(
            job.distribution, q, samples=fiber,
            seed=_point_seed(job.seed, i, 0),
        )
        rows.append(rep.as_dict())
        emit(f"q = ({', '.join(format(c, '.6g') for c in q.coords)}): "
             f"m(q) = {rep.m} ({'regular' if rep.regular else 'irregular'})")
    return {"fiber_samples": fiber, "points": rows}


def _curve_start(job, purpose):
    """The covector the curve commands run through: sampled over the
    first base point."""
    _require_seed(job, "this command")
    q0 = job.points[0]
    lam = sample_regular_covector(
        job.distribution, q0, seed=_point_seed(job.seed, 0, purpose)
    )
    return q0, lam


def _run_characteristic(job, outdir, emit):
    q0, lam = _curve_start(job, 1)
    T = job.options.get("time", 0.4)
    samples = job.options.get("samples", 33)
    if samples < 2:
        raise InputError("options.samples must be at least 2")
    X = characteristic_field(job.distribution)
    start = lam.as_point()
    ts = np.linspace(-T, T, samples)
    curve = []
    for t in ts:
        if t == 0.0:
            pt = start
        else:
            pt = flow(X, start, float(t)).point
        curve.append([float(t)] + [float(c) for c in pt.coords])
    csv_name = "characteristic.csv"
    _write_csv(outdir, csv_name, "t," + ",".join(X.chart.names), curve)
    emit(f"integrated the characteristic curve over [{-T:g}, {T:g}] "
         f"({samples} samples)")
    return {
        "base_point": list(q0.coords),
        "covector": {"q": list(lam.q), "p": list(lam.p)},
        "time": float(T),
        "samples": int(samples),
        "csv": csv_name,
        "columns": ["t"] + list(X.chart.names),
        "curve": curve,
    }


def _rho_grid(curve, margin, samples):
    a, b = curve.window
    inset = margin * (b - a)
    return np.linspace(a + inset, b - inset, samples)


def _run_rho_profile(job, outdir, emit):
    q0, lam = _curve_start(job, 1)
    samples = job.options.get("samples", 33)
    margin = job.options.get("margin", 0.05)
    rtol = job.options.get("rho_rtol", 1e-6)
    if samples < 2:
        raise InputError("options.samples must be at least 2")
    if not 0.0 < margin < 0.5:
        raise InputError("options.margin must lie in (0, 0.5)")
    curve = jacobi_curve(job.distribution, lam)
    ts = _rho_grid(curve, margin, samples)
    profile = [[float(t), float(rho(curve, float(t), rtol=rtol))] for t in ts]
    csv_name = "rho_profile.csv"
    _write_csv(outdir, csv_name, "t,value", profile)
    vals = [v for _, v in profile]
    emit(f"rho on [{ts[0]:.6g}, {ts[-1]:.6g}]: "
         f"max |rho| = {max(abs(v) for v in vals):.6g}")
    return {
        "base_point": list(q0.coords),
        "covector": {"q": list(lam.q), "p": list(lam.p)},
        "window": [curve.window[0], curve.window[1]],
        "weight": int(curve.weight),
        "m": int(curve.m),
        "rho_rtol": float(rtol),
        "csv": csv_name,
        "profile": profile,
        "max_abs_rho": float(max(abs(v) for v in vals)),
    }


def _run_projectivize(job, outdir, emit):
    q0, lam = _curve_start(job, 1)
    samples = job.options.get("samples", 33)
    nodes = job.options.get("nodes", 33)
    rtol = job.options.get("rho_rtol", 1e-6)
    if samples < 2:
        raise InputError("options.samples must be at least 2")
    if nodes < 5:
        raise InputError("options.nodes must be at least 5")
    curve = jacobi_curve(job.distribution, lam)
    psi = projectivize(curve, nodes=nodes)
    a, b = curve.window
    ts = np.linspace(a, b, samples)
    chart_rows = [[float(t), float(psi(float(t)))] for t in ts]
    csv_name = "projectivize.csv"
    _write_csv(outdir, csv_name, "t,value", chart_rows)

    # post-check: in the new parameter the density must vanish
    lo, hi = psi.image()
    pulled = curve.pullback(psi.inverse_at, (lo, hi), label="projectivized")
    taus = _rho_grid(pulled, 0.10, 9)
    post = [
        [float(tau), float(rho(pulled, float(tau), rtol=max(rtol, 1e-5)))]
        for tau in taus
    ]
    resid = max(abs(v) for _, v in post)
    emit(f"projectivizing chart on [{a:.6g}, {b:.6g}]; "
         f"post-check max |rho| = {resid:.6g}")
    return {
        "base_point": list(q0.coords),
        "covector": {"q": list(lam.q), "p": list(lam.p)},
        "window": [a, b],
        "t0": float(psi.t0),
        "csv": csv_name,
        "chart": chart_rows,
        "post_check": post,
        "post_check_residual": float(resid),
    }


def _run_report(job, outdir, emit):
    sections = {}
    sections["growth"] = _run_growth(job, outdir, emit)
    sections["class"] = _run_class(job, outdir, emit)
    sections["characteristic"] = _run_characteristic(job, outdir, emit)
    sections["rho_profile"] = _run_rho_profile(job, outdir, emit)
    sections["projectivize"] = _run_projectivize(job, outdir, emit)
    return sections


_RUNNERS = {
    "growth": _run_growth,
    "class": _run_class,
    "characteristic": _run_characteristic,
    "rho-profile": _run_rho_profile,
    "projectivize": _run_projectivize,
    "report": _run_report,
}


def _bracket_text(table):
    """The nonzero brackets rendered one per line: `[a,b] = 2 g2`."""
    def term(label, c):
        if c == 1:
            return label
        if c == -1:
            return f"-{label}"
        if float(c).is_integer():
            return f"{int(c)} {label}"
        return f"{c:.6g} {label}"

    lines = []
    for entry in table.as_dict()["brackets"]:
        rhs = " + ".join(term(lbl, c) for lbl, c in entry["terms"].items())
        lines.append(f"[{entry['left']},{entry['right']}] = {rhs}")
    return lines


def _run_verify_model(n, seed, outdir, emit):
    mf = model_frame(n, seed=seed if seed is not None else 0)
    for line in _bracket_text(mf.table):
        emit(line)
    emit(f"dimension {mf.dimension} (expected {2 * n - 1}); "
         f"symmetry residual {mf.symmetry_residual:.3e}; "
         f"expansion residual {mf.expansion_residual:.3e}")
    if mf.matches_reference:
        emit("reference match: yes")
    else:
        parts = ", ".join(
            f"[{d['left']},{d['right']}] -> {d['out']}: "
            f"computed {d['value']:g}, stated {d['other']:g}"
            for d in mf.mismatches
        )
        emit(f"reference match: no ({parts})")
    ok = mf.dimension == 2 * n - 1
    emit(("PASS" if ok else "FAIL")
         + f": model frame n = {n} verified against its distribution")
    data = {
        "n": mf.n,
        "m": mf.m,
        "dimension": mf.dimension,
        "labels": list(mf.labels),
        "symmetry_residual": mf.symmetry_residual,
        "expansion_residual": mf.expansion_residual,
        "antisymmetry_residual": mf.table.antisymmetry_residual(),
        "jacobi_residual": mf.table.jacobi_residual(),
        "computed_table": mf.table.as_dict(),
        "reference_table": mf.reference.as_dict(),
        "mismatches": [
            {
                "left": d["left"], "right": d["right"], "out": d["out"],
                "computed": d["value"], "reference": d["other"],
            }
            for d in mf.mismatches
        ],
        "reference_match": mf.matches_reference,
        "verified": ok,
    }
    if not ok:
        raise NumericalInstabilityError(
            f"model frame dimension {mf.dimension} != {2 * n - 1}"
        )
    return data


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(
        prog="maxclass",
        description=(
            "Invariants of rank-2 distributions: growth vectors, the "
            "class via fiber sampling, characteristic curves, density "
            "profiles, projectivizing charts, and the model symmetry "
            "frame."
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("growth", "small growth vector at each base point"),
        ("class", "class m(q) by fiber sampling at each base point"),
        ("characteristic", "integrate the characteristic curve"),
        ("rho-profile", "density profile along the reduced curve (CSV)"),
        ("projectivize", "projectivizing chart and its post-check"),
        ("report", "all job-applicable sections in one JSON report"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--job", required=True, help="TOML job file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the job seed")
        sp.add_argument("--out", default=None,
                        help="output directory (default: job `out` or '.')")
    sp = sub.add_parser(
        "verify-model",
        help="realize and verify the model symmetry frame",
    )
    sp.add_argument("--n", type=int, required=True,
                    help="ambient dimension (>= 5)")
    sp.add_argument("--seed", type=int, default=None,
                    help="seed for the verification sample points")
    sp.add_argument("--out", default=None,
                    help="output directory (default '.')")
    return p


def _dispatch(args, emit):
    if args.command == "verify-model":
        outdir = args.out or "."
        os.makedirs(outdir, exist_ok=True)
        with collect_records() as records:
            data = _run_verify_model(args.n, args.seed, outdir, emit)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "command": "verify-model",
            "seed": args.seed,
            "data": data,
            "tolerance_records": [r.as_dict() for r in records],
        }
        path = _write_report(outdir, "verify_model.json", payload)
        emit(f"wrote {path}")
        return

    job = load_job(args.job, seed_override=args.seed, out_override=args.out)
    outdir = job.out or "."
    os.makedirs(outdir, exist_ok=True)
    runner = _RUNNERS[args.command]
    with collect_records() as records:
        data = runner(job, outdir, emit)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "seed": job.seed,
        "distribution": job.source,
        "data": data,
        "tolerance_records": [r.as_dict() for r in records],
    }
    name = args.command.replace("-", "_") + ".json"
    path = _write_report(outdir, name, payload)
    emit(f"wrote {path}")


def main(argv=None):
    args = _parser().parse_args(argv)

    def emit(line):
        print(line)

    try:
        _dispatch(args, emit)
    except (InputError, EvaluationDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MaxclassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
