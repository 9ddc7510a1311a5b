"""Command-line front end.

Verbs: ``residuals``, ``transform``, ``verify-example``, ``decompose``,
``export`` and ``list``.  Reports are JSON documents with sorted keys and a
``"format": 1`` field; identical input, seed and settings give byte-identical
reports (wall time is only included with ``--timing``).

Exit status: 0 pass, 1 fail, 2 flow left its box, 3 Lambda = 0 for the main
transformation, 4 grid failure in the theorem-2 solver, 5 unknown example,
6 invalid input or unmet structural precondition.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import __version__
from . import catalog as cat
from . import exprlang as el
from . import transform as tr
from . import walker as wk
from .walker import Box, WalkerMetric

EXIT_PASS, EXIT_FAIL, EXIT_ESCAPE, EXIT_LAMBDA0, EXIT_GRID, EXIT_UNKNOWN, EXIT_INPUT = 0, 1, 2, 3, 4, 5, 6
DEFAULT_TOL, DEFAULT_SEED = 1e-8, 0


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------

def _box_from_spec(bounds, radius, variables, what):
    if not isinstance(bounds, dict):
        raise InputError(f"{what} must map every coordinate to [min, max]")
    missing = [v for v in variables if v not in bounds]
    if missing:
        raise InputError(f"{what} lacks bounds for {missing}")
    try:
        return Box({v: tuple(float(x) for x in bounds[v]) for v in variables}, radius=radius)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{what}: {exc}") from None


def metric_from_spec(spec, source="<spec>"):
    """Build a :class:`WalkerMetric` from a parsed spec document."""
    try:
        n = int(spec["n"])
        coords = list(spec["coords"])
        h_raw = spec["h"]
        A_raw = spec["A"]
        H_raw = spec["H"]
    except KeyError as exc:
        raise InputError(f"{source}: missing key {exc}") from None
    if len(coords) != n:
        raise InputError(f"{source}: 'coords' has {len(coords)} names but n = {n}")

    def parse(text, where):
        if not isinstance(text, str):
            raise InputError(f"{source}: {where} must be an expression string")
        try:
            return el.parse(text)
        except el.ParseError as exc:
            raise InputError(f"{source}: {where}: {exc}") from None

    if len(h_raw) != n or any(len(r) != n for r in h_raw):
        raise InputError(f"{source}: 'h' must be {n}x{n}")
    h = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if h_raw[i][j] is not None:
                h[i][j] = parse(h_raw[i][j], f"h[{i}][{j}]")
    for i in range(n):
        for j in range(i, n):
            if h[i][j] is None and h[j][i] is None:
                raise InputError(f"{source}: h[{i}][{j}] is missing")
    A = [parse(a, f"A[{i}]") for i, a in enumerate(A_raw)]
    H = parse(H_raw, "H")
    lam = spec.get("lambda")
    variables = ["xp", *coords, "xm"]
    box = None
    if "box" in spec:
        box = _box_from_spec(spec["box"], spec.get("radius"), variables, f"{source}: box")
    flow_box = None
    if "flow_box" in spec:
        flow_box = _box_from_spec(spec["flow_box"], spec.get("flow_radius"), variables, f"{source}: flow_box")
    try:
        w = WalkerMetric(coords, h, A, H, lam=lam, params=spec.get("params"), name=spec.get("name", ""), box=box)
    except wk.WalkerFormError as exc:
        raise InputError(f"{source}: {exc}") from None
    w.meta["flow_box"] = flow_box
    return w


def load_spec(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        spec = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(spec, dict):
        raise InputError(f"{path}: top level must be an object")
    return spec, metric_from_spec(spec, path), hashlib.sha256(raw).hexdigest()


def _load(args):
    """Load ``args.file``; the spec file's ``tolerance`` and ``seed`` fill unset flags."""
    spec, w, digest = load_spec(args.file)
    _fill_defaults(args, spec, args.file)
    return spec, w, digest


def _fill_defaults(args, spec=None, source="<spec>"):
    spec = spec or {}
    try:
        if getattr(args, "tol", None) is None:
            args.tol = float(spec.get("tolerance", DEFAULT_TOL))
        if getattr(args, "seed", None) is None:
            args.seed = int(spec.get("seed", DEFAULT_SEED))
    except (TypeError, ValueError):
        raise InputError(f"{source}: 'tolerance' must be a number and 'seed' an integer") from None


def spec_for(w, flow_box=None, name=None):
    spec = w.to_spec()
    spec["name"] = name or w.name
    if flow_box is not None:
        spec["flow_box"] = {k: list(v) for k, v in flow_box.bounds.items()}
        if flow_box.radius is not None:
            spec["flow_radius"] = flow_box.radius
    return spec


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def render(report):
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def emit(report, out):
    text = render(report)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _entry(equation_id, sup, tol, n_points, seed, **extra):
    d = {"equation_id": equation_id, "sup_residual": float(sup), "tolerance": float(tol),
         "pass": bool(sup <= tol), "n_points": int(n_points), "seed": seed}
    d.update(extra)
    return d


def _base_report(command, args, digest=None):
    rep = {"format": 1, "tool": "walkerlab", "version": __version__, "command": command, "seed": args.seed,
           "settings": {"points": args.points, "tol": args.tol}}
    if digest is not None:
        rep["input_digest"] = "sha256:" + digest
    return rep


def _points(w, args):
    if w.box is None:
        raise InputError("the spec file needs a 'box' to sample points")
    return w.box.sample(args.points, args.seed)


def _lam(w, args):
    lam = getattr(args, "lam", None)
    if lam is None:
        lam = w.lam
    if lam is None:
        raise InputError("no Einstein constant: set 'lambda' in the spec file or pass --lambda")
    return float(lam)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_residuals(args):
    spec, w, digest = _load(args)
    rep = _base_report("residuals", args, digest)
    rep["system"] = args.system
    pts = _points(w, args)
    results = []
    if args.system == "einstein":
        r = wk.einstein_residual(w, _lam(w, args), pts, args.tol)
        results.append(r.to_json(args.seed))
    elif args.system == "strong":
        r = wk.residual_strong(w, pts, args.tol)
        results.append(r.to_json(args.seed))
    else:
        lam = _lam(w, args)
        try:
            prof = wk.extract_profile(w, points=pts, tol=args.tol)
            defect = max(prof.cubic_residual, abs(prof.lambda_hat - lam))
        except wk.ProfileError as exc:
            defect = float("inf")
            rep["profile_error"] = str(exc)
        results.append(_entry("profile", defect, args.tol, len(pts), args.seed))
        if np.isfinite(defect) and defect <= args.tol:
            system = wk.applicable_system(w, lam) if args.system == "auto" else args.system
            rep["system"] = system
            results += [r.to_json(args.seed) for r in wk.run_system(w, lam, system, pts, args.tol)]
    rep["results"] = results
    rep["pass"] = all(r["pass"] for r in results)
    return rep


def _sup_profile(w, pts):
    h, A, H = w.components(pts, 0)
    H1, H0 = w.profile_components(pts, 0)
    return {
        "sup_A": float(np.max(np.abs(A.value))),
        "sup_H1": float(np.max(np.abs(H1.value))),
        "sup_H0": float(np.max(np.abs(H0.value))),
    }


def _dump_map(path, cmap_inverse, cmap_jacobian, pts):
    x_old = cmap_inverse(pts)
    J = cmap_jacobian(pts)
    doc = {"format": 1, "description": "samples (x_new, x_old, J = d x_old / d x_new)",
           "samples": [{"x_new": p, "x_old": x, "jacobian": j} for p, x, j in zip(pts, x_old, J)]}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(doc))


def cmd_transform(args):
    spec, w, digest = _load(args)
    rep = _base_report("transform", args, digest)
    rep["mode"] = args.mode
    pts = _points(w, args)
    flow_box = w.meta.get("flow_box")
    rep["pre"] = _sup_profile(w, pts)
    results = []
    if args.mode in ("kill-a", "main"):
        if args.mode == "main":
            lam = _lam(w, args)
            res = tr.main_theorem_flow(w, lam, box=w.box, flow_box=flow_box, points=pts, step=args.step)
        else:
            res = tr.kill_A(w, box=w.box, flow_box=flow_box, points=pts, step=args.step)
        d = res.diagnostics
        rep["post"] = {"sup_A": d["sup_A"], "sup_H1": d["sup_H1"],
                       "sup_H0": float(np.max(np.abs(res.raw.profile_components(pts, 0)[1].value)))}
        rep["map"] = res.map.to_json()
        rep["identity"] = bool(d["identity"])
        results.append(_entry("post:sup_A", d["sup_A"], args.tol, len(pts), args.seed))
        if args.mode == "main":
            results.append(_entry("post:sup_H1", d["sup_H1"], args.tol, len(pts), args.seed))
        results.append(_entry("post:walker_form", d["walker_defect"], args.tol, len(pts), args.seed))
        if args.einstein:
            lam = _lam(w, args)
            sub = pts[: args.einstein_points]
            pre = wk.einstein_residual(w, lam, sub, args.tol).sup_residual
            post = wk.einstein_residual(res.metric, lam, sub, args.tol).sup_residual
            results.append(_entry("einstein:pre", pre, args.tol, len(sub), args.seed))
            results.append(_entry("einstein:post", post, args.tol, len(sub), args.seed))
        if args.dump_map:
            _dump_map(args.dump_map, res.map.inverse, res.map.jacobian, pts)
    elif args.mode == "theorem2":
        lam = _lam(w, args)
        if not w.A_is_zero:
            raise InputError("theorem2 mode needs A = 0 (run kill-a first)")
        names = w.variables
        spatial = [(w.box.lo[i], w.box.hi[i]) for i in range(1, w.n + 1)]
        if w.box.radius is not None:
            r = w.box.radius / np.sqrt(w.n)
            spatial = [(max(lo, -r), min(hi, r)) for lo, hi in spatial]
        t0, t1 = w.box.lo[names.index("xm")], w.box.hi[names.index("xm")]
        grid = tr.Grid(spatial, args.grid_nodes)
        res = tr.theorem2_phi(w, lam, grid, args.steps, t_end=t1, base_slice=t0, tol=args.grid_tol)
        rep["theorem2"] = res.to_json()
        results.append(_entry("post:sup_H0_interior", res.residual_sup, args.grid_tol,
                              int(np.prod([args.grid_nodes] * w.n)), args.seed))
        if args.dump_map:
            half = {c: (0.5 * lo, 0.5 * hi) for c, (lo, hi) in zip(w.coords, grid.bounds)}
            inner = Box({"xp": (-1.0, 1.0), **half, "xm": (t0, t1)})
            sub = inner.sample(min(args.points, 50), args.seed)
            _dump_map(args.dump_map, res.psi_map.inverse, res.psi_map.jacobian, sub)
    elif args.mode == "plus-shift":
        lam = w.lam if args.lam is None else args.lam
        f = None if args.f is None else el.parse(args.f)
        new = tr.plus_shift(w, f, lam)
        rep["post"] = _sup_profile(new, pts)
        rep["metric"] = spec_for(new)
        if f is None:
            results.append(_entry("post:sup_H1", rep["post"]["sup_H1"], args.tol, len(pts), args.seed))
        else:
            results.append(_entry("post:defined", 0.0, args.tol, len(pts), args.seed))
        if args.dump_map:
            fexpr = el.simplify(el.div(el.neg(w.H1), el.Num(2.0 * lam))) if f is None else f
            g = tr.GaugeMetric(w, el.neg(fexpr), w.coords, 0.0)

            def inverse(p):
                return g.old_points(p)

            def jac(p):
                return np.linalg.inv(g.map_jet(g.old_points(p), 1).grad)

            _dump_map(args.dump_map, inverse, jac, pts)
    rep["results"] = results
    rep["pass"] = all(r["pass"] for r in results)
    return rep


def verify_example(name, points=100, tol=1e-8, seed=0, einstein_points=30):
    """Full pipeline for a named example; returns the report dictionary."""
    b = cat.named_example(name)
    w = b.metric
    pts = w.sample(points, seed)
    sub = pts[:einstein_points]
    stages = []

    r = wk.einstein_residual(w, b.lam, pts, tol)
    stages.append({"stage": "input_einstein", "sup_residual": r.sup_residual, "tolerance": tol,
                   "pass": r.passed, "n_points": len(pts)})

    if b.mode == "main":
        res = tr.main_theorem_flow(w, b.lam, base_slice=b.base_slice, flow_box=b.flow_box, points=pts)
        post = max(res.diagnostics["sup_A"], res.diagnostics["sup_H1"])
    else:
        res = tr.kill_A(w, base_slice=b.base_slice, flow_box=b.flow_box, points=pts)
        post = res.diagnostics["sup_A"]
    stages.append({"stage": "transformation", "mode": b.mode, "sup_residual": post, "tolerance": tol,
                   "pass": bool(post <= tol), "n_points": len(pts),
                   "diagnostics": {k: v for k, v in res.diagnostics.items()}})

    x_flow = res.map.inverse(pts)
    x_closed = b.expected_map.inverse(pts)
    map_err = float(np.max(np.abs(x_flow - x_closed)))
    g_flow = wk.full_metric_jet(res.metric, pts, 0).value
    g_closed = wk.full_metric_jet(b.expected_metric, pts, 0).value
    metric_err = float(np.max(np.abs(g_flow - g_closed)))
    cf = {"stage": "closed_form", "sup_residual": max(map_err, metric_err), "tolerance": tol,
          "pass": bool(max(map_err, metric_err) <= tol), "n_points": len(pts),
          "map_error": map_err, "metric_error": metric_err, "provenance": b.provenance}
    if "maple" in b.extras:
        p20 = pts[:20]
        x20 = x_flow[:20]
        status = {}
        for reading in ("literal", "corrected"):
            u, v = b.extras["maple"](p20[:, 1], p20[:, 2], p20[:, 3], reading)
            status[reading] = float(max(np.max(np.abs(u - x20[:, 1])), np.max(np.abs(v - x20[:, 2]))))
        cf["maple_cross_validation"] = {
            "errors": status,
            "status": ("corrected reading matches the integrator; literal reading does not"
                       if status["corrected"] <= 1e-5 < status["literal"] else
                       "see errors; integrator output is the recorded truth"),
        }
    if "displayed_form" in b.extras:
        gp = wk.full_metric_jet(b.extras["displayed_form"], pts, 0).value
        cf["display_error"] = float(np.max(np.abs(g_flow - gp)))
    if b.notes:
        cf["notes"] = list(b.notes)
    stages.append(cf)

    r2 = wk.einstein_residual(res.metric, b.lam, sub, tol)
    stages.append({"stage": "transformed_einstein", "sup_residual": r2.sup_residual, "tolerance": tol,
                   "pass": r2.passed, "n_points": len(sub)})
    return {"example": name, "lambda": b.lam, "stages": stages, "pass": all(s["pass"] for s in stages)}


def cmd_verify_example(args):
    _fill_defaults(args)
    rep = _base_report("verify-example", args)
    rep.update(verify_example(args.name, args.points, args.tol, args.seed, args.einstein_points))
    return rep


def cmd_decompose(args):
    spec, w, digest = _load(args)
    rep = _base_report("decompose", args, digest)
    lam = _lam(w, args)
    pts = _points(w, args)
    dec = wk.curvature_decomposition(w, lam, pts, tol=max(args.tol, 1e-12))
    vf = wk.v_formula(w, lam, pts)
    lam_err = float(np.max(np.abs(dec.lam + lam)))
    v_err = float(np.max(np.abs(dec.v - vf)))
    rep["checks"] = dec.checks
    rep["results"] = [
        _entry("lambda=-Lambda", lam_err, args.tol, len(pts), args.seed),
        _entry("v-formula", v_err, args.tol, len(pts), args.seed),
        _entry("ricci-reconstruction", dec.ricci_error, args.tol, len(pts), args.seed),
    ]
    rep["points"] = [
        {"x": p, "lambda": l, "v": v, "T": T, "P": P, "R0": R0}
        for p, l, v, T, P, R0 in zip(pts, dec.lam, dec.v, dec.T, dec.P, dec.R0)
    ]
    rep["pass"] = all(r["pass"] for r in rep["results"])
    return rep


def cmd_export(args):
    if args.name in cat.EXAMPLE_NAMES:
        b = cat.named_example(args.name)
        w = b.expected_metric if args.transformed else b.metric
        spec = spec_for(w, b.flow_box)
    else:
        extra = {name: (m, lam) for name, m, lam in cat.einstein_catalog()}
        if args.name not in extra:
            raise cat.UnknownExampleError(f"unknown catalog metric {args.name!r}; run 'walkerlab list'")
        spec = spec_for(extra[args.name][0], name=args.name)
    return spec


def cmd_list(args):
    return {"format": 1, "examples": list(cat.EXAMPLE_NAMES),
            "einstein_catalog": [name for name, _, _ in cat.einstein_catalog()]}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _common(p, points=100):
    p.add_argument("--points", type=int, default=points, help="number of sampled points (default %(default)s)")
    p.add_argument("--tol", type=float, default=None,
                   help=f"pass tolerance (default: the spec file's 'tolerance', else {DEFAULT_TOL})")
    p.add_argument("--seed", type=int, default=None,
                   help=f"sampling seed (default: the spec file's 'seed', else {DEFAULT_SEED})")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--timing", action="store_true", help="include wall time (breaks byte-identical reports)")


def build_parser():
    ap = argparse.ArgumentParser(prog="walkerlab", description="Walker metrics: residuals, flows and examples")
    ap.add_argument("--version", action="version", version=f"walkerlab {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("residuals", help="evaluate a residual system on a metric-spec file")
    p.add_argument("file")
    p.add_argument("--system", choices=["auto", "full", "a0", "theorem2", "ricciflat", "main", "strong", "einstein"],
                   default="auto", help="residual system (default: the most specialized applicable one)")
    p.add_argument("--lambda", dest="lam", type=float, help="override the spec file's lambda")
    _common(p)
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("transform", help="run a coordinate transformation on a metric-spec file")
    p.add_argument("file")
    p.add_argument("--mode", choices=["kill-a", "main", "theorem2", "plus-shift"], required=True)
    p.add_argument("--lambda", dest="lam", type=float, help="override the spec file's lambda")
    p.add_argument("--f", help="shift function for plus-shift (default: -H1/(2 Lambda))")
    p.add_argument("--step", type=float, default=None, help="initial RK4 step (default 1e-3)")
    p.add_argument("--grid-nodes", type=int, default=33, help="theorem2 nodes per axis (default %(default)s)")
    p.add_argument("--steps", type=int, default=32, help="theorem2 x- steps (default %(default)s)")
    p.add_argument("--grid-tol", type=float, default=1e-3,
                   help="theorem2 tolerance for the residual and the Richardson estimate (default %(default)s)")
    p.add_argument("--einstein", action="store_true", help="also compare Einstein residuals before and after")
    p.add_argument("--einstein-points", type=int, default=30)
    p.add_argument("--dump-map", help="write sampled (x_new, x_old, J) triples here")
    _common(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("verify-example", help="run the full pipeline on a named example")
    p.add_argument("name")
    p.add_argument("--einstein-points", type=int, default=30)
    _common(p)
    p.set_defaults(func=cmd_verify_example)

    p = sub.add_parser("decompose", help="dump the null-frame curvature decomposition")
    p.add_argument("file")
    p.add_argument("--lambda", dest="lam", type=float, help="override the spec file's lambda")
    _common(p, points=10)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("export", help="write the metric-spec file of a catalog metric")
    p.add_argument("name")
    p.add_argument("--transformed", action="store_true", help="export the expected transformed metric")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export, timing=False)

    p = sub.add_parser("list", help="list catalog names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_list, timing=False)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    try:
        rep = args.func(args)
    except cat.UnknownExampleError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_UNKNOWN
    except tr.LambdaZeroError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LAMBDA0
    except tr.FlowEscapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESCAPE
    except (tr.GridTooCoarseError, tr.BlowUpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRID
    except (InputError, wk.WalkerFormError, wk.ProfileError, tr.JacobianError, el.ExprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "timing", False):
        rep["wall_time_s"] = round(time.perf_counter() - t0, 3)
    emit(rep, getattr(args, "out", None))
    if "pass" in rep:
        return EXIT_PASS if rep["pass"] else EXIT_FAIL
    return EXIT_PASS


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
