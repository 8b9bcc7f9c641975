"""Command-line front end.

Exit codes: 0 success, 1 a verified condition failed, 2 invalid input or a
pipeline error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import NormalFormError
from .hamiltonian import builtin_library, parse_hamiltonian
from .homogeneous import homogeneous_pipeline
from .normalform import (
    PipelineOptions,
    normal_form_pipeline,
    obstruction,
    random_admissible_map,
    verify_recipe,
    vanishes,
)
from .transforms import pullback

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config

def read_config(path):
    """``key = value`` lines; ``#`` starts a comment.  Keys use option names."""
    conf = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        conf[k.lstrip("-").replace("-", "_")] = v
    return conf


def _floats(text):
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise CliError(f"expected comma-separated numbers, got {text!r}") from exc


def _bool(v):
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


# ---------------------------------------------------------------- field selection

def _add_field_args(p, eps_param=True):
    p.add_argument("--ham", help="builtin Hamiltonian name (see `list`)")
    p.add_argument("--expr", help="Hamiltonian expression in q0..qd, p0..pd (instead of --ham)")
    p.add_argument("--d", type=int, help="transverse dimension for --expr")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="parameter value, repeatable")
    if eps_param:
        p.add_argument("--eps", type=float, help="shorthand for --param eps=VALUE")
    p.add_argument("--q", help="initial q, comma separated (default: canonical start)")
    p.add_argument("--p", help="initial p, comma separated (default: canonical start)")
    p.add_argument("--delta", type=float, help="orbit segment length (default: builtin value, else 0.5)")


def _params(args):
    out = {}
    items = args.param if isinstance(args.param, list) else [args.param]
    for item in items:
        for part in str(item).split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise CliError(f"expected NAME=VALUE, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = _floats(v)[0]
    if getattr(args, "eps", None) is not None:
        out["eps"] = float(args.eps)
    return out


def select_field(args):
    """Return ``(H, x0, delta, entry)`` from the field options."""
    params = _params(args)
    entry = None
    if args.expr:
        if args.d is None:
            raise CliError("--expr needs --d")
        H = parse_hamiltonian(args.expr, args.d, params, name="expr")
        m = H.m
        x0 = np.zeros(2 * m)
        x0[m] = 1.0
        delta = 0.5
    elif args.ham:
        lib = builtin_library()
        if args.ham not in lib:
            raise CliError(f"unknown Hamiltonian {args.ham!r}; available: {', '.join(lib)}")
        entry = lib[args.ham]
        try:
            H = entry.field(**params)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        x0 = entry.start.to_array()
        delta = entry.delta
    else:
        raise CliError("choose a Hamiltonian with --ham NAME or --expr TEXT --d D")
    m = H.m
    if args.q is not None:
        x0[:m] = _vector(args.q, m, "q")
    if args.p is not None:
        x0[m:] = _vector(args.p, m, "p")
    if args.delta is not None:
        delta = float(args.delta)
    if not delta > 0:
        raise CliError("delta must be positive")
    return H, x0, delta, entry


def _vector(text, m, what):
    v = _floats(text)
    if len(v) != m:
        raise CliError(f"{what} needs {m} components, got {len(v)}")
    return np.array(v)


def _tolerances(args):
    tol = {}
    if getattr(args, "tol", None) is not None:
        tol["state"] = tol["second"] = float(args.tol)
    if getattr(args, "tol_state", None) is not None:
        tol["state"] = float(args.tol_state)
    if getattr(args, "tol_second", None) is not None:
        tol["second"] = float(args.tol_second)
    return tol or None


def _add_tol_args(p):
    p.add_argument("--grid", type=int, default=11, help="verification grid size (default 11)")
    p.add_argument("--tol", type=float, help="tolerance for all conditions")
    p.add_argument("--tol-state", dest="tol_state", type=float, help="tolerance for (2), (3), (9)")
    p.add_argument("--tol-second", dest="tol_second", type=float, help="tolerance for second-derivative conditions")


def _options(args):
    if args.grid < 2:
        raise CliError("grid needs at least 2 points")
    return PipelineOptions(grid=args.grid, tolerances=_tolerances(args))


def _out_dir(args):
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_json_or_table(args, doc, table):
    if getattr(args, "json", False):
        sys.stdout.write(io.dumps(doc))
    else:
        print(table)


# ---------------------------------------------------------------- commands

def cmd_list(args):
    lib = builtin_library()
    docs = []
    for e in lib.values():
        docs.append({"name": e.name, "d": e.d, "expression": e.text, "params": dict(e.params),
                     "q0": list(e.q0), "p0": list(e.p0), "delta": e.delta, "degree": e.degree,
                     "convex": e.convex, "description": e.description})
    if args.json:
        sys.stdout.write(io.dumps(docs))
    else:
        rows = [(d["name"], d["d"], ",".join(f"{v:g}" for v in d["q0"]),
                 ",".join(f"{v:g}" for v in d["p0"]), d["delta"], d["description"]) for d in docs]
        print(io.human_table(("name", "d", "q", "p", "delta", "description"), rows))
    return EXIT_OK


def cmd_integrate(args):
    from .dynamics import integrate_orbit

    H, x0, delta, _ = select_field(args)
    T = float(args.T) if args.T is not None else delta
    orbit = integrate_orbit(H, x0, T, int(args.steps))
    text = io.orbit_csv(orbit)
    if args.out:
        io.write_csv(args.out, orbit.csv_header(), orbit.csv_rows())
        print(f"wrote {args.out}  energy drift {orbit.energy_drift():.6g}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _step_rows(result):
    rows = []
    for s in result.steps:
        if s.identity:
            rows.append((s.name, "identity", "", ""))
            continue
        worst = max(s.report.conditions, key=lambda c: c.max_residual / c.tolerance) if s.report else None
        rows.append((s.name, "applied", worst.name if worst else "", worst.max_residual if worst else ""))
    return rows


def _write_run(args, result, report_doc):
    out = _out_dir(args)
    io.write_json(out / "report.json", report_doc)
    io.write_json(out / "recipe.json", result.recipe)
    io.write_csv(out / "orbit.csv", result.orbit.csv_header(), result.orbit.csv_rows())
    steps = [{"name": s.name, "identity": s.identity, "info": s.info,
              "report": s.report.to_dict() if s.report else None} for s in result.steps]
    io.write_json(out / "steps.json", steps)
    return out


def _summary(result, report, out):
    lines = [io.report_table(report), ""]
    vals = np.abs(np.asarray(report.obstruction_values))
    status = "vanishes" if report.obstruction_vanishes else "NONZERO (cannot be removed)"
    lines.append(f"obstruction d2H/dq*dp0 on axis: max {float(vals.max()):.6g}  {status}")
    lines.append(f"expansion: f drift {report.f_drift:.6g}  w drift {report.w_drift:.6g}")
    lines.append(f"delta used {report.delta_used:.6g}  runtime {result.elapsed:.3g} s")
    lines.append("")
    lines.append(io.human_table(("step", "status", "worst condition", "residual"), _step_rows(result)))
    if out is not None:
        lines.append(f"\nwrote {out}/report.json, recipe.json, orbit.csv, steps.json")
    return "\n".join(lines)


def cmd_normalize(args):
    H, x0, delta, entry = select_field(args)
    if entry is not None and not entry.convex:
        raise CliError(f"{entry.name} is not convex; use `homog` for homogeneous fields")
    result = normal_form_pipeline(H, x0, delta, _options(args))
    doc = result.report.to_dict()
    out = _write_run(args, result, doc)
    _print_json_or_table(args, doc, _summary(result, result.report, out))
    return EXIT_OK if result.report.passed else EXIT_FAIL


def cmd_verify(args):
    path = Path(args.recipe)
    if not path.is_file():
        raise CliError(f"recipe file not found: {path}")
    doc = io.read_json(path)
    try:
        report = verify_recipe(doc, tolerances=_tolerances(args))
    except KeyError as exc:
        raise CliError(f"recipe is missing field {exc}") from exc
    rdoc = report.to_dict()
    _print_json_or_table(args, rdoc, io.report_table(report))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_obstruction(args):
    H, x0, delta, _ = select_field(args)
    t = np.linspace(0.0, delta, args.grid)
    if args.random_map:
        psi = random_admissible_map(args.seed, delta, args.random_map, d=H.d)
        H = pullback(H, psi)
    vals = obstruction(H, t)
    doc = {"grid": t, "values": vals, "vanishes": vanishes(vals)}
    rows = [(float(ti), " ".join(f"{v:.6g}" for v in row)) for ti, row in zip(t, vals)]
    table = io.human_table(("t", "d2H/dq*dp0"), rows) + f"\nvanishes: {doc['vanishes']}"
    _print_json_or_table(args, doc, table)
    return EXIT_OK


def cmd_transfer(args):
    from .transfer import linearize_transfer, mane_perturbation_experiment, origin_energy, reparam_invariance_check

    H, x0, delta, entry = select_field(args)
    if args.raw:
        Hn = H
    else:
        result = normal_form_pipeline(H, x0, delta, _options(args))
        if not result.report.passed:
            print(io.report_table(result.report), file=sys.stderr)
            return EXIT_FAIL
        Hn, delta = result.H_final, result.delta_used
    out = _out_dir(args)
    check = reparam_invariance_check(Hn, delta, args.fd_step)
    L = check.L_H
    docs = {"L_H": io.matrix_doc(L), "L_tilde": io.matrix_doc(check.L_tilde),
            "reparam_difference": check.difference, "level_residual": check.surface_residual}
    io.write_json(out / "transfer.json", docs)
    lines = [f"L_H (e = {origin_energy(Hn):.6g}, delta = {delta:.6g}):"]
    lines += ["  " + "  ".join(f"{v: .6f}" for v in row) for row in L.L]
    lines.append(f"symplecticity residual {L.symplecticity:.6g}")
    lines.append(f"||L_H - L_H~|| = {check.difference:.6g}")
    rc = EXIT_OK
    if args.experiment:
        eps = _floats(args.eps_list) if args.eps_list else [1e-3, 1e-2, 1e-1]
        res = mane_perturbation_experiment(Hn, args.experiment, eps, delta, args.fd_step)
        text = io.experiment_csv(res)
        (out / "experiment.csv").write_text(text)
        lines.append("")
        lines.append(text.rstrip("\n"))
    if args.json:
        sys.stdout.write(io.dumps(docs))
    else:
        print("\n".join(lines))
    return rc


def cmd_homog(args):
    H, x0, delta, _ = select_field(args)
    if args.degree is None:
        raise CliError("--degree is required")
    result = homogeneous_pipeline(H, x0, delta, args.degree, _options(args))
    doc = result.report.to_dict()
    doc["P0"] = result.P0
    doc["p0_drift"] = result.p0_drift
    out = _write_run(args, result, doc)
    table = _summary(result, result.report, out)
    table += f"\nP0 = {result.P0:.6g}  P0 constancy on raw orbit {result.p0_drift:.3g}"
    _print_json_or_table(args, doc, table)
    return EXIT_OK if result.report.passed else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="fibernf", description="Normal forms of convex Hamiltonians along orbits.")
    parser.add_argument("--config", help="key = value file with option defaults; flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list", help="list builtin Hamiltonians")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("integrate", help="integrate an orbit and write CSV")
    _add_field_args(p)
    p.add_argument("--T", type=float, help="integration time (default delta)")
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("normalize", help="run the normal-form pipeline")
    _add_field_args(p)
    _add_tol_args(p)
    p.add_argument("--out", default="fibernf_out", help="output directory")
    p.add_argument("--json", action="store_true", help="print the report JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("verify", help="recompute the report of a saved recipe")
    p.add_argument("recipe")
    _add_tol_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("obstruction", help="evaluate d2H/dq*dp0 on the axis")
    _add_field_args(p)
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--random-map", dest="random_map", choices=["vertical-flat", "homogeneous-blockdiag"],
                   help="pull back by a seeded random admissible map first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_obstruction)

    p = sub.add_parser("transfer", help="transfer matrices and the potential-perturbation experiment")
    _add_field_args(p, eps_param=False)
    _add_tol_args(p)
    p.add_argument("--experiment", help="potential g(q) for the perturbation experiment")
    p.add_argument("--eps", dest="eps_list", help="comma-separated perturbation sizes")
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-4)
    p.add_argument("--raw", action="store_true", help="skip the pipeline (field already normalised)")
    p.add_argument("--out", default="fibernf_out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("homog", help="normal form for momentum-homogeneous Hamiltonians")
    _add_field_args(p)
    _add_tol_args(p)
    p.add_argument("--degree", type=float, help="declared homogeneity degree")
    p.add_argument("--out", default="fibernf_out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_homog)
    return parser


_FLAGS = ("json", "raw")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        conf = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(conf) - known
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        sub.set_defaults(**{k: (_bool(v) if k in _FLAGS else v) for k, v in conf.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    except (CliError, NormalFormError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
