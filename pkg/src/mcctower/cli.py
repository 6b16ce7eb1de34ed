"""Command line interface: ``python -m mcctower <command> ...``.

Exit codes: 0 success, 2 invalid input or spec, 3 numerical failure,
4 no stabilizing scale found by ``deflate``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import jsonschema

from . import __version__
from .closed_sets import SignedClosedSet
from .critical_sequences import SequenceSpec, SolverFailure, generate_sequence
from .deflation import EnvelopeViolation, NoStabilizingScale, classify_profile, scan
from .logdomain import (
    BracketError,
    SampledRadialFunction,
    dirichlet_energy_with_error,
    make_uniform_grid,
    orlicz_exp_l2_norm,
)
from .tm_functional import NONLINEARITIES
from .towers import (
    build_tower,
    design_level,
    energy_closed_form,
    energy_report,
    export_csv,
)

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC, EXIT_NOT_FOUND = 0, 2, 3, 4

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

SET_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "intervals": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "properties": {"t_lo": _POS, "t_hi": _POS, "sign": {"enum": [-1, 1]}},
                        "required": ["t_lo", "t_hi", "sign"],
                        "additionalProperties": False,
                    },
                },
                "generator": {"type": "object"},
            },
            "required": ["intervals"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "constructor": {"const": "cantor"},
                "t_lo": _POS, "t_hi": _POS,
                "depth": {"type": "integer", "minimum": 0},
                "coords": {"enum": ["t", "r"]},
            },
            "required": ["constructor", "t_lo", "t_hi", "depth"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "constructor": {"const": "points"},
                "t": {"type": "array", "items": _POS, "minItems": 1},
                "sign": {"type": "array", "items": {"enum": [-1, 1]}},
            },
            "required": ["constructor", "t"],
            "additionalProperties": False,
        },
    ]
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "set": SET_SCHEMA,
        "nonlinearity": {"enum": sorted(NONLINEARITIES)},
        "scales": {"type": "array", "items": _POS, "minItems": 1},
        "rho_probes": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                   "exclusiveMaximum": 1}},
        "epsilon_schedule": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                         "exclusiveMaximum": 1}},
        "boundary_scale_exponent": _POS,
        "margin": _POS,
        "base_h": _POS,
        "gluing": {"enum": ["level", "cutoff"]},
    },
    "required": ["set", "scales"],
    "additionalProperties": False,
}

ENERGY_REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "set_term": _NUM,
        "same_sign": {"type": "array", "items": _NUM},
        "sign_change": {"type": "array", "items": _NUM},
        "total": _NUM,
        "quadrature_total": _NUM,
        "rel_err": _NUM,
    },
    "required": ["set_term", "same_sign", "sign_change", "total"],
    "additionalProperties": False,
}

DIAGNOSTICS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "s": _POS, "s_requested": _POS, "J": _NUM, "target": _NUM,
            "ap_residual": _NUM, "ap_residual_deflated": _NUM, "nonlinear_mass": _NUM,
            "dirichlet": _NUM, "grad_v_sq": _NUM, "orlicz_remainder": _NUM,
            "mass_fraction": {"type": "array", "items": _NUM},
            "newton_max_residual": _NUM, "converged": {"type": "boolean"},
            "n_nodes": {"type": "integer"}, "stage": {"type": "integer"},
            "epsilon": _NUM, "kappa": _NUM, "stage_target": _NUM,
        },
        "required": ["s", "J", "target", "ap_residual", "nonlinear_mass", "grad_v_sq",
                     "orlicz_remainder", "mass_fraction"],
        "additionalProperties": False,
    },
}

DEFLATE_SCHEMA = {
    "type": "object",
    "properties": {
        "s_hat": {"type": "array", "items": _POS},
        "cauchy_scores": {"type": "array", "items": _NUM},
        "profile_csv": {"type": ["string", "null"]},
        "residual": {"type": ["number", "null"]},
        "accepted": {"type": "boolean"},
        "reason": {"type": "string"},
        "energy": {"type": ["number", "null"]},
        "set": SET_SCHEMA,
    },
    "required": ["s_hat", "profile_csv", "residual", "accepted"],
    "additionalProperties": False,
}

PROFILE_ENERGY_SCHEMA = {
    "type": "object",
    "properties": {"total": _NUM, "error_estimate": _NUM},
    "required": ["total", "error_estimate"],
    "additionalProperties": False,
}

ORLICZ_SCHEMA = {
    "type": "object",
    "properties": {"norm": _NUM, "scale": _POS, "path": {"type": "string"}},
    "required": ["norm", "scale"],
    "additionalProperties": False,
}

DESIGN_SCHEMA = {
    "type": "object",
    "properties": {"set": SET_SCHEMA, "n": {"type": "integer"}, "level": _NUM,
                   "energy": _NUM, "roundtrip_error": _NUM},
    "required": ["set", "n", "level", "energy", "roundtrip_error"],
    "additionalProperties": False,
}


class SpecError(ValueError):
    """Invalid input file or parameters (exit code 2)."""


def _load_json(path: str, schema: dict):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        raise SpecError(f"{path}: {exc.message}") from None
    return data


def _load_set(path: str) -> SignedClosedSet:
    # a bare set, or any report carrying one under "set" (design --out, deflate --out)
    data = _load_json(path, {"oneOf": [SET_SCHEMA, {"type": "object", "properties": {"set": SET_SCHEMA},
                                                     "required": ["set"]}]})
    if "set" in data:
        data = data["set"]
    try:
        return SignedClosedSet.from_json(data)
    except ValueError as exc:
        raise SpecError(f"{path}: {exc}") from None


def _load_profile(path: str) -> SampledRadialFunction:
    try:
        return SampledRadialFunction.from_csv(path)
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc.strerror or exc}") from None
    except (ValueError, KeyError) as exc:
        raise SpecError(f"{path}: {exc}") from None


def atomic_write(path, text: str) -> None:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_csv(u: SampledRadialFunction, path, **kw) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        u.to_csv(tmp, **kw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, payload, schema: dict, out_path=None, summary: str = "") -> None:
    jsonschema.validate(payload, schema)
    text = json.dumps(payload, indent=2)
    if out_path:
        atomic_write(out_path, text + "\n")
    if args.json:
        print(text)
    elif summary and not args.quiet:
        print(summary)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _grid_for(tower, args):
    t_max = args.grid_tmax if args.grid_tmax is not None else 2.0 * tower.t_deepest + 10.0
    if t_max <= tower.t_deepest:
        raise SpecError(f"--grid-tmax must exceed the deepest set point t={tower.t_deepest:g}")
    return make_uniform_grid(t_max, args.grid_n).with_points(tower.kinks)


# -- commands ------------------------------------------------------------------------


def cmd_tower(args) -> int:
    cset = _load_set(args.set)
    tower = build_tower(cset)
    grid = _grid_for(tower, args)
    if args.out:
        export_csv(tower, grid, args.out)
    report = energy_report(tower, grid)
    _emit(args, report, ENERGY_REPORT_SCHEMA, args.report,
          f"energy {_fmt(report['total'])} (quadrature {_fmt(report['quadrature_total'])}, "
          f"rel err {report['rel_err']:.2e})")
    return EXIT_OK


def cmd_design(args) -> int:
    try:
        cset = design_level(args.n, args.level, args.t_outer)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    e = energy_closed_form(build_tower(cset)).total
    payload = {"set": cset.to_json(), "n": args.n, "level": args.level, "energy": e,
               "roundtrip_error": abs(e - args.level)}
    pts = ", ".join(_fmt(c.t_lo) for c in cset.components)
    _emit(args, payload, DESIGN_SCHEMA, args.out,
          f"t-points {{{pts}}}; energy {_fmt(e)} (round-trip error {abs(e - args.level):.2e})")
    return EXIT_OK


def cmd_critseq(args) -> int:
    data = _load_json(args.spec, RUN_SCHEMA)
    if args.nonlinearity and "nonlinearity" not in data:
        data["nonlinearity"] = args.nonlinearity
    try:
        spec = SequenceSpec.from_json(data)
        result = generate_sequence(spec, keep_profiles=bool(args.profiles_dir or args.iterates_dir))
    except SolverFailure:
        raise
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    payload = result.to_json()
    for k, (s, blow) in enumerate(result.profiles.items()):
        if args.profiles_dir:
            _atomic_csv(blow.deflate(), Path(args.profiles_dir) / f"profile_{k:03d}_s{s:.6g}.csv")
        if args.iterates_dir:
            _atomic_csv(blow.materialize(), Path(args.iterates_dir) / f"iterate_{k:03d}_s{s:.6g}.csv")
    last = result.entries[-1]
    verdict = "within 1e-2" if last.gap <= 1e-2 else f"off by {last.gap:.3g}"
    _emit(args, payload, DIAGNOSTICS_SCHEMA, args.out,
          f"target {_fmt(last.target)}, achieved J={_fmt(last.J)} at s={_fmt(last.s)} ({verdict})")
    return EXIT_OK


def _iterate_paths(items) -> list[str]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(str(q) for q in p.glob("*.csv"))
        else:
            paths.append(str(p))
    if not paths:
        raise SpecError("no iterate CSV files given")
    return paths


def cmd_deflate(args) -> int:
    iterates = [_load_profile(p) for p in _iterate_paths(args.iterates)]
    if len(iterates) < 3:
        raise SpecError("deflation needs at least 3 iterates")
    result = scan(iterates, tuple(args.window))
    payload = {"s_hat": result.s_hat, "cauchy_scores": result.cauchy_scores,
               "profile_csv": args.profile_csv, "residual": None, "accepted": False}
    if args.profile_csv:
        _atomic_csv(result.profile, args.profile_csv)
    try:
        cl = classify_profile(result.profile, contact_tol=args.contact_tol,
                              fit_tol=args.fit_tol, envelope_tol=args.envelope_tol)
    except EnvelopeViolation as exc:
        payload["reason"] = str(exc)
    else:
        payload["accepted"] = cl.accepted
        payload["residual"] = cl.residual if math.isfinite(cl.residual) else None
        payload["reason"] = cl.reason
        if cl.accepted:
            payload["set"] = cl.set.to_json()
            payload["energy"] = cl.energy
    found = payload.get("set")
    summary = (f"s_hat {_fmt(result.s_hat[-1])}; "
               + (f"{len(found['intervals'])} component(s), residual {payload['residual']:.2e}"
                  if found else f"profile rejected: {payload.get('reason', '')}"))
    _emit(args, payload, DEFLATE_SCHEMA, args.out, summary)
    return EXIT_OK


def cmd_orlicz(args) -> int:
    u = _load_profile(args.profile)
    norm = orlicz_exp_l2_norm(u, scale=args.scale)
    _emit(args, {"norm": norm, "scale": args.scale, "path": args.profile}, ORLICZ_SCHEMA,
          args.out, f"exp-L2 Orlicz norm {_fmt(norm)}")
    return EXIT_OK


def cmd_energy(args) -> int:
    if bool(args.set) == bool(args.profile):
        raise SpecError("give exactly one of --set or --profile")
    if args.set:
        tower = build_tower(_load_set(args.set))
        report = energy_report(tower, _grid_for(tower, args))
    else:
        e, err = dirichlet_energy_with_error(_load_profile(args.profile))
        report = {"total": e, "error_estimate": err}
        _emit(args, report, PROFILE_ENERGY_SCHEMA, args.out,
              f"energy {_fmt(e)} (Richardson error estimate {err:.2e})")
        return EXIT_OK
    _emit(args, report, ENERGY_REPORT_SCHEMA, args.out, f"energy {_fmt(report['total'])}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grid-tmax", type=float, default=None,
                        help="t-extent of sampling grids (default 2*deepest+10)")
    common.add_argument("--grid-n", type=int, default=2**18 + 1, help="nodes of sampling grids")
    common.add_argument("--nonlinearity", choices=sorted(NONLINEARITIES), default=None,
                        help="nonlinearity g (default: the sequence file's, else model)")
    common.add_argument("--json", action="store_true", help="print the JSON result")
    common.add_argument("--quiet", action="store_true", help="suppress the summary line")

    parser = argparse.ArgumentParser(prog="mcctower", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tower", parents=[common], help="sample a tower and report its energy")
    p.add_argument("--set", required=True)
    p.add_argument("--out", help="profile CSV")
    p.add_argument("--report", help="energy report JSON")
    p.set_defaults(func=cmd_tower)

    p = sub.add_parser("design", parents=[common], help="n points with prescribed energy")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--t-outer", type=float, default=1.0)
    p.add_argument("--out", help="set JSON")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("critseq", parents=[common], help="generate a critical sequence")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", help="diagnostics JSON")
    p.add_argument("--profiles-dir", help="write the deflated profile mu + v per scale here")
    p.add_argument("--iterates-dir", help="write the blown-up iterates u_s per scale here")
    p.set_defaults(func=cmd_critseq)

    p = sub.add_parser("deflate", parents=[common], help="recover scale and set from iterates")
    p.add_argument("--iterates", nargs="+", required=True, help="CSV files or directories")
    p.add_argument("--window", type=float, nargs=2, default=(0.1, 10.0), metavar=("LO", "HI"))
    p.add_argument("--contact-tol", type=float, default=1e-4)
    p.add_argument("--fit-tol", type=float, default=1e-3)
    p.add_argument("--envelope-tol", type=float, default=1e-6,
                   help="allowed envelope excess; raise only for perturbed inputs")
    p.add_argument("--profile-csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_deflate)

    p = sub.add_parser("orlicz", parents=[common], help="exp-L2 Orlicz norm of a profile")
    p.add_argument("--profile", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_orlicz)

    p = sub.add_parser("energy", parents=[common], help="Dirichlet energy of a set or a profile")
    p.add_argument("--set")
    p.add_argument("--profile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_energy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SPEC if exc.code else EXIT_OK
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except NoStabilizingScale as exc:
        print(f"no stabilizing scale: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (SolverFailure, BracketError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
