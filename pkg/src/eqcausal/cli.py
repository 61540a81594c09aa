"""Command-line front end; every report is deterministic JSON with an explicit seed."""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
from typing import Sequence

from .dynamics import (
    DT, N_SAMPLES, T_MAX, TOL, IntegrationError, InterventionError, InterventionSpec,
    detect_equilibrium, integrate, intervene, probe_stability,
)
from .expr import ExprError
from .lee import N_STARTS, derive_lee, intervene_lee, solve_lee
from .model import Model, format_model
from .pipeline import Settings, load_model, verify_diagram
from .scm import check_structural_solvability, induce_scm

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_CLAUSE = re.compile(r"\s*([A-Za-z_]\w*)\s*=\s*(\([^()]*\)|[^,()]+)\s*(?:,|$)")


def parse_do_clause(text: str, model: Model, kappa: float | None = None) -> InterventionSpec:
    """Parse ``"X2=2.0"`` or ``"X2=(1.7,0), X3=1"`` into an intervention on ``model``."""
    values: dict[str, list[float]] = {}
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _CLAUSE.match(text, pos)
        if not m or m.end() == pos:
            raise InterventionError(f"cannot parse do-clause at {text[pos:]!r}")
        atom, raw = m.group(1), m.group(2).strip()
        if atom in values:
            raise InterventionError(f"atom {atom!r} assigned twice")
        parts = raw[1:-1].split(",") if raw.startswith("(") else [raw]
        try:
            values[atom] = [float(p) for p in parts]
        except ValueError:
            raise InterventionError(f"bad value {raw!r} for {atom!r}") from None
        pos = m.end()
    if not values:
        raise InterventionError("empty do-clause")
    unwrap = {a: (v[0] if len(v) == 1 and len(model.atom_members.get(a, ())) == 1 else v)
              for a, v in values.items()}
    if kappa is None:
        return InterventionSpec.hard(unwrap, model)
    return InterventionSpec.soft(unwrap, model, kappa)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqcausal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("simulate", "integrate and emit the trajectory"),
        ("equilibrium", "integrate and classify the end state"),
        ("intervene", "print the intervened model file"),
        ("lee", "derive labeled equilibrium equations"),
        ("scm", "induce the structural causal model"),
        ("solve", "solve the labeled equilibrium equations"),
        ("probe", "sampled stability probe"),
        ("verify", "check that intervention and derivation commute"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--model", required=True, help="model file or bundled model name")
        sp.add_argument("--do", action="append", default=[], metavar="CLAUSE",
                        help='intervention such as "X2=2" or "X2=(1.7,0)"')
        sp.add_argument("--kappa", type=float, default=None, help="soft intervention gain")
        sp.add_argument("--dt", type=float, default=DT)
        sp.add_argument("--t-max", type=float, default=T_MAX)
        sp.add_argument("--tol", type=float, default=TOL)
        sp.add_argument("--starts", type=int, default=N_STARTS)
        sp.add_argument("--samples", type=int, default=N_SAMPLES)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--format", choices=("json", "csv"), default=None)
        sp.add_argument("--out", default=None, help="output path (default stdout)")
    return p


def _header(args, model: Model, spec: InterventionSpec | None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "model": model.name,
        "seed": args.seed,
        "settings": {"dt": args.dt, "t_max": args.t_max, "tol": args.tol, "kappa": args.kappa,
                     "starts": args.starts, "samples": args.samples},
        "intervention": spec.to_json() if spec is not None else None,
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _trajectory_csv(traj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *traj.var_names])
    for t, x in zip(traj.times, traj.states):
        w.writerow([repr(float(t)), *(repr(float(v)) for v in x)])
    return buf.getvalue()


def _run(args) -> tuple[str, int]:
    model = load_model(args.model)
    specs = [parse_do_clause(c, model, args.kappa) for c in args.do]
    spec = specs[0] if specs else None
    if len(specs) > 1 and args.command != "verify":
        raise InterventionError("several --do clauses are only accepted by verify; "
                                "combine targets in one clause instead")
    target = intervene(model, spec) if spec is not None else model
    head = _header(args, model, spec)
    cmd = args.command

    if cmd == "intervene":
        if spec is None:
            raise InterventionError("intervene needs --do")
        return format_model(target), EXIT_OK
    if cmd == "simulate":
        traj = integrate(target, t_max=args.t_max, dt=args.dt, tol=args.tol)
        if args.format == "json":
            head.update(termination=traj.termination.value, var_names=list(traj.var_names),
                        times=traj.times.tolist(), states=traj.states.tolist())
            return dumps(head), EXIT_OK
        return _trajectory_csv(traj), EXIT_OK
    if cmd == "equilibrium":
        traj = integrate(target, t_max=args.t_max, dt=args.dt, tol=args.tol)
        head["report"] = detect_equilibrium(traj, target, args.tol).to_json()
        head["termination"] = traj.termination.value
        return dumps(head), EXIT_OK
    if cmd == "probe":
        rep = probe_stability(target, n_samples=args.samples, seed=args.seed, tol=args.tol,
                              t_max=args.t_max, dt=args.dt)
        head["report"] = rep.to_json()
        return dumps(head), EXIT_OK

    if spec is not None and spec.mode == "soft" and cmd in ("lee", "scm", "solve", "verify"):
        raise InterventionError(f"{cmd} supports hard interventions only")
    lee = derive_lee(model)
    if spec is not None:
        lee = intervene_lee(lee, spec)
    if cmd == "lee":
        head["lee"] = lee.to_json()
        return dumps(head), EXIT_OK
    if cmd == "solve":
        head["report"] = solve_lee(lee, n_starts=args.starts, seed=args.seed).to_json()
        return dumps(head), EXIT_OK
    if cmd == "scm":
        solv = check_structural_solvability(lee, seed=args.seed)
        head["solvability"] = solv.to_json()
        if not solv.solvable:
            return dumps(head), EXIT_FAIL
        head["scm"] = induce_scm(lee, check=False, source={"model": model.name}).to_json()
        return dumps(head), EXIT_OK
    if cmd == "verify":
        if not specs:
            raise InterventionError("verify needs at least one --do")
        settings = Settings(dt=args.dt, t_max=args.t_max, tol=args.tol, n_starts=args.starts,
                            seed=args.seed)
        reports = [verify_diagram(model, s, settings) for s in specs]
        head["reports"] = [r.to_json() for r in reports]
        head["verdict"] = "pass" if all(r.passed for r in reports) else "fail"
        return dumps(head), EXIT_OK if head["verdict"] == "pass" else EXIT_FAIL
    raise AssertionError(cmd)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        text, code = _run(args)
    except (FileNotFoundError, ExprError, InterventionError, ValueError) as exc:
        print(f"eqcausal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrationError as exc:
        print(f"eqcausal: integration failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
