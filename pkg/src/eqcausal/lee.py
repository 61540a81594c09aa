"""Labeled equilibrium equations: derivation, intervention and solving."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .dynamics import (
    TOL as DYN_TOL, InterventionError, InterventionSpec, Verdict,
    apply_hard_intervention, cluster_points, detect_equilibrium, integrate,
)
from .expr import BinOp, Const, EvalError, Expr, Var, parse_expr, to_string, variables
from .model import Model, Variable

N_STARTS = 32
SOLVE_TOL = 1e-10
BOX_HALF_WIDTH = 5.0
MAX_HALVINGS = 30
MAX_ITER = 100
DYNAMICS_TOL = 1e-5


@dataclass(frozen=True)
class LEE:
    """One labeled residual block ``0 = g_i`` per atom ``i``.

    ``equations[i]`` holds one scalar residual per member variable of ``i``;
    ``vars`` carries domains and the reference point used to seed solvers.
    """

    labels: tuple[str, ...]
    members: Mapping[str, tuple[str, ...]]
    equations: Mapping[str, tuple[Expr, ...]]
    params: Mapping[str, float]
    vars: tuple[Variable, ...]

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vars)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.params)

    @property
    def atom_of(self) -> dict[str, str]:
        return {m: a for a, ms in self.members.items() for m in ms}

    @property
    def parents(self) -> dict[str, frozenset]:
        owner = self.atom_of
        out = {}
        for label in self.labels:
            refs = set()
            for g in self.equations[label]:
                refs |= variables(g)
            out[label] = frozenset(owner[r] for r in refs)
        return out

    def residual_exprs(self) -> list[Expr]:
        return [g for label in self.labels for g in self.equations[label]]

    def residual_function(self) -> Callable[[Sequence[float]], list]:
        f = _kernels.strict_vector(self.residual_exprs(), self.var_names, self.param_names)
        p = [float(self.params[k]) for k in self.params]
        return lambda x: f(x, p)

    def with_equations(self, equations: Mapping[str, tuple[Expr, ...]],
                       vars: tuple[Variable, ...] | None = None) -> "LEE":
        return LEE(self.labels, self.members, dict(equations), self.params,
                   self.vars if vars is None else vars)

    def to_json(self) -> dict:
        pa = self.parents
        return {
            "labels": list(self.labels),
            "equations": {k: [to_string(g) for g in self.equations[k]] for k in self.labels},
            "parents": {k: sorted(pa[k], key=self.labels.index) for k in self.labels},
            "members": {k: list(self.members[k]) for k in self.labels},
            "params": dict(self.params),
            "variables": {v.name: {"domain": [v.lo, v.hi], "init": v.init} for v in self.vars},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "LEE":
        params = {k: float(v) for k, v in data["params"].items()}
        vars_ = tuple(Variable(n, float(d["domain"][0]), float(d["domain"][1]), float(d["init"]))
                      for n, d in data["variables"].items())
        names = [v.name for v in vars_]
        labels = tuple(data["labels"])
        equations = {k: tuple(parse_expr(s, params, names) for s in data["equations"][k])
                     for k in labels}
        return cls(labels, {k: tuple(data["members"][k]) for k in labels}, equations,
                   params, vars_)


def clamp_residual(var: str, value: float) -> Expr:
    """Canonical clamp equation ``0 = x - xi``."""
    return BinOp("-", Var(var), Const(float(value)))


def derive_lee(m: Model) -> LEE:
    """Set every rate to zero and keep the atom labels.

    Clamped variables (from a hard intervention) contribute the canonical
    clamp residual ``x - xi`` rather than the literal ``0``, so an intervened
    model and an intervened LEE produce identical equations.
    """
    members = m.atom_members
    equations = {}
    for atom, mems in members.items():
        equations[atom] = tuple(
            clamp_residual(v, m.variable(v).init) if v in m.clamped else m.rhs[v]
            for v in mems)
    return LEE(tuple(members), members, equations, dict(m.params), m.vars)


def intervene_lee(e: LEE, s: InterventionSpec) -> LEE:
    """Replace the labeled equations of the targets by clamp residuals."""
    if s.mode != "hard":
        raise InterventionError("LEE interventions are hard interventions")
    equations = dict(e.equations)
    clamp = {}
    for t in s.targets:
        if t not in e.members:
            raise InterventionError(f"unknown label {t!r}")
        for mem in e.members[t]:
            if mem not in s.values:
                raise InterventionError(f"no value for member {mem!r} of {t!r}")
            clamp[mem] = s.values[mem]
        equations[t] = tuple(clamp_residual(mem, s.values[mem]) for mem in e.members[t])
    new_vars = []
    for v in e.vars:
        if v.name in clamp:
            xi = clamp[v.name]
            if not v.lo <= xi <= v.hi:
                raise InterventionError(f"value {xi} for {v.name!r} outside [{v.lo}, {v.hi}]")
            v = Variable(v.name, v.lo, v.hi, xi)
        new_vars.append(v)
    return e.with_equations(equations, tuple(new_vars))


def degenerate_labels(e: LEE) -> list[str]:
    """Labels none of whose members occurs in any equation."""
    used = set()
    for g in e.residual_exprs():
        used |= variables(g)
    return [k for k in e.labels if not (set(e.members[k]) & used)]


# ---------------------------------------------------------------------------
# Newton machinery


@dataclass
class NewtonResult:
    x: np.ndarray
    residual: float
    converged: bool
    iterations: int
    singular_steps: int
    message: str = ""


def _max_abs(r) -> float:
    return max((abs(v) for v in r), default=0.0)


def _safe(F, x):
    try:
        r = F(x)
    except (EvalError, OverflowError, ValueError):
        return None
    if not all(math.isfinite(v) for v in r):
        return None
    return r


def fd_jacobian(F, x: np.ndarray, r0=None) -> np.ndarray:
    n = len(x)
    m = len(r0) if r0 is not None else len(F(x))
    J = np.empty((m, n))
    for j in range(n):
        h = max(1e-6, 1e-6 * abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        rp, rm = F(list(xp)), F(list(xm))
        J[:, j] = (np.asarray(rp) - np.asarray(rm)) / (2 * h)
    return J


def newton(F, x0: Sequence[float], tol: float, max_iter: int = MAX_ITER,
           max_halvings: int = MAX_HALVINGS, polish: int = 2) -> NewtonResult:
    """Damped Newton on a square system with a finite-difference Jacobian.

    The step is halved (up to ``max_halvings`` times) until the residual
    2-norm decreases.  Once ``max|F| <= tol`` a few extra steps are taken if
    they keep reducing the residual, which tightens the clustering of
    solutions from different starts.
    """
    x = np.array(x0, dtype=float)
    r = _safe(F, list(x))
    if r is None:
        return NewtonResult(x, math.inf, False, 0, 0, "residual not evaluable at start")
    singular = 0
    polished = 0
    for it in range(max_iter + polish + 1):
        res = _max_abs(r)
        if res <= tol:
            if polished >= polish or res == 0.0:
                return NewtonResult(x, res, True, it, singular)
            polished += 1
        elif it >= max_iter:
            break
        try:
            J = fd_jacobian(F, x, r)
        except (EvalError, OverflowError, ValueError):
            return NewtonResult(x, res, res <= tol, it, singular, "Jacobian not evaluable")
        rv = np.asarray(r, dtype=float)
        try:
            dx = np.linalg.solve(J, -rv)
            if not np.all(np.isfinite(dx)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            singular += 1
            dx = np.linalg.lstsq(J, -rv, rcond=None)[0]
        norm0 = float(np.dot(rv, rv))
        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            xn = x + step * dx
            rn = _safe(F, list(xn))
            if rn is not None:
                rnv = np.asarray(rn, dtype=float)
                if float(np.dot(rnv, rnv)) < norm0:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            return NewtonResult(x, res, res <= tol, it, singular,
                                "no decrease along the Newton direction")
        x, r = xn, rn
    res = _max_abs(r)
    return NewtonResult(x, res, res <= tol, max_iter, singular, "iteration limit")


@dataclass
class SolveReport:
    solutions: list[np.ndarray]
    starts: int
    converged_starts: int
    residuals: list[float]
    verdict: str  # unique | multiple | none-found
    support: list[int] = field(default_factory=list)
    var_names: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    @property
    def solution(self) -> np.ndarray:
        if self.verdict != "unique":
            raise ValueError(f"no unique solution (verdict {self.verdict})")
        return self.solutions[0]

    def solution_dict(self) -> dict[str, float]:
        return dict(zip(self.var_names, map(float, self.solution)))

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "solutions": [dict(zip(self.var_names, map(float, x))) for x in self.solutions],
            "residuals": [float(r) for r in self.residuals],
            "support": list(self.support),
            "starts": self.starts,
            "converged_starts": self.converged_starts,
            "notes": list(self.notes),
        }


def start_points(vars_: Sequence[Variable], n: int, seed: int,
                 half_width: float = BOX_HALF_WIDTH) -> list[np.ndarray]:
    """Seeded starts: the reference point first, the rest uniform in ``init +- half_width``."""
    rng = np.random.default_rng(seed)
    lo = np.array([max(v.lo, v.init - half_width) for v in vars_])
    hi = np.array([min(v.hi, v.init + half_width) for v in vars_])
    pts = [np.array([v.init for v in vars_], dtype=float)]
    while len(pts) < n:
        pts.append(rng.uniform(lo, hi))
    return pts[:n]


def in_domain(vars_: Sequence[Variable], x: np.ndarray, slack: float = 1e-9) -> bool:
    return all(v.lo - slack * max(1.0, abs(v.lo)) <= xi <= v.hi + slack * max(1.0, abs(v.hi))
               for v, xi in zip(vars_, x))


def multistart_solve(F, vars_: Sequence[Variable], n_starts: int, seed: int, tol: float,
                     starts: Sequence[np.ndarray] | None = None) -> SolveReport:
    """Run :func:`newton` from seeded starts and cluster the roots (radius ``10 tol``)."""
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    names = tuple(v.name for v in vars_)
    if starts is None:
        starts = start_points(vars_, n_starts, seed)
    roots, residuals = [], []
    singular_everywhere = True
    outside = 0
    for x0 in starts:
        result = newton(F, x0, tol)
        if result.singular_steps < max(result.iterations, 1):
            singular_everywhere = False
        if not result.converged:
            continue
        if not in_domain(vars_, result.x):
            outside += 1
            continue
        roots.append(result.x)
        residuals.append(result.residual)
    clusters = cluster_points(roots, 10 * tol)
    solutions, sol_res, support = [], [], []
    for c in clusters:
        best = min(c, key=lambda i: residuals[i])
        solutions.append(roots[best])
        sol_res.append(residuals[best])
        support.append(len(c))
    order = sorted(range(len(solutions)), key=lambda k: tuple(solutions[k]))
    solutions = [solutions[k] for k in order]
    sol_res = [sol_res[k] for k in order]
    support = [support[k] for k in order]
    notes = []
    if outside:
        notes.append(f"{outside} root(s) outside the declared domains discarded")
    if len(solutions) == 1 and 2 * support[0] >= len(starts):
        verdict = "unique"
    elif len(solutions) > 1:
        verdict = "multiple"
    else:
        verdict = "none-found"
        if solutions:
            notes.append(f"only {support[0]} of {len(starts)} starts reached the single root")
        elif singular_everywhere:
            notes.append("Jacobian singular at every iterate of every start")
    return SolveReport(solutions, len(starts), len(roots), sol_res, verdict, support,
                       names, notes)


def solve_lee(e: LEE, n_starts: int = N_STARTS, seed: int = 0,
              tol: float = SOLVE_TOL) -> SolveReport:
    """Multi-start damped Newton on the stacked residuals of ``e``."""
    report = multistart_solve(e.residual_function(), e.vars, n_starts, seed, tol)
    for label in degenerate_labels(e):
        report.notes.append(f"{label!r} occurs in no equation; its value is undetermined")
        if report.verdict == "unique":
            report.verdict = "multiple"
    return report


# ---------------------------------------------------------------------------
# commutation of intervention and derivation


@dataclass
class Theorem1Report:
    structural_equal: bool
    differences: list[str]
    ode_converged: bool
    lee_verdict: str
    max_deviation: float | None
    passed: bool
    equilibrium: dict | None = None
    lee_solution: dict | None = None

    def __bool__(self) -> bool:
        return self.passed

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "structural_equal": self.structural_equal,
            "differences": list(self.differences),
            "ode_converged": self.ode_converged,
            "lee_verdict": self.lee_verdict,
            "max_deviation": self.max_deviation,
            "equilibrium": self.equilibrium,
            "lee_solution": self.lee_solution,
        }


def compare_lees(a: LEE, b: LEE) -> list[str]:
    """Structural differences between two LEEs (labels, equations, parents)."""
    diffs = []
    if a.labels != b.labels:
        diffs.append(f"labels differ: {a.labels} vs {b.labels}")
        return diffs
    pa, pb = a.parents, b.parents
    for k in a.labels:
        if a.equations[k] != b.equations[k]:
            diffs.append(f"equation {k}: {[to_string(g) for g in a.equations[k]]} "
                         f"vs {[to_string(g) for g in b.equations[k]]}")
        if pa[k] != pb[k]:
            diffs.append(f"parents {k}: {sorted(pa[k])} vs {sorted(pb[k])}")
    return diffs


def check_theorem1(m: Model, s: InterventionSpec, tol: float = DYNAMICS_TOL,
                   n_starts: int = N_STARTS, seed: int = 0, t_max: float = 1e3,
                   dt: float = 1e-3) -> Theorem1Report:
    """Intervening on the derived LEE equals deriving the LEE of the intervened ODE.

    When the intervened ODE converges from its initial state, its equilibrium
    must also match the unique solution of the intervened LEE within ``tol``.
    """
    via_lee = intervene_lee(derive_lee(m), s)
    intervened = apply_hard_intervention(m, s)
    via_ode = derive_lee(intervened)
    diffs = compare_lees(via_lee, via_ode)
    traj = integrate(intervened, t_max=t_max, dt=dt, tol=DYN_TOL)
    eq = detect_equilibrium(traj, intervened, DYN_TOL)
    converged = eq.verdict is Verdict.CONVERGED
    sol = solve_lee(via_lee, n_starts=n_starts, seed=seed)
    deviation = None
    passed = not diffs
    equilibrium = lee_solution = None
    if converged:
        equilibrium = dict(zip(m.var_names, map(float, eq.point)))
        if sol.verdict == "unique":
            deviation = float(np.max(np.abs(sol.solution - eq.point)))
            lee_solution = sol.solution_dict()
            passed = passed and deviation <= tol
        else:
            passed = False
            diffs.append(f"intervened ODE converged but intervened LEE is {sol.verdict}")
    return Theorem1Report(not compare_lees(via_lee, via_ode), diffs, converged, sol.verdict,
                          deviation, passed, equilibrium, lee_solution)
