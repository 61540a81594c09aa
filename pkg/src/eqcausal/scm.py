"""Deterministic structural causal models induced by labeled equilibrium equations.

The structural function of atom ``i`` is the value of ``X_i`` solving the
LEE when every other atom is clamped.  When the residual block of ``i`` is
affine in the members of ``i`` with a parameter-only, nonsingular coefficient
matrix, the function is produced in closed form; otherwise it is evaluated
on demand by Newton's method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .dynamics import InterventionError, InterventionSpec
from .expr import (
    ZERO, BinOp, Const, EvalError, Expr, Var, affine_decompose, eval_expr, simplify,
    to_string, variables,
)
from .lee import (
    LEE, N_STARTS, SOLVE_TOL, SolveReport, intervene_lee, multistart_solve, solve_lee,
)
from .model import CausalGraph, Variable

XI_SAMPLES = 8
IMPLICIT_STARTS = 8
FUNCTION_TOL = 1e-8
GRID_POINTS = 20
SINGULAR_RCOND = 1e-12


class StructuralSolvabilityError(ValueError):
    """Raised when an atom's equation does not determine it uniquely."""

    def __init__(self, atom: str, witness: Mapping[str, float] | None, reason: str):
        self.atom = atom
        self.witness = dict(witness) if witness is not None else None
        where = f" at {self.witness}" if self.witness else ""
        super().__init__(f"atom {atom!r} not structurally solvable{where}: {reason}")


# ---------------------------------------------------------------------------
# affine structure of one residual block


@dataclass(frozen=True)
class AffineBlock:
    """``g_i = A x_i + c`` with ``A`` and ``c`` free of the members ``x_i``."""

    coefficients: tuple[tuple[Expr, ...], ...]
    offset: tuple[Expr, ...]

    @property
    def constant(self) -> bool:
        return not any(variables(a) for row in self.coefficients for a in row)

    def matrix(self, params: Mapping[str, float], state: Mapping[str, float] | None = None):
        state = state or {}
        return np.array([[eval_expr(a, params, state) for a in row]
                         for row in self.coefficients], dtype=float)


def affine_block(e: LEE, label: str) -> AffineBlock | None:
    members = e.members[label]
    rows, offsets = [], []
    for g in e.equations[label]:
        dec = affine_decompose(g, members)
        if dec is None:
            return None
        coeffs, offset = dec
        rows.append(tuple(simplify(coeffs.get(v, ZERO)) for v in members))
        offsets.append(simplify(offset))
    return AffineBlock(tuple(rows), tuple(offsets))


def _singular(A: np.ndarray) -> bool:
    if A.size == 0:
        return False
    s = np.linalg.svd(A, compute_uv=False)
    return not s[-1] > SINGULAR_RCOND * max(s[0], 1.0)


def closed_form(block: AffineBlock, params: Mapping[str, float]) -> tuple[Expr, ...]:
    """``x_i = -A^{-1} c`` as expressions in the other atoms' variables."""
    inv = np.linalg.inv(block.matrix(params))
    out = []
    for k in range(inv.shape[0]):
        total: Expr = ZERO
        for j, c in enumerate(block.offset):
            coef = -float(inv[k, j])
            if coef == 0.0:
                continue
            term = simplify(BinOp("*", Const(coef), c))
            total = term if total == ZERO else BinOp("+", total, term)
        out.append(simplify(total))
    return tuple(out)


# ---------------------------------------------------------------------------
# structural functions


@dataclass(frozen=True)
class StructuralFn:
    """``X_target = h(X_parents)``; ``parents`` never contains ``target``."""

    target: str
    members: tuple[str, ...]
    parents: frozenset
    kind: str  # "closed" | "implicit"
    exprs: tuple[Expr, ...] | None = None
    lee: LEE | None = field(default=None, compare=False, repr=False)
    n_starts: int = IMPLICIT_STARTS
    seed: int = 0
    tol: float = SOLVE_TOL

    def __call__(self, values: Mapping[str, float]) -> tuple[float, ...]:
        if self.kind == "closed":
            params = self.lee.params if self.lee is not None else {}
            return tuple(eval_expr(g, params, values) for g in self.exprs)
        return self._solve(values)

    def _solve(self, values: Mapping[str, float]) -> tuple[float, ...]:
        e = self.lee
        members = self.members
        others = [v for v in e.var_names if v not in members]
        f = _kernels.strict_vector(e.equations[self.target], list(members) + others,
                                   e.param_names)
        p = [float(e.params[k]) for k in e.params]
        tail = [float(values.get(v, e_init)) for v, e_init in
                ((v, _init(e, v)) for v in others)]
        member_vars = [v for v in e.vars if v.name in members]
        report = multistart_solve(lambda x: f(list(x) + tail, p), member_vars,
                                  self.n_starts, self.seed, self.tol)
        if report.verdict != "unique":
            witness = {v: values[v] for v in others if v in values}
            raise StructuralSolvabilityError(
                self.target, witness, f"equation has {report.verdict} solution(s)")
        return tuple(float(x) for x in report.solutions[0])

    def to_json(self, source: Mapping | None = None) -> dict:
        out = {"kind": self.kind, "members": list(self.members),
               "parents": sorted(self.parents)}
        if self.kind == "closed":
            out["expr"] = [to_string(g) for g in self.exprs]
        else:
            out["source"] = dict(source or {})
            out["source"]["intervention_template"] = f"do(all atoms except {self.target})"
            out["target"] = self.target
        return out


def _init(e: LEE, name: str) -> float:
    for v in e.vars:
        if v.name == name:
            return v.init
    raise KeyError(name)


@dataclass(frozen=True)
class SCM:
    atoms: tuple[str, ...]
    members: Mapping[str, tuple[str, ...]]
    functions: Mapping[str, StructuralFn]
    vars: tuple[Variable, ...]
    params: Mapping[str, float]
    source: Mapping = field(default_factory=dict, compare=False)

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vars)

    @property
    def parents(self) -> dict[str, frozenset]:
        return {a: self.functions[a].parents for a in self.atoms}

    @property
    def graph(self) -> CausalGraph:
        return CausalGraph.from_parents(self.atoms, self.parents)

    def evaluate(self, atom: str, values: Mapping[str, float]) -> tuple[float, ...]:
        return self.functions[atom](values)

    def constant_components(self) -> dict[str, dict[str, float]]:
        """Members whose closed-form ``h`` component is a literal constant, per atom."""
        out = {}
        for a in self.atoms:
            fn = self.functions[a]
            if fn.kind != "closed":
                continue
            fixed = {mem: g.value for mem, g in zip(fn.members, fn.exprs) if isinstance(g, Const)}
            if fixed:
                out[a] = fixed
        return out

    def projection(self) -> dict[str, tuple[str, ...]]:
        """Per atom, the members left after dropping identically-constant components."""
        const = self.constant_components()
        return {a: tuple(m for m in self.members[a] if m not in const.get(a, {}))
                for a in self.atoms}

    def to_json(self) -> dict:
        return {
            "atoms": list(self.atoms),
            "parents": {a: sorted(self.functions[a].parents, key=self.atoms.index)
                        for a in self.atoms},
            "functions": {a: self.functions[a].to_json(self.source) for a in self.atoms},
            "constant_components": self.constant_components(),
        }


def missing_self_dependence(e: LEE) -> list[str]:
    """Labels whose equation does not mention the label's own members (lint)."""
    return [a for a in e.labels if a not in e.parents[a]]


# ---------------------------------------------------------------------------
# structural solvability


@dataclass
class AtomSolvability:
    atom: str
    solvable: bool
    method: str  # affine-constant | affine-witness | sampled
    witness: dict | None = None
    failures: list[dict] = field(default_factory=list)
    note: str = ""

    def to_json(self) -> dict:
        return {"solvable": self.solvable, "method": self.method, "witness": self.witness,
                "failures": self.failures, "note": self.note}


@dataclass
class SolvabilityReport:
    atoms: dict[str, AtomSolvability]

    @property
    def solvable(self) -> bool:
        return all(a.solvable for a in self.atoms.values())

    def __bool__(self) -> bool:
        return self.solvable

    @property
    def failures(self) -> list[AtomSolvability]:
        return [a for a in self.atoms.values() if not a.solvable]

    def to_json(self) -> dict:
        return {"structurally_solvable": self.solvable,
                "atoms": {k: v.to_json() for k, v in self.atoms.items()}}


def _box(v: Variable, half_width: float = 5.0) -> tuple[float, float]:
    return max(v.lo, v.init - half_width), min(v.hi, v.init + half_width)


def _singular_witness(e: LEE, label: str, block: AffineBlock, seed: int,
                      n_starts: int = 8) -> dict | None:
    """Search the other atoms' values for a point where the block's matrix is singular."""
    others = sorted(set().union(*(variables(a) for row in block.coefficients for a in row)),
                    key=e.var_names.index)
    by_name = {v.name: v for v in e.vars}
    base = {v.name: v.init for v in e.vars}

    def det_at(x) -> float:
        state = dict(base)
        state.update(zip(others, x))
        A = block.matrix(e.params, state)
        return float(np.linalg.det(A))

    rng = np.random.default_rng(seed)
    boxes = [_box(by_name[v]) for v in others]
    scale = max(1.0, max(abs(det_at([b[0] for b in boxes])), abs(det_at([b[1] for b in boxes]))))
    for k in range(n_starts):
        x = np.array([rng.uniform(lo, hi) for lo, hi in boxes])
        try:
            for _ in range(60):
                d = det_at(x)
                if abs(d) <= 1e-13 * scale:
                    break
                grad = np.empty(len(x))
                for j in range(len(x)):
                    h = max(1e-6, 1e-6 * abs(x[j]))
                    xp, xm = x.copy(), x.copy()
                    xp[j] += h
                    xm[j] -= h
                    grad[j] = (det_at(xp) - det_at(xm)) / (2 * h)
                g2 = float(np.dot(grad, grad))
                if g2 == 0.0:
                    break
                step = 1.0
                for _ in range(30):
                    xn = x - step * d * grad / g2
                    if abs(det_at(xn)) < abs(d):
                        break
                    step *= 0.5
                else:
                    break
                x = xn
        except (EvalError, ValueError):
            continue
        inside = all(lo - 1e-9 <= xi <= hi + 1e-9 for xi, (lo, hi) in zip(x, boxes))
        if inside and abs(det_at(x)) <= 1e-13 * scale:
            return dict(zip(others, map(float, x)))
    return None


def check_structural_solvability(e: LEE, xi_samples: int = XI_SAMPLES,
                                 seed: int = 0) -> SolvabilityReport:
    """Is every atom uniquely determined when all other atoms are clamped?

    Affine blocks with parameter-only coefficients are decided exactly.  For
    affine blocks whose coefficients depend on other atoms, a point where the
    coefficient matrix is singular is searched for and, if found, refutes
    solvability at that clamp value.  Everything else is checked on
    ``xi_samples`` seeded clamp values.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for label in e.labels:
        members = e.members[label]
        block = affine_block(e, label)
        if block is not None and block.constant:
            A = block.matrix(e.params)
            if _singular(A):
                witness = {v.name: v.init for v in e.vars if v.name not in members}
                out[label] = AtomSolvability(label, False, "affine-constant", witness,
                                             note="coefficient matrix is singular")
            else:
                out[label] = AtomSolvability(label, True, "affine-constant")
            continue
        if block is not None:
            witness = _singular_witness(e, label, block, int(rng.integers(2**31)))
            if witness is not None:
                out[label] = AtomSolvability(
                    label, False, "affine-witness", witness,
                    note="coefficient matrix singular: no solution or a family of solutions")
                continue
        fn = StructuralFn(label, members, frozenset(), "implicit", lee=e)
        failures = []
        others = [v for v in e.vars if v.name not in members]
        for _ in range(xi_samples):
            xi = {v.name: float(rng.uniform(*_box(v))) for v in others}
            try:
                fn(xi)
            except StructuralSolvabilityError as exc:
                failures.append({"xi": xi, "reason": str(exc)})
        out[label] = AtomSolvability(label, not failures, "sampled",
                                     failures[0]["xi"] if failures else None, failures)
    return SolvabilityReport(out)


def induce_scm(e: LEE, check: bool = True, xi_samples: int = XI_SAMPLES, seed: int = 0,
               source: Mapping | None = None) -> SCM:
    """Build the SCM whose structural equations are equivalent to ``e``'s labeled equations.

    Raises :class:`StructuralSolvabilityError` naming the first failing atom
    and its witness unless ``check`` is False.
    """
    if check:
        report = check_structural_solvability(e, xi_samples, seed)
        for a in report.failures:
            raise StructuralSolvabilityError(a.atom, a.witness, a.note or "sampled failure")
    pa_e = e.parents
    functions = {}
    for label in e.labels:
        members = e.members[label]
        parents = pa_e[label] - {label}
        block = affine_block(e, label)
        if block is not None and block.constant and not _singular(block.matrix(e.params)):
            functions[label] = StructuralFn(label, members, parents, "closed",
                                            closed_form(block, e.params), lee=e)
        else:
            functions[label] = StructuralFn(label, members, parents, "implicit", lee=e)
    return SCM(e.labels, dict(e.members), functions, e.vars, e.params, dict(source or {}))


def constant_fn(atom: str, members: Sequence[str], values: Sequence[float], lee=None):
    return StructuralFn(atom, tuple(members), frozenset(), "closed",
                        tuple(Const(float(v)) for v in values), lee=lee)


def intervene_scm(M: SCM, s: InterventionSpec) -> SCM:
    """Replace the structural functions of the targets by their clamp values."""
    if s.mode != "hard":
        raise InterventionError("SCM interventions are hard interventions")
    functions = dict(M.functions)
    new_vars = {v.name: v for v in M.vars}
    for t in s.targets:
        if t not in M.members:
            raise InterventionError(f"unknown target {t!r}")
        vals = []
        for mem in M.members[t]:
            if mem not in s.values:
                raise InterventionError(f"no value for member {mem!r} of {t!r}")
            vals.append(s.values[mem])
            v = new_vars[mem]
            new_vars[mem] = Variable(v.name, v.lo, v.hi, s.values[mem])
        functions[t] = constant_fn(t, M.members[t], vals, M.functions[t].lee)
    return SCM(M.atoms, M.members, functions, tuple(new_vars[v.name] for v in M.vars),
               M.params, M.source)


# ---------------------------------------------------------------------------
# solving


def topological_order(M: SCM) -> list[str] | None:
    try:
        return list(TopologicalSorter({a: set(M.functions[a].parents) for a in M.atoms})
                    .static_order())
    except CycleError:
        return None


def scm_residual_function(M: SCM):
    names = M.var_names

    def F(x):
        state = dict(zip(names, x))
        out = {}
        for a in M.atoms:
            for mem, val in zip(M.members[a], M.functions[a](state)):
                out[mem] = state[mem] - val
        return [out[n] for n in names]

    return F


def scm_to_lee(M: SCM) -> LEE:
    """Canonical embedding ``0 = h_i(X_pa) - X_i`` of a closed-form SCM.

    Implicit structural functions have no expression to embed and raise
    ``ValueError``; their captured LEE is the natural preimage.
    """
    equations = {}
    for a in M.atoms:
        fn = M.functions[a]
        if fn.kind != "closed":
            raise ValueError(f"structural function of {a!r} is implicit")
        equations[a] = tuple(BinOp("-", h, Var(mem)) for mem, h in zip(fn.members, fn.exprs))
    return LEE(M.atoms, dict(M.members), equations, dict(M.params), M.vars)


def solve_scm(M: SCM, n_starts: int = N_STARTS, seed: int = 0,
              tol: float = SOLVE_TOL) -> SolveReport:
    """Substitution in topological order when acyclic, multi-start Newton otherwise."""
    order = topological_order(M)
    names = M.var_names
    if order is not None:
        state = {v.name: v.init for v in M.vars}
        try:
            for a in order:
                state.update(zip(M.members[a], M.functions[a](state)))
        except (EvalError, StructuralSolvabilityError) as exc:
            return SolveReport([], 1, 0, [], "none-found", [], names, [str(exc)])
        x = np.array([state[n] for n in names])
        res = max((abs(r) for r in scm_residual_function(M)(list(x))), default=0.0)
        return SolveReport([x], 1, 1, [res], "unique", [1], names,
                           ["acyclic: solved by substitution"])
    return multistart_solve(scm_residual_function(M), M.vars, n_starts, seed, tol)


# ---------------------------------------------------------------------------
# equivalence checks


def parent_grid(M: SCM, atom: str, n_points: int, rng) -> list[dict]:
    """Random values for all variables (parents included), from the standard box."""
    pts = []
    for _ in range(n_points):
        pts.append({v.name: float(rng.uniform(*_box(v))) for v in M.vars})
    return pts


def compare_scms(a: SCM, b: SCM, n_points: int = GRID_POINTS, seed: int = 0,
                 tol: float = FUNCTION_TOL) -> tuple[list[str], float]:
    """Structural differences (atoms, parents) and max functional deviation on a grid."""
    diffs = []
    if a.atoms != b.atoms:
        return [f"atoms differ: {a.atoms} vs {b.atoms}"], math.inf
    rng = np.random.default_rng(seed)
    worst = 0.0
    for atom in a.atoms:
        fa, fb = a.functions[atom], b.functions[atom]
        if fa.parents != fb.parents:
            diffs.append(f"parents of {atom}: {sorted(fa.parents)} vs {sorted(fb.parents)}")
        for point in parent_grid(a, atom, n_points, rng):
            try:
                va, vb = np.array(fa(point)), np.array(fb(point))
            except (EvalError, StructuralSolvabilityError) as exc:
                diffs.append(f"h_{atom} not evaluable: {exc}")
                worst = math.inf
                break
            worst = max(worst, float(np.max(np.abs(va - vb))) if len(va) else 0.0)
    if worst > tol:
        diffs.append(f"structural functions differ by {worst:.3g} > {tol:g}")
    return diffs, worst


@dataclass
class Lemma1Report:
    passed: bool
    structural_equal: bool
    function_deviation: float | None
    solution_deviation: float | None
    differences: list[str]
    solutions: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed

    def to_json(self) -> dict:
        return {"passed": self.passed, "structural_equal": self.structural_equal,
                "function_deviation": self.function_deviation,
                "solution_deviation": self.solution_deviation,
                "differences": list(self.differences), "solutions": self.solutions}


def check_lemma1(e: LEE, s: InterventionSpec, n_points: int = GRID_POINTS, seed: int = 0,
                 tol: float = FUNCTION_TOL, n_starts: int = N_STARTS) -> Lemma1Report:
    """Intervening on the induced SCM equals inducing the SCM of the intervened LEE.

    Functions are compared on ``n_points`` seeded points; the solutions of both
    SCMs are compared with the solution of the intervened LEE.
    """
    intervened = intervene_lee(e, s)
    try:
        left = intervene_scm(induce_scm(e, seed=seed), s)
        right = induce_scm(intervened, seed=seed)
    except StructuralSolvabilityError as exc:
        return Lemma1Report(False, False, None, None, [str(exc)])
    diffs, worst = compare_scms(left, right, n_points, seed, tol)
    structural = not any(d.startswith(("atoms", "parents")) for d in diffs)
    sols = {"scm_intervened": solve_scm(left, n_starts, seed),
            "scm_induced": solve_scm(right, n_starts, seed),
            "lee": solve_lee(intervened, n_starts, seed)}
    sol_dev = None
    if all(r.verdict == "unique" for r in sols.values()):
        ref = sols["lee"].solution
        sol_dev = max(float(np.max(np.abs(r.solution - ref))) for r in sols.values())
        if sol_dev > tol:
            diffs.append(f"solutions differ by {sol_dev:.3g}")
    else:
        verdicts = {k: r.verdict for k, r in sols.items()}
        if len(set(verdicts.values())) > 1:
            diffs.append(f"solvability differs: {verdicts}")
    passed = not diffs
    return Lemma1Report(passed, structural, worst, sol_dev, diffs,
                        {k: r.to_json() for k, r in sols.items()})


def equation_equivalence(e: LEE, M: SCM, n_states: int = 50, seed: int = 0,
                         tol: float = FUNCTION_TOL) -> dict[str, dict]:
    """Check ``0 = g_i(X)`` iff ``X_i = h_i(X_pa)`` atom by atom.

    Each random state is tested as drawn (where typically both sides fail)
    and with ``X_i`` moved onto ``h_i`` (where both must hold).
    """
    rng = np.random.default_rng(seed)
    params = e.params
    out = {}
    for atom in e.labels:
        mismatches = 0
        worst_on_manifold = 0.0
        for _ in range(n_states):
            state = {v.name: float(rng.uniform(*_box(v))) for v in e.vars}
            for project in (False, True):
                if project:
                    state = dict(state)
                    state.update(zip(e.members[atom], M.functions[atom](state)))
                g = [eval_expr(r, params, state) for r in e.equations[atom]]
                h = M.functions[atom](state)
                lhs = max(abs(v) for v in g) <= tol
                rhs = max(abs(state[m] - v) for m, v in zip(e.members[atom], h)) <= tol
                if project:
                    worst_on_manifold = max(worst_on_manifold, max(abs(v) for v in g))
                if lhs != rhs:
                    mismatches += 1
        out[atom] = {"holds": mismatches == 0, "mismatches": mismatches,
                     "max_residual_on_h": worst_on_manifold}
    return out
