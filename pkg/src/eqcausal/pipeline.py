"""End-to-end checks across ODE, LEE and SCM representations, plus bundled models."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import (
    DT, T_MAX, TOL, InterventionSpec, Verdict, apply_hard_intervention, detect_equilibrium,
    integrate,
)
from .lee import DYNAMICS_TOL, N_STARTS, check_theorem1, derive_lee, intervene_lee
from .model import Model, parse_model
from .scm import (
    FUNCTION_TOL, GRID_POINTS, XI_SAMPLES, StructuralFn, check_lemma1,
    check_structural_solvability, induce_scm, solve_scm,
)

MODELS_DIR = Path(__file__).parent / "models"
MODEL_PATH_ENV = "EQCAUSAL_MODELS"

SAMPLED_PREMISES = ("structural stability of the original and intervened ODE is checked "
                    "on sampled clamp values only; a pass holds relative to those samples")


# ---------------------------------------------------------------------------
# catalog


def _real(x: float) -> str:
    return repr(float(x))


def lotka_volterra_model(t11: float = 1.0, t12: float = 1.0, t21: float = 1.0,
                         t22: float = 1.0, a: float = 1.0, b: float = 0.5) -> Model:
    """Predator-prey model on ``[0, inf)^2`` starting at ``(a, b)``."""
    for name, v in (("t11", t11), ("t12", t12), ("t21", t21), ("t22", t22)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if a < 0 or b < 0:
        raise ValueError("initial abundances must be non-negative")
    return parse_model(lotka_volterra_source(t11, t12, t21, t22, a, b))


def lotka_volterra_source(t11, t12, t21, t22, a, b, name="lotka_volterra") -> str:
    return "\n".join([
        f"model {name}",
        "# prey X1, predators X2",
        f"param t11 = {_real(t11)}",
        f"param t12 = {_real(t12)}",
        f"param t21 = {_real(t21)}",
        f"param t22 = {_real(t22)}",
        f"var X1 in [0, inf] init {_real(a)}",
        f"var X2 in [0, inf] init {_real(b)}",
        "ddt X1 = X1 * (t11 - t12 * X2)",
        "ddt X2 = -X2 * (t22 - t21 * X1)",
    ]) + "\n"


def _broadcast(values, n: int, what: str) -> list[float]:
    if np.isscalar(values):
        return [float(values)] * n
    values = [float(v) for v in values]
    if len(values) != n:
        raise ValueError(f"{what}: expected {n} values, got {len(values)}")
    return values


def mass_spring_source(D: int, k=1.0, l=1.0, b=1.0, m=1.0, L: float | None = None,
                       q0: Sequence[float] | None = None, name: str | None = None) -> str:
    if D < 1:
        raise ValueError("D must be at least 1")
    k = _broadcast(k, D + 1, "spring constants k_0..k_D")
    l = _broadcast(l, D + 1, "rest lengths l_0..l_D")
    b = _broadcast(b, D, "frictions b_1..b_D")
    m = _broadcast(m, D, "masses m_1..m_D")
    if min(k) <= 0 or min(b) <= 0 or min(m) <= 0:
        raise ValueError("spring constants, frictions and masses must be positive")
    L = float(D + 1) if L is None else float(L)
    if q0 is None:
        q0 = [i * L / (D + 2) for i in range(1, D + 1)]
    q0 = _broadcast(q0, D, "initial positions")
    lines = [f"model {name or f'mass_spring_d{D}'}",
             f"# {D} masses between walls at 0 and L; atom X_i = (Q_i, P_i)"]
    lines += [f"param k{i} = {_real(v)}" for i, v in enumerate(k)]
    lines += [f"param l{i} = {_real(v)}" for i, v in enumerate(l)]
    lines += [f"param b{i} = {_real(v)}" for i, v in enumerate(b, start=1)]
    lines += [f"param m{i} = {_real(v)}" for i, v in enumerate(m, start=1)]
    lines.append(f"param L = {_real(L)}")
    for i in range(1, D + 1):
        lines.append(f"var Q{i} in [-inf, inf] init {_real(q0[i - 1])}")
        lines.append(f"var P{i} in [-inf, inf] init 0.0")
    for i in range(1, D + 1):
        lines.append(f"group X{i} = (Q{i}, P{i})")
    for i in range(1, D + 1):
        right = "L" if i == D else f"Q{i + 1}"
        left = f"Q{i - 1}" if i > 1 else "0"
        lines.append(f"ddt Q{i} = P{i} / m{i}")
        lines.append(f"ddt P{i} = k{i} * ({right} - Q{i} - l{i}) "
                     f"- k{i - 1} * (Q{i} - {left} - l{i - 1}) - b{i} / m{i} * P{i}")
    return "\n".join(lines) + "\n"


def mass_spring_model(D: int, k=1.0, l=1.0, b=1.0, m=1.0, L: float | None = None,
                      q0: Sequence[float] | None = None) -> Model:
    """Chain of ``D`` damped masses; scalars broadcast to every spring/mass."""
    return parse_model(mass_spring_source(D, k, l, b, m, L, q0))


def model_search_path() -> list[Path]:
    extra = [Path(p) for p in os.environ.get(MODEL_PATH_ENV, "").split(os.pathsep) if p]
    return extra + [MODELS_DIR]


def resolve_model_path(ref: str | os.PathLike) -> Path:
    """Find a model file by path, then relative to each search directory, then by name."""
    ref = Path(ref)
    if ref.is_file():
        return ref
    for base in model_search_path():
        for cand in (base / ref, base / ref.name, base / f"{ref.name}.mdl"):
            if cand.is_file():
                return cand
    raise FileNotFoundError(f"model file {str(ref)!r} not found")


def load_model(ref: str | os.PathLike) -> Model:
    return parse_model(resolve_model_path(ref).read_text(encoding="utf-8"))


def bundled_models() -> dict[str, Model]:
    return {p.stem: parse_model(p.read_text(encoding="utf-8"))
            for p in sorted(MODELS_DIR.glob("*.mdl"))}


# ---------------------------------------------------------------------------
# diagram verification


@dataclass
class Settings:
    dt: float = DT
    t_max: float = T_MAX
    tol: float = TOL
    n_starts: int = N_STARTS
    xi_samples: int = XI_SAMPLES
    grid_points: int = GRID_POINTS
    seed: int = 0
    function_tol: float = FUNCTION_TOL
    dynamics_tol: float = DYNAMICS_TOL


@dataclass
class Comparison:
    name: str
    passed: bool
    deviation: float | None = None
    tolerance: float | None = None
    detail: str = ""


@dataclass
class DiagramReport:
    model: str
    intervention: dict
    edges: dict[str, dict] = field(default_factory=dict)
    comparisons: list[Comparison] = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    caveat: str = SAMPLED_PREMISES

    @property
    def passed(self) -> bool:
        return (all(c.passed for c in self.comparisons)
                and all(e["ok"] for e in self.edges.values()))

    def comparison(self, name: str) -> Comparison:
        for c in self.comparisons:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list[str]:
        out = [f"edge {k}: {e.get('detail', '')}" for k, e in self.edges.items() if not e["ok"]]
        out += [f"{c.name}: {c.detail}" for c in self.comparisons if not c.passed]
        return out

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "intervention": self.intervention,
            "verdict": "pass" if self.passed else "fail",
            "edges": self.edges,
            "comparisons": [asdict(c) for c in self.comparisons],
            "settings": self.settings,
            "caveat": self.caveat,
        }


def _vec_dev(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if len(a) else 0.0


def verify_diagram(m: Model, s: InterventionSpec, settings: Settings | None = None) -> DiagramReport:
    """Walk both paths from the ODE to the intervened SCM and compare the results.

    Structural comparisons are exact, structural functions are compared to
    ``function_tol`` and anything involving integration to ``dynamics_tol``.
    Structural-solvability failures are reported as failed edges.
    """
    st = settings or Settings()
    report = DiagramReport(m.name, s.to_json(), settings=asdict(st))
    lee = derive_lee(m)
    lee_do = intervene_lee(lee, s)
    intervened = apply_hard_intervention(m, s)
    report.edges["ode->lee"] = {"ok": True, "detail": f"{len(lee.labels)} labeled equations"}
    report.edges["ode->ode_do"] = {"ok": True, "detail": s.describe()}

    thm1 = check_theorem1(m, s, tol=st.dynamics_tol, n_starts=st.n_starts, seed=st.seed,
                          t_max=st.t_max, dt=st.dt)
    report.comparisons.append(Comparison(
        "thm1_structural", thm1.structural_equal, None, 0.0,
        "; ".join(d for d in thm1.differences if not d.startswith("intervened ODE"))))
    if thm1.ode_converged:
        report.comparisons.append(Comparison(
            "thm1_solution",
            thm1.max_deviation is not None and thm1.max_deviation <= st.dynamics_tol,
            thm1.max_deviation, st.dynamics_tol,
            f"intervened ODE equilibrium vs intervened LEE solution ({thm1.lee_verdict})"))

    scm = scm_do = None
    for key, source in (("lee->scm", lee), ("lee_do->scm_do", lee_do)):
        solv = check_structural_solvability(source, st.xi_samples, st.seed)
        if solv.solvable:
            built = induce_scm(source, check=False, source={"model": m.name})
            report.edges[key] = {"ok": True, "detail": "structurally solvable (sampled)",
                                 "solvability": solv.to_json()}
            if key == "lee->scm":
                scm = built
            else:
                scm_do = built
        else:
            bad = solv.failures[0]
            report.edges[key] = {"ok": False, "solvability": solv.to_json(),
                                 "detail": f"not structurally solvable at atom {bad.atom}"
                                           f" (witness {bad.witness})"}

    if scm is not None:
        report.edges["scm->scm_do"] = {"ok": True, "detail": s.describe()}
    if scm is not None and scm_do is not None:
        lemma = check_lemma1(lee, s, n_points=st.grid_points, seed=st.seed,
                             tol=st.function_tol, n_starts=st.n_starts)
        report.comparisons.append(Comparison(
            "lemma1_structural", lemma.structural_equal and lemma.function_deviation is not None
            and lemma.function_deviation <= st.function_tol, lemma.function_deviation,
            st.function_tol, "; ".join(lemma.differences)))
        report.comparisons.append(Comparison(
            "lemma1_solution", lemma.solution_deviation is not None
            and lemma.solution_deviation <= st.function_tol, lemma.solution_deviation,
            st.function_tol, "SCM solutions vs intervened LEE solution"))

        traj = integrate(intervened, t_max=st.t_max, dt=st.dt, tol=st.tol)
        eq = detect_equilibrium(traj, intervened, st.tol)
        if eq.verdict is Verdict.CONVERGED:
            sol = solve_scm(scm_do, st.n_starts, st.seed)
            if sol.verdict == "unique":
                dev = _vec_dev(sol.solution, eq.point)
                report.comparisons.append(Comparison(
                    "thm2_solution", dev <= st.dynamics_tol, dev, st.dynamics_tol,
                    "intervened ODE equilibrium vs solution of the induced intervened SCM"))
            else:
                report.comparisons.append(Comparison(
                    "thm2_solution", False, None, st.dynamics_tol,
                    f"induced intervened SCM is {sol.verdict}"))
        else:
            report.edges["ode_do equilibrium"] = {
                "ok": True, "detail": f"intervened ODE {eq.verdict.value}; "
                                      "equilibrium comparison skipped"}
    else:
        report.comparisons.append(Comparison(
            "lemma1_structural", False, None, st.function_tol,
            "induced SCM unavailable: structural solvability failed"))
    return report


def verify_batch(m: Model, interventions: Sequence[InterventionSpec],
                 settings: Settings | None = None) -> list[DiagramReport]:
    return [verify_diagram(m, s, settings) for s in interventions]


# ---------------------------------------------------------------------------
# mass-spring position equation


def mass_spring_position_check(m: Model, n_points: int = GRID_POINTS, seed: int = 0) -> dict:
    """Compare the numerically induced ``h_i`` with two candidate closed forms.

    Both candidates share the numerator ``k_i (Q_{i+1} - l_i) + k_{i-1}
    (Q_{i-1} + l_{i-1})``; the denominators are ``k_{i-1} + k_i`` (from
    solving the equilibrium force balance for ``Q_i``) and ``k_i + k_{i+1}``.
    ``h_i`` is evaluated through the implicit (solve-on-demand) route so the
    comparison does not reuse the affine closed form.
    """
    lee = derive_lee(m)
    params = lee.params
    D = len(lee.labels)
    k = [params[f"k{i}"] for i in range(D + 1)]
    l = [params[f"l{i}"] for i in range(D + 1)]
    L = params["L"]
    rng = np.random.default_rng(seed)
    atoms = {}
    for i in range(1, D + 1):
        label = f"X{i}"
        h = StructuralFn(label, lee.members[label], lee.parents[label] - {label}, "implicit",
                         lee=lee)
        dev_a, dev_b = 0.0, 0.0 if i < D else None
        for _ in range(n_points):
            state = {v.name: float(rng.uniform(-L, 2 * L)) for v in lee.vars}
            q_prev = 0.0 if i == 1 else state[f"Q{i - 1}"]
            q_next = L if i == D else state[f"Q{i + 1}"]
            num = k[i] * (q_next - l[i]) + k[i - 1] * (q_prev + l[i - 1])
            q_h = h(state)[0]
            dev_a = max(dev_a, abs(q_h - num / (k[i - 1] + k[i])))
            if i < D:
                dev_b = max(dev_b, abs(q_h - num / (k[i] + k[i + 1])))
        atoms[label] = {"neighbor_springs": dev_a, "next_springs": dev_b}
    worst_a = max(a["neighbor_springs"] for a in atoms.values())
    next_devs = [a["next_springs"] for a in atoms.values() if a["next_springs"] is not None]
    worst_b = max(next_devs) if next_devs else None
    return {
        "atoms": atoms,
        "max_deviation": {"k_{i-1} + k_i": worst_a, "k_i + k_{i+1}": worst_b},
        "agrees": {"k_{i-1} + k_i": worst_a <= FUNCTION_TOL,
                   "k_i + k_{i+1}": worst_b is not None and worst_b <= FUNCTION_TOL},
        "grid_points": n_points,
        "seed": seed,
    }
