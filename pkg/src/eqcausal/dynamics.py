"""Integration, perfect interventions and stability probing for ODE models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .expr import ZERO, BinOp, Const, EvalError, Var, eval_expr
from .model import Model, Variable

DT = 1e-3
T_MAX = 1e3
TOL = 1e-8
OVERFLOW_GUARD = 1e12
BOX_HALF_WIDTH = 5.0
N_SAMPLES = 16
XI_SAMPLES = 5
MAX_RECORDS = 20000


class InterventionError(ValueError):
    pass


class IntegrationError(RuntimeError):
    """An evaluation error raised inside the right-hand side during integration."""

    def __init__(self, message: str, time: float, state: Mapping[str, float]):
        super().__init__(f"t={time:g}: {message}")
        self.time = time
        self.state = dict(state)


@dataclass(frozen=True)
class InterventionSpec:
    """``do(X_I = xi_I)``: ``values`` binds every member variable of every target atom.

    ``kappa`` is ``None`` for a hard intervention and the feedback gain for a
    soft one.
    """

    targets: tuple[str, ...]
    values: Mapping[str, float]
    kappa: float | None = None

    def __post_init__(self):
        if self.kappa is not None and not self.kappa > 0:
            raise InterventionError(f"kappa must be positive, got {self.kappa}")

    @property
    def mode(self) -> str:
        return "hard" if self.kappa is None else "soft"

    @classmethod
    def hard(cls, values: Mapping[str, Sequence[float] | float], model: Model) -> "InterventionSpec":
        """Build a hard intervention from ``{atom: value or member values}``."""
        return cls._build(values, model, None)

    @classmethod
    def soft(cls, values, model: Model, kappa: float) -> "InterventionSpec":
        return cls._build(values, model, kappa)

    @classmethod
    def _build(cls, values, model, kappa):
        members = model.atom_members
        bound = {}
        for atom, val in values.items():
            if atom not in members:
                raise InterventionError(f"unknown intervention target {atom!r}")
            vals = [val] if np.isscalar(val) else list(val)
            if len(vals) != len(members[atom]):
                raise InterventionError(
                    f"{atom!r} has {len(members[atom])} member(s), got {len(vals)} value(s)")
            for mem, v in zip(members[atom], vals):
                bound[mem] = float(v)
        return cls(tuple(values), bound, kappa)

    def describe(self) -> str:
        if not self.targets:
            return "do()"
        return "do(" + ", ".join(f"{t}" for t in self.targets) + ")"

    def to_json(self) -> dict:
        return {"targets": list(self.targets), "values": dict(self.values),
                "mode": self.mode, "kappa": self.kappa}


EMPTY = InterventionSpec((), {})


def _check_targets(m: Model, s: InterventionSpec) -> dict[str, tuple[str, ...]]:
    members = m.atom_members
    for t in s.targets:
        if t not in members:
            raise InterventionError(f"unknown intervention target {t!r}")
        for mem in members[t]:
            if mem not in s.values:
                raise InterventionError(f"no value for member {mem!r} of {t!r}")
    return members


def apply_hard_intervention(m: Model, s: InterventionSpec) -> Model:
    """Clamp the target atoms: zero right-hand side, init at the clamp value."""
    if s.mode != "hard":
        raise InterventionError("apply_hard_intervention needs a hard intervention")
    members = _check_targets(m, s)
    clamp = {mem: s.values[mem] for t in s.targets for mem in members[t]}
    new_vars = []
    for v in m.vars:
        if v.name in clamp:
            xi = clamp[v.name]
            if not v.lo <= xi <= v.hi:
                raise InterventionError(f"value {xi} for {v.name!r} outside [{v.lo}, {v.hi}]")
            v = Variable(v.name, v.lo, v.hi, xi)
        new_vars.append(v)
    rhs = {name: (ZERO if name in clamp else e) for name, e in m.rhs.items()}
    return m.replace(vars=tuple(new_vars), rhs=rhs, clamped=m.clamped | frozenset(clamp))


def apply_soft_intervention(m: Model, s: InterventionSpec) -> Model:
    """Add the feedback term ``kappa * (xi - x)`` to every target member's rate."""
    if s.mode != "soft":
        raise InterventionError("apply_soft_intervention needs a soft intervention")
    members = _check_targets(m, s)
    rhs = dict(m.rhs)
    for t in s.targets:
        for mem in members[t]:
            feedback = BinOp("*", Const(float(s.kappa)),
                             BinOp("-", Const(s.values[mem]), Var(mem)))
            rhs[mem] = BinOp("+", rhs[mem], feedback)
    return m.replace(rhs=rhs)


def intervene(m: Model, s: InterventionSpec) -> Model:
    return apply_hard_intervention(m, s) if s.mode == "hard" else apply_soft_intervention(m, s)


# ---------------------------------------------------------------------------
# integration


class Termination(str, Enum):
    REACHED_T_MAX = "reached-t-max"
    CONVERGED = "converged"
    DIVERGED = "diverged"
    DOMAIN_VIOLATION = "domain-violation"


_STATUS = {
    _kernels.REACHED_T_MAX: Termination.REACHED_T_MAX,
    _kernels.CONVERGED: Termination.CONVERGED,
    _kernels.DIVERGED: Termination.DIVERGED,
    _kernels.NON_FINITE: Termination.DIVERGED,
}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_samples, n_vars), columns in declaration order
    residuals: np.ndarray  # max_i |f_i| at each sample
    termination: Termination
    var_names: tuple[str, ...]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)


JIT_MIN_STEPS = 20_000  # shorter runs are cheaper interpreted than compiled


def _kernel(m: Model, n_steps: int | None = None) -> _kernels.OdeKernel:
    jit = n_steps is None or n_steps >= JIT_MIN_STEPS
    return _kernels.ode_kernel(m.rhs_list(), m.var_names, m.param_names, jit)


def rhs_vector(m: Model, x: Sequence[float]) -> np.ndarray:
    """Strict evaluation of all right-hand sides at ``x`` (declaration order)."""
    f = _kernels.strict_vector(m.rhs_list(), m.var_names, m.param_names)
    return np.array(f(list(map(float, x)), list(m.param_values)), dtype=float)


def _strict_step(m: Model, x: np.ndarray, dt: float, t: float) -> np.ndarray:
    """One RK4 step with the raising evaluator, to name a numerical failure."""
    try:
        k1 = rhs_vector(m, x)
        k2 = rhs_vector(m, x + 0.5 * dt * k1)
        k3 = rhs_vector(m, x + 0.5 * dt * k2)
        k4 = rhs_vector(m, x + dt * k3)
    except EvalError as exc:
        raise IntegrationError(str(exc), t, dict(zip(m.var_names, x))) from exc
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(m: Model, t_max: float = T_MAX, dt: float = DT, tol: float = TOL,
              x0: Sequence[float] | None = None, stop_on_converge: bool = True,
              max_records: int = MAX_RECORDS, guard: float = OVERFLOW_GUARD,
              stop_on_domain_violation: bool = False) -> Trajectory:
    """Fixed-step classic RK4 from ``m``'s init (or ``x0``).

    Samples are recorded on a regular stride so at most ``max_records`` are
    kept.  Integration stops early once the trailing window of samples (5 %
    of those recorded, at least 10) all have residual ``<= tol``, when some
    ``|x| > guard`` or when a value becomes non-finite.
    """
    if not t_max > 0 or not dt > 0:
        raise ValueError("t_max and dt must be positive")
    n_steps = max(1, int(math.ceil(t_max / dt - 1e-9)))
    record_every = max(1, int(math.ceil(n_steps / max_records)))
    n_buf = n_steps // record_every + 3
    x_start = m.init if x0 is None else np.array(x0, dtype=float)
    p = m.param_values
    t_out = np.empty(n_buf)
    x_out = np.empty((n_buf, len(x_start)))
    r_out = np.empty(n_buf)
    kernel = _kernel(m, n_steps)
    status, n_rec, step = kernel.run(x_start, p, float(dt), n_steps, record_every, float(tol),
                                     float(guard), bool(stop_on_converge), t_out, x_out, r_out)
    diagnostics = []
    if status == _kernels.NON_FINITE:
        # replay from the last recorded sample up to the failing step
        x = x_out[n_rec - 1].copy()
        t = t_out[n_rec - 1]
        for _ in range(int(round((step * dt - t) / dt))):
            x = _strict_step(m, x, dt, t)
            t += dt
        diagnostics.append(f"non-finite state at t={step * dt:g}")
    elif status == _kernels.DIVERGED:
        diagnostics.append(f"|x| exceeded {guard:g} at t={step * dt:g}")
    traj = Trajectory(t_out[:n_rec].copy(), x_out[:n_rec].copy(), r_out[:n_rec].copy(),
                      _STATUS[int(status)], m.var_names, diagnostics)
    violations = domain_violations(m, traj)
    if violations:
        traj.diagnostics.extend(violations)
        if stop_on_domain_violation:
            traj.termination = Termination.DOMAIN_VIOLATION
    return traj


def domain_violations(m: Model, traj: Trajectory) -> list[str]:
    out = []
    for j, v in enumerate(m.vars):
        col = traj.states[:, j]
        bad = np.nonzero((col < v.lo) | (col > v.hi))[0]
        if len(bad):
            out.append(f"{v.name} left [{v.lo:g}, {v.hi:g}] at t={traj.times[bad[0]]:g}")
    return out


# ---------------------------------------------------------------------------
# equilibria


class Verdict(str, Enum):
    CONVERGED = "converged"
    OSCILLATORY = "oscillatory"
    DIVERGED = "diverged"
    AMBIGUOUS = "ambiguous"


@dataclass
class EquilibriumReport:
    point: np.ndarray | None
    residual: float
    verdict: Verdict
    eigenvalues: list[complex] | None = None
    basin_samples: int = 1
    distinct_limits: int = 0
    residual_series: np.ndarray | None = None
    stable: bool | None = None  # set by probe_stability
    sample_verdicts: list[Verdict] = field(default_factory=list)
    limits: list[np.ndarray] = field(default_factory=list)
    var_names: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        if self.stable is None:
            return self.verdict.value
        return "stable (sampled)" if self.stable else "not stable"

    def to_json(self) -> dict:
        def vec(x):
            return None if x is None else dict(zip(self.var_names, map(float, x)))

        out = {
            "verdict": self.verdict.value,
            "point": vec(self.point),
            "residual": float(self.residual) if math.isfinite(self.residual) else None,
            "basin_samples": self.basin_samples,
            "distinct_limits": self.distinct_limits,
        }
        if self.eigenvalues is not None:
            out["jacobian_eigenvalues"] = [[float(z.real), float(z.imag)] for z in self.eigenvalues]
        if self.stable is not None:
            out["stable"] = self.stable
            out["label"] = self.label
            out["sample_verdicts"] = [v.value for v in self.sample_verdicts]
            out["limits"] = [vec(x) for x in self.limits]
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def _window(n: int) -> int:
    return max(10, int(math.ceil(0.05 * n)))


def classify_residuals(residuals: np.ndarray, tol: float) -> Verdict:
    n = len(residuals)
    w = _window(n)
    if n >= w and np.all(residuals[-w:] <= tol):
        return Verdict.CONVERGED
    if not np.all(np.isfinite(residuals)):
        return Verdict.DIVERGED
    if n < 2 * w:
        return Verdict.AMBIGUOUS
    trailing = float(np.max(residuals[-w:]))
    mid = n // 2
    lo = max(0, mid - w // 2)
    middle = float(np.max(residuals[lo:lo + w]))
    if trailing > tol and middle / 2.0 <= trailing <= 2.0 * middle:
        return Verdict.OSCILLATORY
    return Verdict.AMBIGUOUS


def detect_equilibrium(traj: Trajectory, m: Model, tol: float = TOL) -> EquilibriumReport:
    """Classify the tail of a trajectory.

    Converged when the residual stays ``<= tol`` over the trailing window (5 %
    of samples, at least 10); oscillatory when the trailing maximum exceeds
    ``tol`` but is within a factor 2 of the maximum over an equally long
    window in the middle; diverged when integration hit the overflow guard.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    point = traj.final
    try:
        residual = float(np.max(np.abs(rhs_vector(m, point)))) if len(point) else 0.0
    except EvalError:
        residual = math.inf
    if traj.termination is Termination.DIVERGED:
        verdict = Verdict.DIVERGED
    else:
        verdict = classify_residuals(traj.residuals, tol)
        if verdict is Verdict.CONVERGED and not residual <= tol:
            verdict = Verdict.AMBIGUOUS
    report = EquilibriumReport(
        point=point if verdict is Verdict.CONVERGED else None,
        residual=residual, verdict=verdict, residual_series=traj.residuals,
        distinct_limits=1 if verdict is Verdict.CONVERGED else 0,
        var_names=traj.var_names, notes=list(traj.diagnostics))
    if verdict is Verdict.CONVERGED and len(point):
        try:
            report.eigenvalues = list(np.linalg.eigvals(jacobian(m, point)))
        except EvalError:
            pass
    return report


def cluster_points(points: Sequence[np.ndarray], radius: float) -> list[list[int]]:
    """Single-linkage clusters (max-norm) of ``points``, ordered by first index."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.max(np.abs(points[i] - points[j])) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def sampling_box(m: Model, half_width: float = BOX_HALF_WIDTH,
                 box: Mapping[str, tuple[float, float]] | None = None) -> list[tuple[float, float]]:
    """Per-variable sampling interval: ``init +- half_width`` intersected with the domain."""
    out = []
    for v in m.vars:
        lo, hi = (box[v.name] if box and v.name in box
                  else (v.init - half_width, v.init + half_width))
        lo, hi = max(lo, v.lo), min(hi, v.hi)
        if not lo <= hi:
            raise ValueError(f"empty sampling box for {v.name!r}")
        out.append((lo, hi))
    return out


def probe_stability(m: Model, n_samples: int = N_SAMPLES, seed: int = 0, tol: float = TOL,
                    t_max: float = T_MAX, dt: float = DT,
                    box: Mapping[str, tuple[float, float]] | None = None) -> EquilibriumReport:
    """Sampled check that every initial state converges to one equilibrium.

    Clamped variables keep their clamp value; every other variable is drawn
    uniformly from :func:`sampling_box`.  The verdict can refute stability
    but only supports it on the drawn samples.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    bounds = sampling_box(m, box=box)
    rng = np.random.default_rng(seed)
    limits, verdicts, series = [], [], []
    for _ in range(n_samples):
        x0 = np.array([v.init if v.name in m.clamped else rng.uniform(lo, hi)
                       for v, (lo, hi) in zip(m.vars, bounds)])
        traj = integrate(m, t_max=t_max, dt=dt, tol=tol, x0=x0)
        rep = detect_equilibrium(traj, m, tol)
        verdicts.append(rep.verdict)
        series.append(traj.residuals)
        if rep.verdict is Verdict.CONVERGED:
            limits.append(rep.point)
    clusters = cluster_points(limits, 10 * tol)
    centers = [np.mean([limits[i] for i in c], axis=0) for c in clusters]
    all_converged = all(v is Verdict.CONVERGED for v in verdicts)
    stable = all_converged and len(clusters) == 1
    if all_converged:
        verdict = Verdict.CONVERGED
    elif any(v is Verdict.DIVERGED for v in verdicts):
        verdict = Verdict.DIVERGED
    elif any(v is Verdict.OSCILLATORY for v in verdicts):
        verdict = Verdict.OSCILLATORY
    else:
        verdict = Verdict.AMBIGUOUS
    point = centers[0] if stable else None
    residual = float(np.max(np.abs(rhs_vector(m, point)))) if point is not None else math.nan
    report = EquilibriumReport(
        point=point, residual=residual, verdict=verdict, basin_samples=n_samples,
        distinct_limits=len(clusters), stable=stable, sample_verdicts=verdicts,
        limits=centers, var_names=m.var_names)
    report.residual_series = series  # one series per sample
    if point is not None and len(point):
        report.eigenvalues = list(np.linalg.eigvals(jacobian(m, point)))
    return report


def probe_stability_wrt(m: Model, family: Iterable[Iterable[str]], xi_samples: int = XI_SAMPLES,
                        seed: int = 0, tol: float = TOL, n_samples: int = N_SAMPLES,
                        t_max: float = T_MAX, dt: float = DT,
                        xi_box: Mapping[str, tuple[float, float]] | None = None,
                        ) -> dict[frozenset, dict]:
    """Probe stability of ``m`` under hard interventions on each target set.

    For each target set ``I``, ``xi_samples`` clamp values are drawn from the
    sampling box (``xi_box`` overrides intervals per member variable) and the
    intervened model is probed with :func:`probe_stability`.  The verdict for
    ``I`` is stable only if every draw is.
    """
    rng = np.random.default_rng(seed)
    members = m.atom_members
    bounds = dict(zip(m.var_names, sampling_box(m, box=xi_box)))
    out = {}
    for targets in family:
        targets = tuple(targets)
        key = frozenset(targets)
        draws = []
        n_draws = 1 if not targets else xi_samples
        for k in range(n_draws):
            values = {t: [rng.uniform(*bounds[mem]) for mem in members[t]] for t in targets}
            s = InterventionSpec.hard(values, m)
            sub_seed = int(rng.integers(2**31))
            rep = probe_stability(apply_hard_intervention(m, s), n_samples=n_samples,
                                  seed=sub_seed, tol=tol, t_max=t_max, dt=dt)
            draws.append({"xi": dict(s.values), "stable": rep.stable,
                          "verdict": rep.verdict.value,
                          "limit": None if rep.point is None
                          else dict(zip(m.var_names, map(float, rep.point)))})
        out[key] = {"stable": all(d["stable"] for d in draws), "draws": draws}
    return out


def jacobian(m: Model, x: Sequence[float]) -> np.ndarray:
    """Central finite-difference Jacobian, step ``max(1e-6, 1e-6 |x_j|)``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    J = np.empty((n, n))
    for j in range(n):
        h = max(1e-6, 1e-6 * abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (rhs_vector(m, xp) - rhs_vector(m, xm)) / (2 * h)
    return J


def state_dict(m: Model, x: Sequence[float]) -> dict[str, float]:
    return dict(zip(m.var_names, map(float, x)))


def eval_rhs(m: Model, x: Mapping[str, float]) -> dict[str, float]:
    return {v: eval_expr(m.rhs[v], m.params, x) for v in m.var_names}
