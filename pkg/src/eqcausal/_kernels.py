"""Compiled evaluation of expression vectors.

Two flavours are generated from the same expression trees:

* strict vector functions (plain Python) that raise ``DomainError`` on
  singular input, used by the equation solvers and the Jacobian;
* an RK4 integration loop with IEEE semantics, jitted with numba when it is
  available (set ``EQCAUSAL_NO_JIT=1`` to force the interpreted fallback).
"""

from __future__ import annotations

import math
import os
from functools import lru_cache
from typing import Sequence

import numpy as np

from .expr import DomainError, Expr, to_python

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_JIT = numba is not None and not os.environ.get("EQCAUSAL_NO_JIT")

INF = math.inf
NAN = math.nan


# -- strict helpers ---------------------------------------------------------


def _strict_div(a, b):
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _strict_pow(a, b):
    try:
        r = a ** b
    except ZeroDivisionError:
        raise DomainError(f"zero raised to negative power {b}") from None
    except OverflowError:
        return INF
    if isinstance(r, complex):
        raise DomainError(f"negative base {a} raised to non-integer power {b}")
    return r


def _strict_log(x):
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x}")
    return math.log(x)


def _strict_sqrt(x):
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x}")
    return math.sqrt(x)


def _strict_exp(x):
    try:
        return math.exp(x)
    except OverflowError:
        return INF


STRICT_NAMESPACE = {
    "_div": _strict_div, "_pow": _strict_pow, "_log": _strict_log,
    "_sqrt": _strict_sqrt, "_exp": _strict_exp, "_sin": math.sin,
    "_cos": math.cos, "_abs": abs,
}


# -- IEEE helpers -----------------------------------------------------------


def _ieee_div(a, b):
    if b == 0.0:
        if a == 0.0 or a != a:
            return NAN
        return INF if (a > 0.0) == (math.copysign(1.0, b) > 0.0) else -INF
    return a / b


def _ieee_pow(a, b):
    if a < 0.0 and b != math.floor(b):
        return NAN
    if a == 0.0 and b < 0.0:
        return INF
    if abs(a) > 1.0 and b * math.log(abs(a)) > 709.0:
        return INF
    return a ** b


def _ieee_log(x):
    if x > 0.0:
        return math.log(x)
    if x == 0.0:
        return -INF
    return NAN


def _ieee_sqrt(x):
    if x >= 0.0:
        return math.sqrt(x)
    return NAN


def _ieee_exp(x):
    if x > 709.0:
        return INF
    return math.exp(x)


def _ieee_abs(x):
    return abs(x)


def _ieee_sin(x):
    if x != x or abs(x) == INF:
        return NAN
    return math.sin(x)


def _ieee_cos(x):
    if x != x or abs(x) == INF:
        return NAN
    return math.cos(x)


_IEEE_HELPERS = {
    "_div": _ieee_div, "_pow": _ieee_pow, "_log": _ieee_log, "_sqrt": _ieee_sqrt,
    "_exp": _ieee_exp, "_sin": _ieee_sin, "_cos": _ieee_cos, "_abs": _ieee_abs,
}


@lru_cache(maxsize=None)
def _ieee_namespace(jit: bool) -> dict:
    ns = {"math": math, "np": np, "INF": INF, "NAN": NAN}
    for name, fn in _IEEE_HELPERS.items():
        ns[name] = numba.njit(fn, error_model="numpy") if jit else fn
    return ns


# -- strict vector functions ------------------------------------------------


def vector_source(exprs: Sequence[Expr], var_names, param_names, fname="f") -> str:
    vi = {v: i for i, v in enumerate(var_names)}
    pi = {p: i for i, p in enumerate(param_names)}
    body = ",\n        ".join(to_python(e, vi, pi) for e in exprs)
    return f"def {fname}(x, p):\n    return [\n        {body}\n    ]\n"


@lru_cache(maxsize=4096)
def _compile_strict(source: str):
    ns = dict(STRICT_NAMESPACE)
    exec(compile(source, "<eqcausal-vector>", "exec"), ns)
    return ns["f"]


def strict_vector(exprs: Sequence[Expr], var_names, param_names):
    """Return ``f(x, p) -> list[float]`` evaluating ``exprs`` at the point ``x``."""
    return _compile_strict(vector_source(tuple(exprs), tuple(var_names), tuple(param_names)))


# -- RK4 integration kernel -------------------------------------------------

# status codes returned by the loop
REACHED_T_MAX, CONVERGED, DIVERGED, NON_FINITE = 0, 1, 2, 3

_RUN_SOURCE = '''
def run(x0, p, dt, n_steps, record_every, tol, guard, stop_on_converge,
        t_out, x_out, r_out):
    n = x0.shape[0]
    x = x0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    half = 0.5 * dt
    sixth = dt / 6.0

    rhs(x, p, k1)
    res = 0.0
    for i in range(n):
        a = abs(k1[i])
        if not (a <= res):
            res = a
    t_out[0] = 0.0
    for i in range(n):
        x_out[0, i] = x[i]
    r_out[0] = res
    n_rec = 1
    consec = 1 if res <= tol else 0
    if stop_on_converge and consec >= 10 and n_rec >= 10:
        return CONVERGED, n_rec, 0

    for step in range(1, n_steps + 1):
        rhs(x, p, k1)
        for i in range(n):
            tmp[i] = x[i] + half * k1[i]
        rhs(tmp, p, k2)
        for i in range(n):
            tmp[i] = x[i] + half * k2[i]
        rhs(tmp, p, k3)
        for i in range(n):
            tmp[i] = x[i] + dt * k3[i]
        rhs(tmp, p, k4)
        for i in range(n):
            tmp[i] = x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        status = -1
        for i in range(n):
            v = tmp[i]
            if v != v or v == INF or v == -INF:
                status = NON_FINITE
            elif abs(v) > guard and status < 0:
                status = DIVERGED
        if status == NON_FINITE:
            return status, n_rec, step
        for i in range(n):
            x[i] = tmp[i]
        if status == DIVERGED or step % record_every == 0 or step == n_steps:
            rhs(x, p, k1)
            res = 0.0
            for i in range(n):
                a = abs(k1[i])
                if not (a <= res):
                    res = a
            t_out[n_rec] = step * dt
            for i in range(n):
                x_out[n_rec, i] = x[i]
            r_out[n_rec] = res
            n_rec += 1
            if status == DIVERGED:
                return status, n_rec, step
            if res <= tol:
                consec += 1
            else:
                consec = 0
            need = (n_rec * 5 + 99) // 100
            if need < 10:
                need = 10
            if stop_on_converge and consec >= need:
                return CONVERGED, n_rec, step
    return REACHED_T_MAX, n_rec, n_steps
'''


def rhs_source(exprs: Sequence[Expr], var_names, param_names) -> str:
    vi = {v: i for i, v in enumerate(var_names)}
    pi = {p: i for i, p in enumerate(param_names)}
    lines = ["def rhs(x, p, out):"]
    for k, e in enumerate(exprs):
        lines.append(f"    out[{k}] = {to_python(e, vi, pi)}")
    if len(lines) == 1:
        lines.append("    pass")
    return "\n".join(lines) + "\n"


class OdeKernel:
    """Compiled right-hand side plus RK4 loop for one model structure."""

    def __init__(self, source: str, jit: bool):
        ns = dict(_ieee_namespace(jit))
        ns.update(REACHED_T_MAX=REACHED_T_MAX, CONVERGED=CONVERGED,
                  DIVERGED=DIVERGED, NON_FINITE=NON_FINITE)
        exec(compile(source, "<eqcausal-rhs>", "exec"), ns)
        if jit:
            ns["rhs"] = numba.njit(ns["rhs"], error_model="numpy")
        exec(compile(_RUN_SOURCE, "<eqcausal-rk4>", "exec"), ns)
        self.rhs = ns["rhs"]
        self.run = numba.njit(ns["run"], error_model="numpy") if jit else ns["run"]
        self.jit = jit

    def rhs_values(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        out = np.empty(len(x))
        self.rhs(np.asarray(x, dtype=float), p, out)
        return out


@lru_cache(maxsize=256)
def _ode_kernel(source: str, jit: bool) -> OdeKernel:
    return OdeKernel(source, jit)


def ode_kernel(exprs: Sequence[Expr], var_names, param_names, jit: bool = True) -> OdeKernel:
    # parameters enter through the array, so kernels are shared across parameter draws
    source = rhs_source(tuple(exprs), tuple(var_names), tuple(param_names))
    return _ode_kernel(source, USE_JIT and jit)
