"""ODE models: the line-oriented model format, validation and causal structure.

A model file looks like::

    model lotka_volterra
    param t11 = 1.0
    var X1 in [0, inf] init 1.0
    group X = (Q1, P1)          # optional: joint intervention unit
    ddt X1 = X1 * (t11 - t12 * X2)
    clamp X2                    # written by hard interventions

Atoms (the units of intervention and of causal graphs) are the declared
groups plus every ungrouped variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .expr import (
    FUNCTIONS, Expr, ExprSyntaxError, ExprParser, Param, Token,
    UndeclaredIdentifierError, Var, eval_expr, format_real, is_zero, tokenize,
    to_string, variables,
)

KEYWORDS = {"model", "param", "var", "group", "ddt", "clamp", "in", "init", "inf"}


class ModelError(ExprSyntaxError):
    """Invalid model source or declaration; carries line and column when known."""


class DuplicateDeclarationError(ModelError):
    pass


class DomainViolationError(ModelError):
    pass


class UnknownGroupMemberError(ModelError):
    pass


class MissingEquationError(ModelError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    lo: float
    hi: float
    init: float

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class Model:
    """An ODE system ``ddt x = f_x(...)`` over scalar variables.

    ``clamped`` names variables held fixed by a hard intervention; their
    right-hand side is the literal 0 and their clamp value is their ``init``.
    Instances are treated as immutable.
    """

    name: str
    params: Mapping[str, float]
    vars: tuple[Variable, ...]
    groups: tuple[tuple[str, tuple[str, ...]], ...]
    rhs: Mapping[str, Expr]
    clamped: frozenset = frozenset()

    def __post_init__(self):
        validate(self)

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vars)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.params)

    @property
    def param_values(self) -> np.ndarray:
        return np.array([self.params[p] for p in self.params], dtype=float)

    def variable(self, name: str) -> Variable:
        for v in self.vars:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def init(self) -> np.ndarray:
        return np.array([v.init for v in self.vars], dtype=float)

    @property
    def atoms(self) -> tuple[str, ...]:
        return tuple(self.atom_members)

    @property
    def atom_members(self) -> dict[str, tuple[str, ...]]:
        """Atoms in declaration order (a group sits at its first member)."""
        owner = {m: g for g, members in self.groups for m in members}
        out: dict[str, tuple[str, ...]] = {}
        for v in self.vars:
            g = owner.get(v.name)
            if g is None:
                out[v.name] = (v.name,)
            elif g not in out:
                out[g] = dict(self.groups)[g]
        return out

    @property
    def atom_of(self) -> dict[str, str]:
        return {m: a for a, members in self.atom_members.items() for m in members}

    def rhs_list(self) -> list[Expr]:
        return [self.rhs[v] for v in self.var_names]

    def replace(self, **changes) -> "Model":
        fields = dict(name=self.name, params=self.params, vars=self.vars,
                      groups=self.groups, rhs=self.rhs, clamped=self.clamped)
        fields.update(changes)
        return Model(**fields)


def validate(m: Model) -> None:
    names = [v.name for v in m.vars]
    seen: set[str] = set()
    for n in names:
        if n in seen:
            raise DuplicateDeclarationError(f"duplicate variable {n!r}")
        seen.add(n)
    for p in m.params:
        if p in seen:
            raise DuplicateDeclarationError(f"{p!r} declared as both parameter and variable")
    for v in m.vars:
        if not (v.lo <= v.hi):
            raise DomainViolationError(f"empty domain for {v.name!r}")
        if not v.contains(v.init):
            raise DomainViolationError(f"init {v.init} of {v.name!r} outside [{v.lo}, {v.hi}]")
    grouped: set[str] = set()
    for g, members in m.groups:
        if g in seen or g in m.params:
            raise DuplicateDeclarationError(f"group name {g!r} clashes with a declaration")
        if not members:
            raise UnknownGroupMemberError(f"group {g!r} is empty")
        for mem in members:
            if mem not in seen:
                raise UnknownGroupMemberError(f"group {g!r} member {mem!r} is not a variable")
            if mem in grouped:
                raise DuplicateDeclarationError(f"variable {mem!r} belongs to two groups")
            grouped.add(mem)
    if len({g for g, _ in m.groups}) != len(m.groups):
        raise DuplicateDeclarationError("duplicate group name")
    for n in names:
        if n not in m.rhs:
            raise MissingEquationError(f"no ddt equation for {n!r}")
    for n, e in m.rhs.items():
        if n not in seen:
            raise UndeclaredIdentifierError(f"ddt for undeclared variable {n!r}")
        for ref in variables(e):
            if ref not in seen:
                raise UndeclaredIdentifierError(f"undeclared identifier {ref!r}")
    for c in m.clamped:
        if c not in seen:
            raise UndeclaredIdentifierError(f"clamp of undeclared variable {c!r}")
        if not is_zero(m.rhs[c]):
            raise ModelError(f"clamped variable {c!r} must have ddt {c} = 0")


# ---------------------------------------------------------------------------
# parsing


def _parse_real(tokens: list[Token], pos: int) -> tuple[float, int]:
    sign = 1.0
    tok = tokens[pos]
    if tok.kind == "op" and tok.text in "+-":
        sign = -1.0 if tok.text == "-" else 1.0
        pos += 1
        tok = tokens[pos]
    if tok.kind == "num":
        return sign * float(tok.text), pos + 1
    if tok.kind == "name" and tok.text == "inf":
        return sign * math.inf, pos + 1
    raise ModelError(f"expected a real number, found {tok.text or 'end of line'!r}",
                     tok.line, tok.column)


def _expect(tokens: list[Token], pos: int, text: str) -> int:
    tok = tokens[pos]
    if tok.text != text:
        raise ModelError(f"expected {text!r}, found {tok.text or 'end of line'!r}",
                         tok.line, tok.column)
    return pos + 1


def _expect_end(tokens: list[Token], pos: int) -> None:
    tok = tokens[pos]
    if tok.kind != "end":
        raise ModelError(f"unexpected {tok.text!r}", tok.line, tok.column)


def _name(tokens: list[Token], pos: int, what: str) -> tuple[Token, int]:
    tok = tokens[pos]
    if tok.kind != "name" or tok.text in KEYWORDS or tok.text in FUNCTIONS:
        raise ModelError(f"expected {what} name, found {tok.text or 'end of line'!r}",
                         tok.line, tok.column)
    return tok, pos + 1


def parse_model(text: str) -> Model:
    """Parse model source into a validated :class:`Model`.

    Errors are raised as :class:`ModelError` subclasses (or
    :class:`UndeclaredIdentifierError`) positioned at the offending token.
    """
    name = "model"
    params: dict[str, float] = {}
    vars_: list[Variable] = []
    groups: list[tuple[str, tuple[str, ...]]] = []
    group_decls: list[tuple[Token, list[Token]]] = []
    equations: list[tuple[Token, list[Token]]] = []
    clamped: list[Token] = []
    declared: dict[str, Token] = {}

    def declare(tok: Token):
        if tok.text in declared:
            first = declared[tok.text]
            raise DuplicateDeclarationError(
                f"{tok.text!r} already declared at line {first.line}", tok.line, tok.column)
        declared[tok.text] = tok

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        tokens = tokenize(line, lineno, 1)
        head = tokens[0]
        kw = head.text
        if kw == "model":
            tok, pos = _name(tokens, 1, "model")
            name = tok.text
            _expect_end(tokens, pos)
        elif kw == "param":
            tok, pos = _name(tokens, 1, "parameter")
            declare(tok)
            pos = _expect(tokens, pos, "=")
            value, pos = _parse_real(tokens, pos)
            _expect_end(tokens, pos)
            params[tok.text] = value
        elif kw == "var":
            tok, pos = _name(tokens, 1, "variable")
            declare(tok)
            pos = _expect(tokens, pos, "in")
            pos = _expect(tokens, pos, "[")
            lo, pos = _parse_real(tokens, pos)
            pos = _expect(tokens, pos, ",")
            hi, pos = _parse_real(tokens, pos)
            pos = _expect(tokens, pos, "]")
            pos = _expect(tokens, pos, "init")
            init_tok = tokens[pos]
            init, pos = _parse_real(tokens, pos)
            _expect_end(tokens, pos)
            if not lo <= hi:
                raise DomainViolationError(f"empty domain [{lo}, {hi}]", tok.line, tok.column)
            if not lo <= init <= hi:
                raise DomainViolationError(f"init {init} outside domain [{lo}, {hi}]",
                                           init_tok.line, init_tok.column)
            vars_.append(Variable(tok.text, lo, hi, init))
        elif kw == "group":
            tok, pos = _name(tokens, 1, "group")
            declare(tok)
            pos = _expect(tokens, pos, "=")
            pos = _expect(tokens, pos, "(")
            members = []
            while True:
                mtok, pos = _name(tokens, pos, "member")
                members.append(mtok)
                if tokens[pos].text == ",":
                    pos += 1
                    continue
                pos = _expect(tokens, pos, ")")
                break
            _expect_end(tokens, pos)
            groups.append((tok.text, tuple(m.text for m in members)))
            group_decls.append((tok, members))
        elif kw == "ddt":
            tok, pos = _name(tokens, 1, "variable")
            pos = _expect(tokens, pos, "=")
            equations.append((tok, tokens[pos:]))
        elif kw == "clamp":
            pos = 1
            while True:
                tok, pos = _name(tokens, pos, "variable")
                clamped.append(tok)
                if tokens[pos].text == ",":
                    pos += 1
                    continue
                break
            _expect_end(tokens, pos)
        else:
            raise ModelError(f"unknown statement {kw!r}", head.line, head.column)

    var_names = {v.name for v in vars_}
    grouped: dict[str, str] = {}
    rhs: dict[str, Expr] = {}

    def resolve(ident: str, tok: Token) -> Expr:
        if ident in var_names:
            return Var(ident)
        if ident in params:
            return Param(ident)
        raise UndeclaredIdentifierError(f"undeclared identifier {ident!r}", tok.line, tok.column)

    for tok, members in group_decls:
        for mtok in members:
            if mtok.text not in var_names:
                raise UnknownGroupMemberError(
                    f"group member {mtok.text!r} is not a declared variable",
                    mtok.line, mtok.column)
            if mtok.text in grouped:
                raise DuplicateDeclarationError(
                    f"variable {mtok.text!r} already in group {grouped[mtok.text]!r}",
                    mtok.line, mtok.column)
            grouped[mtok.text] = tok.text

    for tok, payload in equations:
        if tok.text not in var_names:
            raise UndeclaredIdentifierError(f"ddt of undeclared variable {tok.text!r}",
                                            tok.line, tok.column)
        if tok.text in rhs:
            raise DuplicateDeclarationError(f"second ddt equation for {tok.text!r}",
                                            tok.line, tok.column)
        rhs[tok.text] = ExprParser(payload, resolve).parse()

    for v in vars_:
        if v.name not in rhs:
            decl = declared[v.name]
            raise MissingEquationError(f"no ddt equation for {v.name!r}", decl.line, decl.column)
    for tok in clamped:
        if tok.text not in var_names:
            raise UndeclaredIdentifierError(f"clamp of undeclared variable {tok.text!r}",
                                            tok.line, tok.column)
        if not is_zero(rhs[tok.text]):
            raise ModelError(f"clamped variable {tok.text!r} needs ddt {tok.text} = 0",
                             tok.line, tok.column)

    return Model(name, params, tuple(vars_), tuple(groups), rhs,
                 frozenset(t.text for t in clamped))


def format_model(m: Model) -> str:
    """Render ``m`` in the model format; ``parse_model`` inverts it exactly."""
    out = [f"model {m.name}"]
    out += [f"param {p} = {format_real(v)}" for p, v in m.params.items()]
    for v in m.vars:
        lo = "-inf" if v.lo == -math.inf else format_real(v.lo)
        hi = "inf" if v.hi == math.inf else format_real(v.hi)
        out.append(f"var {v.name} in [{lo}, {hi}] init {format_real(v.init)}")
    for g, members in m.groups:
        out.append(f"group {g} = ({', '.join(members)})")
    for v in m.var_names:
        out.append(f"ddt {v} = {to_string(m.rhs[v])}")
    clamped = [v for v in m.var_names if v in m.clamped]
    if clamped:
        out.append(f"clamp {', '.join(clamped)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# causal structure


def structural_parents(m: Model) -> dict[str, frozenset]:
    """Atoms whose members are referenced by the right-hand sides of each atom."""
    owner = m.atom_of
    pa = {}
    for atom, members in m.atom_members.items():
        refs = set()
        for mem in members:
            refs |= variables(m.rhs[mem])
        pa[atom] = frozenset(owner[r] for r in refs)
    return pa


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple[str, ...]
    edges: frozenset = field(default_factory=frozenset)  # (parent, child), self-loops included

    @property
    def self_loops(self) -> frozenset:
        return frozenset(a for a, b in self.edges if a == b)

    def has_self_loop(self, node: str) -> bool:
        return (node, node) in self.edges

    def parents(self, node: str) -> frozenset:
        return frozenset(a for a, b in self.edges if b == node)

    def without_incoming(self, targets: Iterable[str]) -> "CausalGraph":
        targets = set(targets)
        return CausalGraph(self.nodes, frozenset(e for e in self.edges if e[1] not in targets))

    @classmethod
    def from_parents(cls, nodes, parents: Mapping[str, Iterable[str]]) -> "CausalGraph":
        return cls(tuple(nodes), frozenset((p, c) for c in nodes for p in parents[c]))


def graph_of(m: Model) -> CausalGraph:
    return CausalGraph.from_parents(m.atoms, structural_parents(m))


def vacuous_dependencies(m: Model, n_states: int = 20, seed: int = 0,
                         delta: float = 1e-3) -> list[tuple[str, str]]:
    """Edges whose syntactic dependence never shows up numerically.

    For every edge ``a -> b`` each member of ``a`` is perturbed at ``n_states``
    random states; the edge is reported when no right-hand side of ``b``
    changes.  This is a lint: an empty list does not prove semantic
    dependence, a non-empty one flags expressions such as ``X - X``.
    """
    rng = np.random.default_rng(seed)
    members = m.atom_members
    flagged = []
    states = []
    for _ in range(n_states):
        s = {}
        for v in m.vars:
            lo = max(v.lo, v.init - 5.0)
            hi = min(v.hi, v.init + 5.0)
            s[v.name] = float(rng.uniform(lo, hi))
        states.append(s)
    for a, b in sorted(graph_of(m).edges):
        changed = False
        for s in states:
            for src in members[a]:
                bumped = dict(s)
                bumped[src] = s[src] + delta
                for tgt in members[b]:
                    try:
                        before = eval_expr(m.rhs[tgt], m.params, s)
                        after = eval_expr(m.rhs[tgt], m.params, bumped)
                    except ArithmeticError:
                        continue
                    if before != after:
                        changed = True
                        break
                if changed:
                    break
            if changed:
                break
        if not changed:
            flagged.append((a, b))
    return flagged
