"""Expression trees for right-hand sides and equilibrium residuals.

The grammar is deliberately small: real constants, parameter and variable
references, unary minus, ``+ - * / ^`` and the calls ``sin cos exp log sqrt
abs``.  Expressions are immutable, hashable and compare structurally.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Union

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")

# binding power: higher binds tighter
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_UNARY_PREC = 3
_ATOM_PREC = 5


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"{line}:{column}: " if line else ""
        super().__init__(f"{where}{message}")


class UndeclaredIdentifierError(ExprSyntaxError):
    pass


class EvalError(ExprError, ArithmeticError):
    """Raised when an expression cannot be evaluated at a point."""


class UnboundNameError(EvalError):
    pass


class DomainError(EvalError):
    pass


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Const, Param, Var, Neg, BinOp, Call]

ZERO = Const(0.0)


# ---------------------------------------------------------------------------
# construction helpers


def add(a: Expr, b: Expr) -> Expr:
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    return BinOp("*", a, b)


def is_zero(e: Expr) -> bool:
    return isinstance(e, Const) and e.value == 0.0


def children(e: Expr) -> tuple:
    if isinstance(e, Neg):
        return (e.operand,)
    if isinstance(e, BinOp):
        return (e.left, e.right)
    if isinstance(e, Call):
        return (e.arg,)
    return ()


def walk(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def variables(e: Expr) -> frozenset:
    return frozenset(n.name for n in walk(e) if isinstance(n, Var))


def parameters(e: Expr) -> frozenset:
    return frozenset(n.name for n in walk(e) if isinstance(n, Param))


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variable references by expressions."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Neg):
        return Neg(substitute(e.operand, mapping))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    return e


# ---------------------------------------------------------------------------
# tokenizer and parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),=\[\]])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | name | op | end
    text: str
    line: int
    column: int


def tokenize(text: str, line: int = 1, column: int = 1) -> list[Token]:
    """Split one line of source into tokens; ``column`` is the 1-based offset of ``text[0]``."""
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", line, column + pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), line, column + pos))
        pos = m.end()
    tokens.append(Token("end", "", line, column + len(text)))
    return tokens


class ExprParser:
    """Recursive-descent parser over a token list.

    ``resolve(name, token)`` maps an identifier to a ``Param`` or ``Var`` and
    raises ``UndeclaredIdentifierError`` for unknown names.
    """

    def __init__(self, tokens: list[Token], resolve: Callable[[str, Token], Expr]):
        self.tokens = tokens
        self.pos = 0
        self.resolve = resolve

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "end":
            self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.current
        if tok.text != text or tok.kind not in ("op", "name"):
            raise ExprSyntaxError(f"expected {text!r}, found {tok.text or 'end of line'!r}",
                                  tok.line, tok.column)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expression()
        tok = self.current
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {tok.text!r}", tok.line, tok.column)
        return e

    def expression(self) -> Expr:
        left = self.term()
        while self.current.kind == "op" and self.current.text in "+-":
            op = self.advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.current.kind == "op" and self.current.text in "*/":
            op = self.advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.current.kind == "op" and self.current.text in "+-":
            op = self.advance().text
            # "-2.5" is a negative literal, "-2^2" and "-(2)" are negations
            nxt = self.tokens[self.pos + 1] if self.pos + 1 < len(self.tokens) else None
            if (op == "-" and self.current.kind == "num"
                    and not (nxt is not None and nxt.kind == "op" and nxt.text == "^")):
                return Const(-float(self.advance().text))
            operand = self.unary()
            return operand if op == "+" else Neg(operand)
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.current.kind == "op" and self.current.text == "^":
            self.advance()
            # right associative; exponent may carry its own sign
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        tok = self.current
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expression()
                self.expect(")")
                return Call(tok.text, arg)
            return self.resolve(tok.text, tok)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            e = self.expression()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"unexpected {tok.text or 'end of line'!r}", tok.line, tok.column)


def parse_expr(text: str, params=(), variables=(), line: int = 1, column: int = 1) -> Expr:
    """Parse a standalone expression against the given parameter and variable names."""
    params = set(params)
    names = set(variables)

    def resolve(name: str, tok: Token) -> Expr:
        if name in names:
            return Var(name)
        if name in params:
            return Param(name)
        raise UndeclaredIdentifierError(f"undeclared identifier {name!r}", tok.line, tok.column)

    return ExprParser(tokenize(text, line, column), resolve).parse()


# ---------------------------------------------------------------------------
# printing


def format_real(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot format non-finite constant {x}")
    return repr(float(x))


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg) or (isinstance(e, Const) and math.copysign(1.0, e.value) < 0):
        return _UNARY_PREC
    return _ATOM_PREC


def to_string(e: Expr) -> str:
    """Render ``e`` in the model grammar with the minimal parentheses that reparse to ``e``."""
    if isinstance(e, Const):
        return format_real(e.value)
    if isinstance(e, (Param, Var)):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.operand)
        if _prec(e.operand) <= _UNARY_PREC or isinstance(e.operand, Const):
            inner = f"({inner})"
        return f"-{inner}"
    left = to_string(e.left)
    right = to_string(e.right)
    if e.op == "^":
        wrap_left = _prec(e.left) < _ATOM_PREC
        wrap_right = _prec(e.right) < _UNARY_PREC
    else:
        p = _PREC[e.op]
        wrap_left = _prec(e.left) < p
        wrap_right = _prec(e.right) <= p
    if wrap_left:
        left = f"({left})"
    if wrap_right:
        right = f"({right})"
    return f"{left} {e.op} {right}"


# ---------------------------------------------------------------------------
# evaluation


def _pow(a: float, b: float) -> float:
    try:
        r = a ** b
    except ZeroDivisionError:
        raise DomainError(f"zero raised to negative power {b}") from None
    except OverflowError:
        return math.inf
    if isinstance(r, complex):
        raise DomainError(f"negative base {a} raised to non-integer power {b}")
    return r


def _call(func: str, x: float) -> float:
    if func == "log":
        if x <= 0:
            raise DomainError(f"log of non-positive value {x}")
        return math.log(x)
    if func == "sqrt":
        if x < 0:
            raise DomainError(f"sqrt of negative value {x}")
        return math.sqrt(x)
    if func == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            return math.inf
    if func == "abs":
        return abs(x)
    return getattr(math, func)(x)


def eval_expr(e: Expr, params: Mapping[str, float], state: Mapping[str, float]) -> float:
    """Evaluate ``e`` with IEEE double arithmetic.

    Raises ``UnboundNameError`` for names missing from ``params``/``state`` and
    ``DomainError`` for division by zero, log of a non-positive number and
    similar singular inputs.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(state[e.name])
        except KeyError:
            raise UnboundNameError(f"unbound variable {e.name!r}") from None
    if isinstance(e, Param):
        try:
            return float(params[e.name])
        except KeyError:
            raise UnboundNameError(f"unbound parameter {e.name!r}") from None
    if isinstance(e, Neg):
        return -eval_expr(e.operand, params, state)
    if isinstance(e, Call):
        return _call(e.func, eval_expr(e.arg, params, state))
    a = eval_expr(e.left, params, state)
    b = eval_expr(e.right, params, state)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0.0:
            raise DomainError("division by zero")
        return a / b
    return _pow(a, b)


# ---------------------------------------------------------------------------
# affine structure


def _scale(k: Expr, e: Expr) -> Expr:
    return mul(k, e)


def affine_decompose(e: Expr, names) -> tuple[dict, Expr] | None:
    """Write ``e`` as ``sum_v coeff[v] * v + offset`` over the variables ``names``.

    Coefficients and offset are expressions free of ``names`` (they may still
    reference other variables).  Returns ``None`` when ``e`` is not affine in
    ``names``.
    """
    names = frozenset(names)

    def go(node: Expr):
        if not (variables(node) & names):
            return {}, node
        if isinstance(node, Var):
            return {node.name: Const(1.0)}, ZERO
        if isinstance(node, Neg):
            inner = go(node.operand)
            if inner is None:
                return None
            co, off = inner
            return {v: Neg(c) for v, c in co.items()}, Neg(off)
        if isinstance(node, BinOp):
            if node.op in "+-":
                lhs, rhs = go(node.left), go(node.right)
                if lhs is None or rhs is None:
                    return None
                co = dict(lhs[0])
                for v, c in rhs[0].items():
                    c = c if node.op == "+" else Neg(c)
                    co[v] = BinOp("+", co[v], c) if v in co else c
                return co, BinOp(node.op, lhs[1], rhs[1])
            if node.op == "*":
                lfree = not (variables(node.left) & names)
                rfree = not (variables(node.right) & names)
                if lfree:
                    inner, k = go(node.right), node.left
                elif rfree:
                    inner, k = go(node.left), node.right
                else:
                    return None
                if inner is None:
                    return None
                co, off = inner
                return {v: _scale(k, c) for v, c in co.items()}, _scale(k, off)
            if node.op == "/":
                if variables(node.right) & names:
                    return None
                inner = go(node.left)
                if inner is None:
                    return None
                co, off = inner
                return ({v: BinOp("/", c, node.right) for v, c in co.items()},
                        BinOp("/", off, node.right))
            if node.op == "^":
                if isinstance(node.right, Const) and node.right.value == 1.0:
                    return go(node.left)
                return None
        return None

    return go(e)


# ---------------------------------------------------------------------------
# code generation

_PY_FUNCS = {"sin": "_sin", "cos": "_cos", "exp": "_exp", "log": "_log",
             "sqrt": "_sqrt", "abs": "_abs"}


def to_python(e: Expr, var_index: Mapping[str, int], param_index: Mapping[str, int],
              xname: str = "x", pname: str = "p") -> str:
    """Emit Python source computing ``e`` from arrays ``x`` and ``p``.

    Division, powers and calls go through the helpers of ``eqcausal._kernels``
    which return inf/nan instead of raising, so compiled kernels follow IEEE
    semantics and report singularities as non-finite values.
    """
    if isinstance(e, Const):
        return f"({format_real(e.value)})"
    if isinstance(e, Var):
        return f"{xname}[{var_index[e.name]}]"
    if isinstance(e, Param):
        return f"{pname}[{param_index[e.name]}]"
    if isinstance(e, Neg):
        return f"(-{to_python(e.operand, var_index, param_index, xname, pname)})"
    if isinstance(e, Call):
        return f"{_PY_FUNCS[e.func]}({to_python(e.arg, var_index, param_index, xname, pname)})"
    a = to_python(e.left, var_index, param_index, xname, pname)
    b = to_python(e.right, var_index, param_index, xname, pname)
    if e.op == "/":
        return f"_div({a}, {b})"
    if e.op == "^":
        return f"_pow({a}, {b})"
    return f"({a} {e.op} {b})"


def simplify(e: Expr) -> Expr:
    """Fold constant subtrees and drop additive zeros and unit factors.

    Only rewrites that are exact for finite operands are applied; ``0 / x``
    becomes ``0``, which assumes the denominator is nonzero.
    """
    if isinstance(e, Neg):
        inner = simplify(e.operand)
        if isinstance(inner, Const):
            return Const(-inner.value + 0.0)
        if isinstance(inner, Neg):
            return inner.operand
        return Neg(inner)
    if isinstance(e, Call):
        arg = simplify(e.arg)
        if isinstance(arg, Const):
            try:
                return Const(_call(e.func, arg.value))
            except EvalError:
                pass
        return Call(e.func, arg)
    if not isinstance(e, BinOp):
        return e
    a, b = simplify(e.left), simplify(e.right)
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            value = eval_expr(BinOp(e.op, a, b), {}, {})
            if math.isfinite(value):
                return Const(value + 0.0)  # no negative zero
        except EvalError:
            pass
    op = e.op
    if op == "+":
        if is_zero(a):
            return b
        if is_zero(b):
            return a
    elif op == "-":
        if is_zero(b):
            return a
        if is_zero(a):
            return simplify(Neg(b))
    elif op == "*":
        if is_zero(a) or is_zero(b):
            return ZERO
        if isinstance(a, Const) and a.value == 1.0:
            return b
        if isinstance(b, Const) and b.value == 1.0:
            return a
        if isinstance(a, Const) and a.value == -1.0:
            return simplify(Neg(b))
    elif op == "/":
        if is_zero(a):
            return ZERO
        if isinstance(b, Const) and b.value == 1.0:
            return a
    return BinOp(op, a, b)
