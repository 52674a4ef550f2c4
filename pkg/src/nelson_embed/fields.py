"""Symbolic scalar fields over ``(t, x1..xd, y1..yd)``.

Expressions are parsed from a small infix grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ['^' ['-'] INTEGER | '^' '(' ['-'] INTEGER ')']
    atom   := NUMBER | 'i' | 'pi' | NAME | FUNC '(' expr ')' | '(' expr ')'

with ``FUNC`` one of ``exp, log, sin, cos``.  ``i`` is the imaginary unit.
Only integer exponents are accepted, which keeps every polynomial in the
velocity variables holomorphic.

Evaluation is vectorised over numpy arrays and uses complex arithmetic
where needed; real inputs to real-coefficient expressions stay on the
real path so the imaginary part of the result is exactly zero.
"""

from __future__ import annotations

import cmath
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, FieldSyntaxError, UnknownIdentifier

FUNCTIONS = ("exp", "log", "sin", "cos")
CONSTANTS = {"i": 1j, "pi": math.pi}


# --------------------------------------------------------------------------
# Expression tree
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Node:
    pass


@dataclass(frozen=True, eq=False)
class Const(Node):
    value: complex | float


@dataclass(frozen=True, eq=False)
class Var(Node):
    name: str


@dataclass(frozen=True, eq=False)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True, eq=False)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True, eq=False)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True, eq=False)
class Div(Node):
    left: Node
    right: Node


@dataclass(frozen=True, eq=False)
class Neg(Node):
    arg: Node


@dataclass(frozen=True, eq=False)
class Pow(Node):
    base: Node
    exponent: int


@dataclass(frozen=True, eq=False)
class Func(Node):
    name: str
    arg: Node


def _num(value):
    value = complex(value)
    return value.real if value.imag == 0 else value


def _is_const(node, value=None):
    if not isinstance(node, Const):
        return False
    return value is None or node.value == value


ZERO = Const(0.0)
ONE = Const(1.0)


def const(value) -> Const:
    return Const(_num(value))


def add(a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value + b.value)
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    return Add(a, b)


def sub(a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value - b.value)
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return neg(b)
    return Sub(a, b)


def mul(a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value * b.value)
    if _is_const(a, 0) or _is_const(b, 0):
        return ZERO
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if _is_const(a, -1):
        return neg(b)
    if _is_const(b, -1):
        return neg(a)
    return Mul(a, b)


def div(a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return const(a.value / b.value)
    if _is_const(b, 1):
        return a
    if _is_const(a, 0) and not _is_const(b, 0):
        return ZERO
    return Div(a, b)


def neg(a: Node) -> Node:
    if isinstance(a, Const):
        return const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a: Node, n: int) -> Node:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const) and not (a.value == 0 and n < 0):
        return const(_int_pow(a.value, n))
    return Pow(a, n)


_FOLD = {"exp": cmath.exp, "log": cmath.log, "sin": cmath.sin, "cos": cmath.cos}


def func(name: str, a: Node) -> Node:
    if isinstance(a, Const):
        z = a.value
        try:
            if name == "log" and z == 0:
                raise ValueError
            if isinstance(z, float) and not (name == "log" and z < 0):
                return const(getattr(math, name)(z))
            return const(_FOLD[name](z))
        except (ValueError, OverflowError):
            pass
    return Func(name, a)


def _int_pow(z, n):
    """Integer power by repeated squaring (exact for small exponents)."""
    if n < 0:
        return 1 / _int_pow(z, -n)
    result = 1
    base = z
    while n:
        if n & 1:
            result = result * base
        base = base * base
        n >>= 1
    return result


# --------------------------------------------------------------------------
# Tokenizer and parser
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            raise FieldSyntaxError(f"unexpected character {source[pos]!r}", source, pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: Sequence[str]):
        self.source = source
        self.variables = tuple(variables)
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, offset=None):
        raise FieldSyntaxError(message, self.source, self.tok[2] if offset is None else offset)

    def starts_operand(self):
        kind, text, _ = self.tok
        return kind in ("num", "name") or text in ("(", "-", "+")

    def parse(self) -> Node:
        if self.tok[0] == "end":
            self.error("empty expression")
        node = self.expr()
        if self.tok[0] != "end":
            self.error(f"unexpected token {self.tok[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            _, op, at = self.advance()
            if not self.starts_operand():
                self.error(f"missing operand after {op!r}", at)
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            _, op, at = self.advance()
            if self.tok[1] in ("*", "/", "^", ")") or self.tok[0] == "end":
                self.error(f"missing operand after {op!r}", at)
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self):
        if self.tok[0] == "op" and self.tok[1] in ("-", "+"):
            _, op, at = self.advance()
            if not self.starts_operand():
                self.error(f"missing operand after {op!r}", at)
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok[1] == "^":
            _, _, at = self.advance()
            if not self.starts_operand():
                self.error("missing operand after '^'", at)
            paren = False
            if self.tok[1] == "(":
                paren = True
                self.advance()
            sign = 1
            if self.tok[1] == "-":
                sign = -1
                self.advance()
            kind, text, pos = self.tok
            if kind != "num" or not text.isdigit():
                self.error("exponent must be an integer literal", pos)
            self.advance()
            if paren:
                if self.tok[1] != ")":
                    self.error("expected ')'")
                self.advance()
            if self.tok[1] == "^":
                self.error("chained exponents need parentheses")
            return Pow(base, sign * int(text))
        return base

    def atom(self):
        kind, text, pos = self.tok
        if kind == "num":
            self.advance()
            return Const(float(text))
        if kind == "name":
            self.advance()
            if text in FUNCTIONS:
                if self.tok[1] != "(":
                    self.error(f"expected '(' after {text}")
                self.advance()
                arg = self.expr()
                if self.tok[1] != ")":
                    self.error("expected ')'")
                self.advance()
                return Func(text, arg)
            if text in CONSTANTS:
                return Const(_num(CONSTANTS[text]))
            if text not in self.variables:
                raise UnknownIdentifier(text, self.variables)
            return Var(text)
        if text == "(":
            self.advance()
            node = self.expr()
            if self.tok[1] != ")":
                self.error("expected ')'")
            self.advance()
            return node
        if kind == "end":
            self.error("unexpected end of expression")
        self.error(f"unexpected token {text!r}")


# --------------------------------------------------------------------------
# Unparsing
# --------------------------------------------------------------------------

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _fmt_const(value) -> str:
    z = complex(value)
    if z.imag == 0:
        return repr(float(z.real))
    if z.real == 0:
        return f"{z.imag!r}*i"
    return f"({z.real!r} + {z.imag!r}*i)"


def unparse_node(node: Node) -> str:
    def wrap(child, min_prec):
        text = unparse_node(child)
        prec = _PREC.get(type(child), 5)
        if isinstance(child, Const) and (complex(child.value).real < 0 or complex(child.value).imag != 0):
            prec = 0
        return f"({text})" if prec < min_prec else text

    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Add):
        return f"{wrap(node.left, 1)} + {wrap(node.right, 2)}"
    if isinstance(node, Sub):
        return f"{wrap(node.left, 1)} - {wrap(node.right, 2)}"
    if isinstance(node, Mul):
        return f"{wrap(node.left, 2)}*{wrap(node.right, 3)}"
    if isinstance(node, Div):
        return f"{wrap(node.left, 2)}/{wrap(node.right, 3)}"
    if isinstance(node, Neg):
        return f"-{wrap(node.arg, 3)}"
    if isinstance(node, Pow):
        exp = str(node.exponent) if node.exponent >= 0 else f"({node.exponent})"
        return f"{wrap(node.base, 5)}^{exp}"
    if isinstance(node, Func):
        return f"{node.name}({unparse_node(node.arg)})"
    raise TypeError(f"unknown node {node!r}")


# --------------------------------------------------------------------------
# Differentiation and substitution
# --------------------------------------------------------------------------

def diff_node(node: Node, var: str, memo: dict | None = None) -> Node:
    if memo is None:
        memo = {}
    key = id(node)
    if key in memo:
        return memo[key][1]
    d = lambda n: diff_node(n, var, memo)  # noqa: E731
    if isinstance(node, Const):
        out = ZERO
    elif isinstance(node, Var):
        out = ONE if node.name == var else ZERO
    elif isinstance(node, Add):
        out = add(d(node.left), d(node.right))
    elif isinstance(node, Sub):
        out = sub(d(node.left), d(node.right))
    elif isinstance(node, Mul):
        out = add(mul(d(node.left), node.right), mul(node.left, d(node.right)))
    elif isinstance(node, Div):
        da, db = d(node.left), d(node.right)
        if _is_const(db, 0):
            out = div(da, node.right)
        else:
            out = div(sub(mul(da, node.right), mul(node.left, db)), power(node.right, 2))
    elif isinstance(node, Neg):
        out = neg(d(node.arg))
    elif isinstance(node, Pow):
        n = node.exponent
        out = mul(mul(const(n), power(node.base, n - 1)), d(node.base))
    elif isinstance(node, Func):
        da = d(node.arg)
        if node.name == "exp":
            out = mul(node, da)
        elif node.name == "log":
            out = div(da, node.arg)
        elif node.name == "sin":
            out = mul(func("cos", node.arg), da)
        elif node.name == "cos":
            out = neg(mul(func("sin", node.arg), da))
        else:  # pragma: no cover
            raise TypeError(node.name)
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")
    memo[key] = (node, out)
    return out


def substitute_node(node: Node, mapping: Mapping[str, Node], memo: dict | None = None) -> Node:
    if memo is None:
        memo = {}
    key = id(node)
    if key in memo:
        return memo[key][1]
    s = lambda n: substitute_node(n, mapping, memo)  # noqa: E731
    if isinstance(node, Const):
        out = node
    elif isinstance(node, Var):
        out = mapping.get(node.name, node)
    elif isinstance(node, Add):
        out = add(s(node.left), s(node.right))
    elif isinstance(node, Sub):
        out = sub(s(node.left), s(node.right))
    elif isinstance(node, Mul):
        out = mul(s(node.left), s(node.right))
    elif isinstance(node, Div):
        out = div(s(node.left), s(node.right))
    elif isinstance(node, Neg):
        out = neg(s(node.arg))
    elif isinstance(node, Pow):
        out = power(s(node.base), node.exponent)
    elif isinstance(node, Func):
        out = func(node.name, s(node.arg))
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")
    memo[key] = (node, out)
    return out


def free_names(node: Node) -> set[str]:
    seen: set[int] = set()
    names: set[str] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if isinstance(n, Var):
            names.add(n.name)
        elif isinstance(n, (Add, Sub, Mul, Div)):
            stack += [n.left, n.right]
        elif isinstance(n, (Neg, Func)):
            stack.append(n.arg)
        elif isinstance(n, Pow):
            stack.append(n.base)
    return names


def node_count(node: Node) -> int:
    seen: set[int] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if isinstance(n, (Add, Sub, Mul, Div)):
            stack += [n.left, n.right]
        elif isinstance(n, (Neg, Func)):
            stack.append(n.arg)
        elif isinstance(n, Pow):
            stack.append(n.base)
    return len(seen)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def _check_finite(value, node):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"non-finite value produced by {unparse_node(node)}")
    return value


def _eval(node: Node, env: Mapping[str, np.ndarray], memo: dict):
    key = id(node)
    if key in memo:
        return memo[key][1]
    ev = lambda n: _eval(n, env, memo)  # noqa: E731
    if isinstance(node, Const):
        out = node.value
    elif isinstance(node, Var):
        out = env[node.name]
    elif isinstance(node, Add):
        out = ev(node.left) + ev(node.right)
    elif isinstance(node, Sub):
        out = ev(node.left) - ev(node.right)
    elif isinstance(node, Mul):
        out = ev(node.left) * ev(node.right)
    elif isinstance(node, Div):
        den = ev(node.right)
        if np.any(den == 0):
            raise DomainError(f"division by zero in {unparse_node(node)}")
        out = ev(node.left) / den
    elif isinstance(node, Neg):
        out = -ev(node.arg)
    elif isinstance(node, Pow):
        base = ev(node.base)
        if node.exponent < 0 and np.any(base == 0):
            raise DomainError(f"zero raised to a negative power in {unparse_node(node)}")
        out = _int_pow(base, node.exponent)
    elif isinstance(node, Func):
        arg = ev(node.arg)
        if node.name == "log":
            if np.any(arg == 0):
                raise DomainError(f"log of zero in {unparse_node(node)}")
            if not np.iscomplexobj(arg) and np.any(np.asarray(arg) < 0):
                arg = np.asarray(arg, dtype=complex)
            out = np.log(arg)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                out = getattr(np, node.name)(arg)
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")
    if not isinstance(node, (Const, Var)):
        _check_finite(out, node)
    memo[key] = (node, out)
    return out


# --------------------------------------------------------------------------
# Public API
# --------------------------------------------------------------------------

def spatial_vars(dim: int) -> tuple[str, ...]:
    return tuple(f"x{k}" for k in range(1, dim + 1))


def velocity_vars(dim: int) -> tuple[str, ...]:
    return tuple(f"y{k}" for k in range(1, dim + 1))


def _merge(*groups) -> tuple[str, ...]:
    out: list[str] = []
    for g in groups:
        for name in g:
            if name not in out:
                out.append(name)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class FieldExpr:
    """Immutable symbolic field.

    ``variables`` is the declared variable set; every identifier in the
    tree belongs to it.  Arithmetic operators combine fields (and plain
    numbers) and merge their variable sets.
    """

    ast: Node
    variables: tuple[str, ...]
    dim: int = 1
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        extra = free_names(self.ast) - set(self.variables)
        if extra:
            raise UnknownIdentifier(sorted(extra)[0], self.variables)

    # construction helpers
    @classmethod
    def constant(cls, value, variables=(), dim=1) -> "FieldExpr":
        return cls(const(value), tuple(variables), dim)

    @classmethod
    def variable(cls, name, variables=None, dim=1) -> "FieldExpr":
        return cls(Var(name), tuple(variables) if variables else (name,), dim)

    def _lift(self, other):
        if isinstance(other, FieldExpr):
            return other
        if isinstance(other, (int, float, complex, np.number)):
            return FieldExpr.constant(other, self.variables, self.dim)
        return NotImplemented

    def _binary(self, other, op, reflected=False):
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        a, b = (other, self) if reflected else (self, other)
        return FieldExpr(op(a.ast, b.ast), _merge(a.variables, b.variables), max(a.dim, b.dim))

    def __add__(self, other):
        return self._binary(other, add)

    def __radd__(self, other):
        return self._binary(other, add, True)

    def __sub__(self, other):
        return self._binary(other, sub)

    def __rsub__(self, other):
        return self._binary(other, sub, True)

    def __mul__(self, other):
        return self._binary(other, mul)

    def __rmul__(self, other):
        return self._binary(other, mul, True)

    def __truediv__(self, other):
        return self._binary(other, div)

    def __rtruediv__(self, other):
        return self._binary(other, div, True)

    def __neg__(self):
        return FieldExpr(neg(self.ast), self.variables, self.dim)

    def __pow__(self, n: int):
        if int(n) != n:
            raise TypeError("only integer exponents are supported")
        return FieldExpr(power(self.ast, int(n)), self.variables, self.dim)

    def apply(self, name: str) -> "FieldExpr":
        if name not in FUNCTIONS:
            raise ValueError(f"unknown function {name!r}")
        return FieldExpr(func(name, self.ast), self.variables, self.dim)

    # symbolic operations
    def diff(self, var: str) -> "FieldExpr":
        return differentiate(self, var)

    def substitute(self, mapping: Mapping[str, "FieldExpr | complex | float"]) -> "FieldExpr":
        nodes = {}
        variables = [v for v in self.variables if v not in mapping]
        for name, value in mapping.items():
            value = self._lift(value)
            nodes[name] = value.ast
            variables = list(_merge(variables, value.variables))
        return FieldExpr(substitute_node(self.ast, nodes), tuple(variables), self.dim)

    def with_variables(self, variables: Sequence[str]) -> "FieldExpr":
        return FieldExpr(self.ast, _merge(self.variables, variables), self.dim, self.source)

    def free_variables(self) -> set[str]:
        return free_names(self.ast)

    def depends_on(self, var: str) -> bool:
        return var in free_names(self.ast)

    def is_constant(self) -> bool:
        return isinstance(self.ast, Const)

    def unparse(self) -> str:
        return unparse_node(self.ast)

    def __str__(self):
        return self.unparse()

    def __repr__(self):
        return f"FieldExpr({self.unparse()!r}, vars={self.variables})"

    def __call__(self, **assignment):
        return evaluate(self, assignment)

    def evaluate(self, assignment: Mapping[str, object]):
        return evaluate(self, assignment)


def parse_field(source: str, variables: Sequence[str], dim: int = 1) -> FieldExpr:
    """Parse expression text into a :class:`FieldExpr`.

    Raises
    ------
    FieldSyntaxError
        Malformed text; ``offset`` points at the offending character.
    UnknownIdentifier
        A name that is neither declared, a function, nor a constant.
    """
    if not variables:
        raise ValueError("variable list must be nonempty")
    if dim < 1:
        raise ValueError("dim must be positive")
    for name in variables:
        if name in FUNCTIONS or name in CONSTANTS:
            raise ValueError(f"{name!r} is reserved")
    ast = _Parser(source, variables).parse()
    return FieldExpr(ast, tuple(variables), dim, source)


def differentiate(expr: FieldExpr, var: str) -> FieldExpr:
    """Symbolic partial derivative with respect to ``var``."""
    if var not in expr.variables:
        raise UnknownIdentifier(var, expr.variables)
    return FieldExpr(diff_node(expr.ast, var), expr.variables, expr.dim)


def evaluate(expr: FieldExpr, assignment: Mapping[str, object]):
    """Evaluate ``expr``; returns a complex scalar or a complex ndarray.

    Array-valued assignments broadcast.  Raises :class:`DomainError` on a
    pole, ``log(0)``, or any non-finite intermediate.
    """
    needed = free_names(expr.ast)
    missing = needed - set(assignment)
    if missing:
        raise KeyError(f"no value for {sorted(missing)}")
    env = {}
    scalar = True
    for name in needed:
        value = assignment[name]
        if np.ndim(value) > 0:
            scalar = False
        arr = np.asarray(value)
        if arr.dtype.kind in "iub":
            arr = arr.astype(float)
        if arr.dtype.kind == "c" and np.all(arr.imag == 0):
            arr = arr.real.copy()
        env[name] = arr
    with np.errstate(all="ignore"):
        out = _eval(expr.ast, env, {})
    out = np.asarray(out, dtype=complex)
    if scalar:
        return complex(out)
    shape = np.broadcast_shapes(*(np.shape(assignment[n]) for n in needed)) if needed else ()
    return np.broadcast_to(out, shape).copy()


# --------------------------------------------------------------------------
# Admissibility of Lagrangians
# --------------------------------------------------------------------------

@dataclass
class AdmissibilityReport:
    admissible: bool
    samples: int
    failures: list = field(default_factory=list)
    max_imag_on_real: float = 0.0
    max_cr_residual: float = 0.0

    def __bool__(self):
        return self.admissible


def check_admissible(L: FieldExpr, sample_count: int = 64, seed: int = 0,
                     radius: float = 0.25, eps: float = 1e-5, cr_tol: float = 1e-6) -> AdmissibilityReport:
    """Falsification test for an admissible Lagrangian ``L(x, y)``.

    Two checks on random samples: ``Im L == 0`` exactly at real ``(x, y)``,
    and the discretised Cauchy-Riemann residual ``|dL/d(conj y_k)|`` at points
    on small circles around real velocities.  Passing is non-refutation only.
    """
    d = L.dim
    xs, ys = spatial_vars(d), velocity_vars(d)
    allowed = set(xs) | set(ys)
    extra = L.free_variables() - allowed
    if extra:
        raise ValueError(f"Lagrangian may only depend on {sorted(allowed)}, found {sorted(extra)}")
    rng = np.random.default_rng(seed)
    report = AdmissibilityReport(True, sample_count)
    for s in range(sample_count):
        x = rng.normal(scale=2.0, size=d)
        y = rng.normal(scale=2.0, size=d)
        env = {**dict(zip(xs, x)), **dict(zip(ys, y))}
        try:
            value = evaluate(L, env)
        except DomainError as exc:
            report.failures.append(("domain", env, str(exc)))
            continue
        report.max_imag_on_real = max(report.max_imag_on_real, abs(value.imag))
        if value.imag != 0:
            report.failures.append(("imaginary-on-real", env, value.imag))
        theta = rng.uniform(0, 2 * np.pi)
        for k, yk in enumerate(ys):
            z = y[k] + radius * np.exp(1j * theta)
            pts = {}
            for tag, shift in (("+r", eps), ("-r", -eps), ("+i", 1j * eps), ("-i", -1j * eps)):
                e = dict(env)
                e[yk] = z + shift
                try:
                    pts[tag] = evaluate(L, e)
                except DomainError as exc:
                    report.failures.append(("domain", e, str(exc)))
                    break
            if len(pts) < 4:
                continue
            d_re = (pts["+r"] - pts["-r"]) / (2 * eps)
            d_im = (pts["+i"] - pts["-i"]) / (2 * eps)
            residual = abs(0.5 * (d_re + 1j * d_im))
            scale = 1.0 + abs(d_re)
            report.max_cr_residual = max(report.max_cr_residual, residual / scale)
            if residual > cr_tol * scale:
                report.failures.append(("cauchy-riemann", {**env, yk: z}, residual))
    report.admissible = not report.failures
    return report


# --------------------------------------------------------------------------
# Tabulated fields (grid data produced by the Schrodinger bridge)
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabulatedField:
    """Time-independent 1-D field sampled on a uniform grid.

    Linear interpolation inside the grid, linear extrapolation from the
    end segments outside it.
    """

    x: np.ndarray
    values: np.ndarray
    name: str = "tabulated"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.values)
        if x.ndim != 1 or v.shape != x.shape or x.size < 2:
            raise ValueError("tabulated field needs matching 1-D grids with at least two points")
        x.setflags(write=False)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", v)

    variables = ("t", "x1")
    dim = 1

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.x, self.values)
        lo, hi = x < self.x[0], x > self.x[-1]
        if np.any(lo):
            slope = (self.values[1] - self.values[0]) / (self.x[1] - self.x[0])
            out = np.where(lo, self.values[0] + slope * (x - self.x[0]), out)
        if np.any(hi):
            slope = (self.values[-1] - self.values[-2]) / (self.x[-1] - self.x[-2])
            out = np.where(hi, self.values[-1] + slope * (x - self.x[-1]), out)
        return out

    def derivative(self) -> "TabulatedField":
        return TabulatedField(self.x, np.gradient(self.values, self.x), f"d({self.name})")
