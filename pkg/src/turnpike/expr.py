"""Scalar expressions over state and control variables.

Expressions are parsed from text into an immutable AST, evaluated in IEEE
double precision, differentiated symbolically, and compiled to Python
callables for three numeric backends: plain floats (``math``), numpy arrays
(vectorized over nodes) and ``gmpy2.mpfr`` (extended precision).

Grammar (EBNF)::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = "-" , unary | power ;
    power   = primary , [ "^" , unary ] ;          (* exponent must fold to a constant *)
    primary = number | variable | func , "(" , expr , ")" | "(" , expr , ")" ;
    variable = ("x" | "u") , digit , { digit } ;   (* 1-based index *)
    func    = "sin" | "cos" | "exp" | "log" | "sqrt" | "tanh" | "smoothstep"
            | "smoothstep_d1" | ... | "smoothstep_d5" ;
    number  = digits , [ "." , digits ] , [ ("e" | "E") , [ "+" | "-" ] , digits ] ;

``^`` binds tighter than unary minus (``-x1^2`` is ``-(x1^2)``) and is
right-associative. Implicit multiplication is not accepted.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Expression",
    "Const",
    "Var",
    "Neg",
    "BinOp",
    "Pow",
    "Call",
    "VectorField",
    "ExpressionError",
    "ExpressionSyntaxError",
    "UnknownIdentifierError",
    "VariableIndexError",
    "ExpressionDomainError",
    "parse",
    "evaluate",
    "differentiate",
    "simplify",
    "to_string",
    "compile_exprs",
    "smoothstep",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh", "smoothstep")
SMOOTHSTEP_ORDERS = 5
_SMOOTH_NAMES = ["smoothstep"] + [f"smoothstep_d{k}" for k in range(1, SMOOTHSTEP_ORDERS + 1)]
KNOWN_FUNCTIONS = frozenset(FUNCTIONS) | frozenset(_SMOOTH_NAMES)


class ExpressionError(ValueError):
    pass


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExpressionError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class VariableIndexError(ExpressionError):
    pass


class ExpressionDomainError(ExpressionError, ArithmeticError):
    """Raised instead of returning NaN/inf for log, sqrt, division, pow."""


# ---------------------------------------------------------------------------
# AST


class Expression:
    __slots__ = ()

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True, slots=True)
class Const(Expression):
    value: float


@dataclass(frozen=True, slots=True)
class Var(Expression):
    kind: str  # "x", "u"; "l" (costate) is internal only
    index: int  # 0-based


@dataclass(frozen=True, slots=True)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True, slots=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression


@dataclass(frozen=True, slots=True)
class Pow(Expression):
    base: Expression
    exponent: float


@dataclass(frozen=True, slots=True)
class Call(Expression):
    name: str
    arg: Expression


ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(e: Expression, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


# smart constructors; folding uses the same float ops as evaluation


def neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return BinOp("-", a, b.arg)
    return BinOp("+", a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return BinOp("+", a, b.arg)
    return BinOp("-", a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return BinOp("*", a, b)


def div(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return BinOp("/", a, b)


def power(base: Expression, exponent: float) -> Expression:
    if isinstance(base, Const):
        return Const(_pow_float(base.value, exponent))
    if exponent == 1.0:
        return base
    if exponent == 0.0:
        return ONE
    return Pow(base, float(exponent))


def call(name: str, arg: Expression) -> Expression:
    if isinstance(arg, Const):
        return Const(_FLOAT_FUNCS[name](arg.value))
    return Call(name, arg)


def simplify(e: Expression) -> Expression:
    """Rebuild ``e`` bottom-up through the folding constructors."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Neg):
        return neg(simplify(e.arg))
    if isinstance(e, BinOp):
        return _BINOPS[e.op](simplify(e.left), simplify(e.right))
    if isinstance(e, Pow):
        return power(simplify(e.base), e.exponent)
    if isinstance(e, Call):
        return call(e.name, simplify(e.arg))
    raise TypeError(e)


_BINOPS = {"+": add, "-": sub, "*": mul, "/": div}


# ---------------------------------------------------------------------------
# smoothstep: 1 on s <= 1, 0 on s >= 4, 1 - p((s-1)/3) between, p quintic


def _p_deriv(k: int, t):
    # p(t) = 10 t^3 - 15 t^4 + 6 t^5 and its derivatives
    if k == 0:
        return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    if k == 1:
        return 30.0 * t * t * (1.0 - t) * (1.0 - t)
    if k == 2:
        return t * (60.0 + t * (-180.0 + 120.0 * t))
    if k == 3:
        return 60.0 + t * (-360.0 + 360.0 * t)
    if k == 4:
        return -360.0 + 720.0 * t
    if k == 5:
        return 720.0 + 0.0 * t
    return 0.0 * t


def _smooth_scalar(k: int):
    scale = -1.0 / 3.0**k

    def f(s):
        if s <= 1.0:
            return 1.0 if k == 0 else 0.0
        if s >= 4.0:
            return 0.0
        t = (s - 1.0) / 3.0
        if k == 0:
            return 1.0 - _p_deriv(0, t)
        return scale * _p_deriv(k, t)

    f.__name__ = _SMOOTH_NAMES[k]
    return f


def _smooth_array(k: int):
    scale = -1.0 / 3.0**k

    def f(s):
        s = np.asarray(s, dtype=float)
        t = np.clip((s - 1.0) / 3.0, 0.0, 1.0)
        inside = (s > 1.0) & (s < 4.0)
        if k == 0:
            return 1.0 - _p_deriv(0, t)
        return np.where(inside, scale * _p_deriv(k, t), 0.0)

    return f


def smoothstep(s: float) -> float:
    """Decreasing C^2 cutoff: 1 for s <= 1, 0 for s >= 4."""
    return _smooth_scalar(0)(s)


# ---------------------------------------------------------------------------
# float evaluation (interpreter)


def _pow_float(b: float, e: float) -> float:
    if b == 0.0 and e < 0.0:
        raise ExpressionDomainError("zero raised to a negative power")
    if b < 0.0 and not float(e).is_integer():
        raise ExpressionDomainError("negative base with non-integer exponent")
    try:
        return b ** (int(e) if float(e).is_integer() else e)
    except OverflowError as exc:
        raise ExpressionDomainError(str(exc)) from exc


def _checked(fn: Callable[[float], float], name: str) -> Callable[[float], float]:
    def g(v: float) -> float:
        try:
            return fn(v)
        except (ValueError, OverflowError) as exc:
            raise ExpressionDomainError(f"{name}({v!r}): {exc}") from exc

    return g


_FLOAT_FUNCS: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": _checked(math.exp, "exp"),
    "log": _checked(math.log, "log"),
    "sqrt": _checked(math.sqrt, "sqrt"),
    "tanh": math.tanh,
}
for _k, _name in enumerate(_SMOOTH_NAMES):
    _FLOAT_FUNCS[_name] = _smooth_scalar(_k)


def evaluate(e: Expression, x: Sequence[float], u: Sequence[float] = (), lam: Sequence[float] = ()) -> float:
    """Evaluate ``e`` in double precision; domain errors raise."""
    env = {"x": x, "u": u, "l": lam}
    return _eval(e, env)


def _eval(e: Expression, env) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return float(env[e.kind][e.index])
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, BinOp):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if b == 0.0:
            raise ExpressionDomainError("division by zero")
        return a / b
    if isinstance(e, Pow):
        return _pow_float(_eval(e.base, env), e.exponent)
    if isinstance(e, Call):
        return _FLOAT_FUNCS[e.name](_eval(e.arg, env))
    raise TypeError(e)


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expression, var: Var | str) -> Expression:
    """Symbolic partial derivative of ``e`` with respect to ``var``.

    ``var`` is a :class:`Var` or a name such as ``"x2"`` / ``"u1"``.
    """
    if isinstance(var, str):
        var = _var_from_name(var)
    return _diff(e, var)


def _var_from_name(name: str) -> Var:
    m = re.fullmatch(r"([xul])(\d+)", name)
    if not m or int(m.group(2)) < 1:
        raise ExpressionError(f"not a variable name: {name!r}")
    return Var(m.group(1), int(m.group(2)) - 1)


def _diff(e: Expression, v: Var) -> Expression:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e == v else ZERO
    if isinstance(e, Neg):
        return neg(_diff(e.arg, v))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        da, db = _diff(a, v), _diff(b, v)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        # (a/b)' = a'/b - a b' / b^2
        return sub(div(da, b), div(mul(a, db), power(b, 2.0)))
    if isinstance(e, Pow):
        db = _diff(e.base, v)
        if _is_const(db, 0.0):
            return ZERO
        k = e.exponent
        return mul(mul(Const(k), power(e.base, k - 1.0)), db)
    if isinstance(e, Call):
        da = _diff(e.arg, v)
        if _is_const(da, 0.0):
            return ZERO
        a = e.arg
        n = e.name
        if n == "sin":
            outer = call("cos", a)
        elif n == "cos":
            outer = neg(call("sin", a))
        elif n == "exp":
            outer = call("exp", a)
        elif n == "log":
            outer = div(ONE, a)
        elif n == "sqrt":
            outer = div(Const(0.5), call("sqrt", a))
        elif n == "tanh":
            outer = sub(ONE, power(call("tanh", a), 2.0))
        else:
            k = _SMOOTH_NAMES.index(n)
            if k == SMOOTHSTEP_ORDERS:
                return ZERO
            outer = call(_SMOOTH_NAMES[k + 1], a)
        return mul(outer, da)
    raise TypeError(e)


def variables(e: Expression) -> set[Var]:
    out: set[Var] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node)
        elif isinstance(node, Neg):
            stack.append(node.arg)
        elif isinstance(node, BinOp):
            stack.extend((node.left, node.right))
        elif isinstance(node, Pow):
            stack.append(node.base)
        elif isinstance(node, Call):
            stack.append(node.arg)
    return out


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_number(v: float) -> str:
    s = repr(float(v))
    return f"({s})" if s.startswith("-") else s


def _prec(e: Expression) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Pow):
        return 4
    return 5


def to_string(e: Expression) -> str:
    """Print ``e`` so that ``parse(to_string(e))`` rebuilds an equal tree."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        if e.kind == "l":
            return f"lambda{e.index + 1}"
        return f"{e.kind}{e.index + 1}"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        if _prec(e.arg) < 4:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left = to_string(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = to_string(e.right)
        # right operand of a same-level operator needs parentheses
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _prec(e.base) < 5:
            base = f"({base})"
        k = e.exponent
        ks = repr(int(k)) if k.is_integer() and abs(k) < 1e15 else repr(k)
        if k < 0:
            ks = f"({ks})"
        return f"{base}^{ks}"
    if isinstance(e, Call):
        return f"{e.name}({to_string(e.arg)})"
    raise TypeError(e)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str, n: int, m: int):
        self.text = text
        self.n = n
        self.m = m
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            mt = _TOKEN.match(text, pos)
            if mt is None or mt.end() == pos:
                bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ExpressionSyntaxError(f"unexpected character {text[bad]!r}", bad)
            kind = mt.lastgroup
            self.tokens.append((kind, mt.group(kind), mt.start(kind)))
            pos = mt.end()
        self.end = len(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("eof", "", self.end)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind != "op":
            raise ExpressionSyntaxError(f"expected {value!r}", off)

    def parse(self) -> Expression:
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "eof":
            raise ExpressionSyntaxError(f"unexpected token {val!r}", off)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expression:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self) -> Expression:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            off = self.take()[2]
            ex = self.unary()
            if not isinstance(ex, Const):
                raise ExpressionSyntaxError("exponent must be a constant", off + 1)
            return power(base, ex.value)
        return base

    def primary(self) -> Expression:
        kind, val, off = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "id":
            if val in KNOWN_FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return call(val, arg)
            mt = re.fullmatch(r"([xu])(\d+)", val)
            if mt is None:
                raise UnknownIdentifierError(val, off)
            idx = int(mt.group(2))
            limit = self.n if mt.group(1) == "x" else self.m
            if idx < 1 or idx > limit:
                raise VariableIndexError(
                    f"variable {val!r} at offset {off} out of range (n={self.n}, m={self.m})"
                )
            return Var(mt.group(1), idx - 1)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "eof":
            raise ExpressionSyntaxError("unexpected end of input", off)
        raise ExpressionSyntaxError(f"unexpected token {val!r}", off)


def parse(text: str, n: int, m: int) -> Expression:
    if not text or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    return _Parser(text, n, m).parse()


# ---------------------------------------------------------------------------
# compilation


def _src(e: Expression) -> str:
    if isinstance(e, Const):
        return repr(e.value) if e.value >= 0 else f"({e.value!r})"
    if isinstance(e, Var):
        return f"{e.kind}[{e.index}]"
    if isinstance(e, Neg):
        return f"(-{_src(e.arg)})"
    if isinstance(e, BinOp):
        if e.op == "/":
            return f"_div({_src(e.left)}, {_src(e.right)})"
        return f"({_src(e.left)} {e.op} {_src(e.right)})"
    if isinstance(e, Pow):
        k = e.exponent
        if k.is_integer():
            return f"_ipow({_src(e.base)}, {int(k)})"
        return f"_fpow({_src(e.base)}, {k!r})"
    if isinstance(e, Call):
        return f"{e.name}({_src(e.arg)})"
    raise TypeError(e)


def _float_ns() -> dict:
    def _div(a, b):
        if b == 0.0:
            raise ExpressionDomainError("division by zero")
        return a / b

    def _ipow(b, k):
        if k < 0 and b == 0:
            raise ExpressionDomainError("zero raised to a negative power")
        return b**k

    def _fpow(b, k):
        return _pow_float(b, k)

    ns = dict(_FLOAT_FUNCS)
    ns.update(_div=_div, _ipow=_ipow, _fpow=_fpow)
    return ns


def _numpy_ns() -> dict:
    ns = {
        "sin": np.sin,
        "cos": np.cos,
        "exp": np.exp,
        "log": np.log,
        "sqrt": np.sqrt,
        "tanh": np.tanh,
        "_div": np.divide,
        "_ipow": lambda b, k: np.asarray(b, dtype=float) ** k,
        "_fpow": np.power,
    }
    for k, name in enumerate(_SMOOTH_NAMES):
        ns[name] = _smooth_array(k)
    return ns


def _mpfr_ns() -> dict:
    import gmpy2

    def _div(a, b):
        if b == 0:
            raise ExpressionDomainError("division by zero")
        return a / b

    def _ipow(b, k):
        return b**k

    def _fpow(b, k):
        if b < 0:
            raise ExpressionDomainError("negative base with non-integer exponent")
        return b ** gmpy2.mpfr(k)

    def _guard(fn, name):
        def g(v):
            if name in ("log", "sqrt") and (v < 0 or (name == "log" and v == 0)):
                raise ExpressionDomainError(f"{name} of non-positive argument")
            return fn(v)

        return g

    ns = {
        "sin": gmpy2.sin,
        "cos": gmpy2.cos,
        "exp": gmpy2.exp,
        "log": _guard(gmpy2.log, "log"),
        "sqrt": _guard(gmpy2.sqrt, "sqrt"),
        "tanh": gmpy2.tanh,
        "_div": _div,
        "_ipow": _ipow,
        "_fpow": _fpow,
    }
    for k, name in enumerate(_SMOOTH_NAMES):
        ns[name] = _smooth_scalar(k)
    return ns


_BACKENDS = {"float": _float_ns, "numpy": _numpy_ns, "mpfr": _mpfr_ns}


@lru_cache(maxsize=None)
def _namespace(backend: str) -> dict:
    return _BACKENDS[backend]()


def compile_exprs(exprs: Sequence[Expression], backend: str = "float") -> Callable:
    """Compile expressions into ``fn(x, u, l) -> tuple`` for ``backend``.

    ``backend`` is ``"float"``, ``"numpy"`` (arguments are row-indexable
    arrays, e.g. shape (n, N)) or ``"mpfr"``.
    """
    body = ", ".join(_src(e) for e in exprs)
    src = f"lambda x, u, l=(): ({body}{',' if len(exprs) == 1 else ''})"
    fn = eval(src, dict(_namespace(backend)))  # noqa: S307 - generated from our own AST
    if backend == "numpy":
        inner = fn

        def fn(x, u, l=()):  # noqa: E741
            with np.errstate(divide="raise", invalid="raise", over="ignore"):
                try:
                    return inner(x, u, l)
                except FloatingPointError as exc:
                    raise ExpressionDomainError(str(exc)) from exc

    elif backend == "mpfr":
        import gmpy2

        inner = fn

        def fn(x, u, l=()):  # noqa: E741
            try:
                return inner(x, u, l)
            except (gmpy2.InvalidOperationError, gmpy2.DivisionByZeroError, ZeroDivisionError) as exc:
                raise ExpressionDomainError(str(exc)) from exc

    return fn


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorField:
    """A list of expressions sharing declared dimensions ``(n, m)``."""

    components: tuple[Expression, ...]
    n: int
    m: int

    @classmethod
    def parse(cls, texts: Sequence[str], n: int, m: int) -> "VectorField":
        return cls(tuple(parse(t, n, m) for t in texts), n, m)

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i: int) -> Expression:
        return self.components[i]

    def texts(self) -> list[str]:
        return [to_string(c) for c in self.components]

    def evaluate(self, x, u=()) -> np.ndarray:
        return np.array([evaluate(c, x, u) for c in self.components])

    def jacobian(self, kind: str) -> list[list[Expression]]:
        size = self.n if kind == "x" else self.m
        return [[differentiate(c, Var(kind, j)) for j in range(size)] for c in self.components]
