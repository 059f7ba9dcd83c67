"""Small arithmetic expression language for boundary data, coefficients and
nonlinearities.

Grammar (see docs/expression-grammar.md for the EBNF):

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-" factor | power
    power  := atom ("^" factor)?          # right associative
    atom   := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Power binds tighter than unary minus, so ``-u^2`` is ``-(u^2)``.  Evaluation
follows IEEE semantics: division by zero and log of non-positive arguments
produce ``inf``/``nan`` values which are returned as-is; estimators are
expected to reject non-finite results themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

VARIABLES = ("x", "y", "z", "u", "theta", "side")

_FUNCTIONS = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sqrt": 1,
    "sign": 1,
    "min": 2,
    "max": 2,
    "clamp": 3,
}


class ExprError(ValueError):
    """Parse or evaluation failure; ``pos`` is a byte offset into the source."""

    def __init__(self, message: str, pos: int | None = None):
        self.pos = pos
        if pos is not None:
            message = f"{message} (at offset {pos})"
        super().__init__(message)


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


Node = Num | Var | Neg | Bin | Call


# --- tokenizer -------------------------------------------------------------

_OPS = set("+-*/^(),")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ExprError(f"bad number literal '{text}'", i) from None
            tokens.append(("num", text, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("name", source[i:j], i))
            i = j
            continue
        raise ExprError(f"unexpected character {c!r}", i)
    tokens.append(("end", "", n))
    return tokens


# --- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def pop(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect(self, text: str):
        kind, val, pos = self.pop()
        if val != text:
            raise ExprError(f"expected '{text}', found '{val or 'end of input'}'", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprError(f"trailing input '{val}'", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.pop()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.pop()[1]
            node = Bin(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.peek()[1] == "-":
            self.pop()
            return Neg(self.factor())
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        if self.peek()[1] == "^":
            self.pop()
            node = Bin("^", node, self.factor())
        return node

    def atom(self) -> Node:
        kind, val, pos = self.pop()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in _FUNCTIONS:
                    raise ExprError(f"unknown function '{val}'", pos)
                self.pop()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.pop()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != _FUNCTIONS[val]:
                    raise ExprError(
                        f"'{val}' takes {_FUNCTIONS[val]} argument(s), got {len(args)}", pos
                    )
                return Call(val, tuple(args))
            if val not in VARIABLES:
                raise ExprError(f"unknown identifier '{val}'", pos)
            return Var(val)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprError(f"expected value, found '{val or 'end of input'}'", pos)


# --- printing --------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _print(node: Node, parent_prec: int = 0) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = _print(node.arg, _PREC["neg"])
        text = f"-{inner}"
        return f"({text})" if parent_prec > _PREC["neg"] else text
    if isinstance(node, Call):
        args = ",".join(_print(a) for a in node.args)
        return f"{node.fn}({args})"
    # "a-(b-c)" and "a/(b/c)" keep parens via prec+1 on the right; "^" is
    # right associative so the roles flip
    prec = _PREC[node.op]
    left = _print(node.left, prec if node.op != "^" else prec + 1)
    right = _print(node.right, prec + 1 if node.op != "^" else prec)
    text = f"{left}{node.op}{right}"
    return f"({text})" if parent_prec > prec else text


# --- compilation -----------------------------------------------------------


def _pow(base, expo):
    expo_arr = np.asarray(expo, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if expo_arr.ndim == 0 and float(expo_arr) == int(expo_arr):
            return np.power(np.asarray(base, dtype=float), int(expo_arr))
        # real power through exp/log: negative bases yield nan
        return np.exp(expo_arr * np.log(np.asarray(base, dtype=float)))


def _compile(node: Node) -> Callable[[Mapping[str, object]], object]:
    if isinstance(node, Num):
        v = node.value
        return lambda env: v
    if isinstance(node, Var):
        name = node.name
        def load(env, name=name):
            try:
                return env[name]
            except KeyError:
                raise ExprError(f"unbound variable '{name}'") from None
        return load
    if isinstance(node, Neg):
        f = _compile(node.arg)
        return lambda env: np.negative(f(env))
    if isinstance(node, Bin):
        fl, fr = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "+":
            return lambda env: np.add(fl(env), fr(env))
        if op == "-":
            return lambda env: np.subtract(fl(env), fr(env))
        if op == "*":
            return lambda env: np.multiply(fl(env), fr(env))
        if op == "/":
            def div(env):
                with np.errstate(divide="ignore", invalid="ignore"):
                    return np.divide(fl(env), fr(env))
            return div
        return lambda env: _pow(fl(env), fr(env))
    fn = node.fn
    fargs = tuple(_compile(a) for a in node.args)
    if fn == "clamp":
        fa, flo, fhi = fargs
        return lambda env: np.minimum(np.maximum(fa(env), flo(env)), fhi(env))
    if fn == "min":
        fa, fb = fargs
        return lambda env: np.minimum(fa(env), fb(env))
    if fn == "max":
        fa, fb = fargs
        return lambda env: np.maximum(fa(env), fb(env))
    fa = fargs[0]
    if fn in ("log", "sqrt"):
        ufunc = getattr(np, fn)
        def guarded(env, ufunc=ufunc):
            with np.errstate(divide="ignore", invalid="ignore"):
                return ufunc(fa(env))
        return guarded
    ufunc = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs, "sign": np.sign}[fn]
    return lambda env: ufunc(fa(env))


def _free_vars(node: Node, out: set) -> set:
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, Neg):
        _free_vars(node.arg, out)
    elif isinstance(node, Bin):
        _free_vars(node.left, out)
        _free_vars(node.right, out)
    elif isinstance(node, Call):
        for a in node.args:
            _free_vars(a, out)
    return out


# --- public API -------------------------------------------------------------


class Expression:
    """A parsed expression over the variables {x, y, z, u, theta, side}.

    Instances are immutable; :meth:`__call__` is pure and reentrant and works
    on scalars or numpy arrays alike.
    """

    __slots__ = ("source", "ast", "_run", "free_variables")

    def __init__(self, source: str, ast: Node):
        self.source = source
        self.ast = ast
        self._run = _compile(ast)
        self.free_variables = frozenset(_free_vars(ast, set()))

    def __call__(self, **bindings):
        return self.evaluate(bindings)

    def evaluate(self, bindings: Mapping[str, object]):
        missing = self.free_variables - set(bindings)
        if missing:
            raise ExprError(f"unbound variable '{sorted(missing)[0]}'")
        out = self._run(bindings)
        if np.ndim(out) == 0:
            return float(out)
        return np.asarray(out, dtype=float)

    def to_source(self) -> str:
        return _print(self.ast)

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and self.ast == other.ast

    def __hash__(self):
        return hash(self.source)


def parse(source: str) -> Expression:
    """Parse ``source`` into an :class:`Expression`.

    Raises :class:`ExprError` carrying the byte offset of the first bad token.
    """
    return Expression(source, _Parser(source).parse())


def evaluate(expression: Expression, bindings: Mapping[str, float]):
    return expression.evaluate(bindings)


def check_nonincreasing_in_u(
    expression: Expression,
    x_probes: Sequence[Sequence[float]],
    u_lo: float = -8.0,
    u_hi: float = 8.0,
    n_u: int = 64,
    tol: float = 1e-9,
) -> tuple[bool, float]:
    """Sample-check that u -> f(x, u) is nonincreasing.

    Returns (ok, worst_increase).  Used to validate reaction nonlinearities
    before a semilinear solve; 64 u-values per probe by default.
    """
    u_grid = np.linspace(u_lo, u_hi, n_u)
    worst = 0.0
    for p in x_probes:
        p = np.asarray(p, dtype=float)
        env = {"x": p[0], "y": p[1] if len(p) > 1 else 0.0,
               "z": p[2] if len(p) > 2 else 0.0, "theta": 0.0, "side": 0.0,
               "u": u_grid}
        vals = np.asarray(expression.evaluate(env), dtype=float)
        if vals.ndim == 0:
            continue
        rise = float(np.max(np.diff(vals)))
        worst = max(worst, rise)
    scale = max(1.0, abs(worst))
    return worst <= tol * scale, worst
