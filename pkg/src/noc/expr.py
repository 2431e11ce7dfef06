"""Tiny arithmetic expression language used by problem files.

Supports + - * / ^ (right-associative power), unary minus, parentheses,
numeric literals, named variables, and the functions sin, cos, tan, exp,
log, sqrt, abs. Expressions evaluate against a dict of numpy-compatible
values and differentiate symbolically, so problems defined in text files
get analytic first and second derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Expr", "ExprError", "compile_expr", "parse_expr", "python_source"]


class ExprError(ValueError):
    """Syntax or validation error in an expression, with column info."""

    def __init__(self, message: str, col: int | None = None):
        super().__init__(message if col is None else f"{message} (column {col})")
        self.col = col


_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}


# ----------------------------------------------------------------------------
# AST
# ----------------------------------------------------------------------------

class Expr:
    """Base class for expression nodes. Nodes are immutable and picklable."""

    def eval(self, env: dict) -> float:
        raise NotImplementedError

    def diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def free_vars(self) -> frozenset[str]:
        raise NotImplementedError

    # convenience operators so generated code stays readable
    def __add__(self, other):
        return _add(self, _as_expr(other))

    def __sub__(self, other):
        return _sub(self, _as_expr(other))

    def __mul__(self, other):
        return _mul(self, _as_expr(other))

    def __neg__(self):
        return _neg(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def eval(self, env):
        return self.value

    def diff(self, var):
        return Num(0.0)

    def free_vars(self):
        return frozenset()

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise ExprError(f"unknown variable {self.name!r}") from None

    def diff(self, var):
        return Num(1.0 if var == self.name else 0.0)

    def free_vars(self):
        return frozenset({self.name})

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def eval(self, env):
        return -self.arg.eval(env)

    def diff(self, var):
        return _neg(self.arg.diff(var))

    def free_vars(self):
        return self.arg.free_vars()

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr

    def eval(self, env):
        return self.left.eval(env) + self.right.eval(env)

    def diff(self, var):
        return _add(self.left.diff(var), self.right.diff(var))

    def free_vars(self):
        return self.left.free_vars() | self.right.free_vars()

    def __str__(self):
        return f"({self.left} + {self.right})"


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr

    def eval(self, env):
        return self.left.eval(env) - self.right.eval(env)

    def diff(self, var):
        return _sub(self.left.diff(var), self.right.diff(var))

    def free_vars(self):
        return self.left.free_vars() | self.right.free_vars()

    def __str__(self):
        return f"({self.left} - {self.right})"


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr

    def eval(self, env):
        return self.left.eval(env) * self.right.eval(env)

    def diff(self, var):
        return _add(_mul(self.left.diff(var), self.right),
                    _mul(self.left, self.right.diff(var)))

    def free_vars(self):
        return self.left.free_vars() | self.right.free_vars()

    def __str__(self):
        return f"({self.left} * {self.right})"


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr

    def eval(self, env):
        return self.left.eval(env) / self.right.eval(env)

    def diff(self, var):
        # (u/v)' = u'/v - u v'/v^2
        du = self.left.diff(var)
        dv = self.right.diff(var)
        return _sub(_div(du, self.right),
                    _div(_mul(self.left, dv), _mul(self.right, self.right)))

    def free_vars(self):
        return self.left.free_vars() | self.right.free_vars()

    def __str__(self):
        return f"({self.left} / {self.right})"


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: Expr

    def eval(self, env):
        return self.base.eval(env) ** self.exponent.eval(env)

    def diff(self, var):
        db = self.base.diff(var)
        de = self.exponent.diff(var)
        if isinstance(self.exponent, Num):
            # constant exponent: n * b^(n-1) * b'
            n = self.exponent.value
            return _mul(_mul(Num(n), _pow(self.base, Num(n - 1.0))), db)
        # general case: b^e * (e' log b + e b'/b)
        return _mul(self, _add(_mul(de, Call("log", self.base)),
                               _div(_mul(self.exponent, db), self.base)))

    def free_vars(self):
        return self.base.free_vars() | self.exponent.free_vars()

    def __str__(self):
        return f"({self.base} ^ {self.exponent})"


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def eval(self, env):
        return _FUNCTIONS[self.func](self.arg.eval(env))

    def diff(self, var):
        da = self.arg.diff(var)
        a = self.arg
        if self.func == "sin":
            outer = Call("cos", a)
        elif self.func == "cos":
            outer = _neg(Call("sin", a))
        elif self.func == "tan":
            outer = _div(Num(1.0), _pow(Call("cos", a), Num(2.0)))
        elif self.func == "exp":
            outer = self
        elif self.func == "log":
            outer = _div(Num(1.0), a)
        elif self.func == "sqrt":
            outer = _div(Num(0.5), self)
        elif self.func == "abs":
            # subgradient choice sign(a); not differentiable at 0
            outer = _div(a, self)
        else:  # pragma: no cover - parser only admits known names
            raise ExprError(f"cannot differentiate function {self.func!r}")
        return _mul(outer, da)

    def free_vars(self):
        return self.arg.free_vars()

    def __str__(self):
        return f"{self.func}({self.arg})"


# ----------------------------------------------------------------------------
# simplifying constructors (constant folding + unit/zero elimination)
# ----------------------------------------------------------------------------

def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Num(float(x))


def _is_num(e: Expr, value: float | None = None) -> bool:
    if not isinstance(e, Num):
        return False
    return value is None or e.value == value


def _add(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    return Add(a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return _neg(b)
    return Sub(a, b)


def _neg(a: Expr) -> Expr:
    if _is_num(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a, -1.0):
        return _neg(b)
    if _is_num(b, -1.0):
        return _neg(a)
    return Mul(a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b) and b.value != 0.0:
        return Num(a.value / b.value)
    return Div(a, b)


def _pow(a: Expr, b: Expr) -> Expr:
    if _is_num(b, 1.0):
        return a
    if _is_num(b, 0.0):
        return Num(1.0)
    if _is_num(a) and _is_num(b):
        return Num(a.value ** b.value)
    return Pow(a, b)


# ----------------------------------------------------------------------------
# tokenizer + recursive-descent parser
# ----------------------------------------------------------------------------

_OPERATORS = set("+-*/^(),")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    """Return (kind, value, column) tuples; kind in {num, name, op}."""
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPERATORS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            seen_exp = False
            while j < n:
                ch = text[j]
                if ch.isdigit() or ch == ".":
                    j += 1
                elif ch in "eE" and j + 1 < n and (text[j + 1].isdigit() or text[j + 1] in "+-"):
                    seen_exp = True
                    j += 2
                elif seen_exp and ch.isdigit():
                    j += 1
                else:
                    break
            lit = text[i:j]
            try:
                float(lit)
            except ValueError:
                raise ExprError(f"bad numeric literal {lit!r}", i) from None
            tokens.append(("num", lit, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ExprError(f"unexpected character {c!r}", i)
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]], text: str):
        self.tokens = tokens
        self.pos = 0
        self.text = text

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else ("end", "", len(self.text))

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, value, col = self.take()
        if kind != "op" or value != op:
            raise ExprError(f"expected {op!r}, found {value!r}", col)

    # grammar: expr := term (('+'|'-') term)*
    #          term := factor (('*'|'/') factor)*
    #          factor := '-' factor | '+' factor | power
    #          power := atom ('^' factor)?          (right assoc; binds above unary -)
    #          atom := num | name | name '(' expr ')' | '(' expr ')'
    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.take()
                rhs = self.parse_term()
                node = _add(node, rhs) if value == "+" else _sub(node, rhs)
            else:
                return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.take()
                rhs = self.parse_factor()
                node = _mul(node, rhs) if value == "*" else _div(node, rhs)
            else:
                return node

    def parse_factor(self) -> Expr:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            return _neg(self.parse_factor())
        if kind == "op" and value == "+":
            self.take()
            return self.parse_factor()
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.take()
            return _pow(base, self.parse_factor())
        return base

    def parse_atom(self) -> Expr:
        kind, value, col = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "(":
                if value not in _FUNCTIONS:
                    raise ExprError(f"unknown function {value!r}", col)
                self.take()
                arg = self.parse_expr()
                self.expect_op(")")
                return Call(value, arg)
            return Var(value)
        if kind == "op" and value == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ExprError(f"unexpected token {value!r}", col)


def parse_expr(text: str, allowed_vars: set[str] | frozenset[str] | None = None) -> Expr:
    """Parse ``text`` into an Expr; optionally validate its variable set.

    math.pi is available as the name ``pi``.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise ExprError("empty expression")
    parser = _Parser(tokens, text)
    node = parser.parse_expr()
    kind, value, col = parser.peek()
    if kind != "end":
        raise ExprError(f"trailing input starting at {value!r}", col)
    node = _substitute_constants(node)
    if allowed_vars is not None:
        extra = node.free_vars() - set(allowed_vars)
        if extra:
            raise ExprError("unknown variable(s): " + ", ".join(sorted(extra)))
    return node


def _substitute_constants(node: Expr) -> Expr:
    if isinstance(node, Var) and node.name == "pi":
        return Num(math.pi)
    if isinstance(node, Neg):
        return _neg(_substitute_constants(node.arg))
    if isinstance(node, Add):
        return _add(_substitute_constants(node.left), _substitute_constants(node.right))
    if isinstance(node, Sub):
        return _sub(_substitute_constants(node.left), _substitute_constants(node.right))
    if isinstance(node, Mul):
        return _mul(_substitute_constants(node.left), _substitute_constants(node.right))
    if isinstance(node, Div):
        return _div(_substitute_constants(node.left), _substitute_constants(node.right))
    if isinstance(node, Pow):
        return _pow(_substitute_constants(node.base), _substitute_constants(node.exponent))
    if isinstance(node, Call):
        return Call(node.func, _substitute_constants(node.arg))
    return node


# ----------------------------------------------------------------------------
# compilation to plain python callables (hot integrator loops)
# ----------------------------------------------------------------------------

def python_source(node: Expr) -> str:
    """Emit a python expression string equivalent to ``node`` (numpy funcs)."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{python_source(node.arg)})"
    if isinstance(node, Add):
        return f"({python_source(node.left)} + {python_source(node.right)})"
    if isinstance(node, Sub):
        return f"({python_source(node.left)} - {python_source(node.right)})"
    if isinstance(node, Mul):
        return f"({python_source(node.left)} * {python_source(node.right)})"
    if isinstance(node, Div):
        return f"({python_source(node.left)} / {python_source(node.right)})"
    if isinstance(node, Pow):
        return f"({python_source(node.base)} ** {python_source(node.exponent)})"
    if isinstance(node, Call):
        return f"np.{'abs' if node.func == 'abs' else node.func}({python_source(node.arg)})"
    raise TypeError(f"cannot compile node of type {type(node).__name__}")


def compile_expr(node: Expr, varnames: tuple[str, ...]):
    """Compile an Expr into a positional-argument callable.

    Much faster than Expr.eval in tight loops; the callable accepts the
    variables in the given order and broadcasts over numpy arrays.
    """
    missing = node.free_vars() - set(varnames)
    if missing:
        raise ExprError("unbound variable(s): " + ", ".join(sorted(missing)))
    src = f"lambda {', '.join(varnames)}: {python_source(node)}"
    return eval(src, {"np": np, "__builtins__": {}})  # noqa: S307 - AST-derived source
