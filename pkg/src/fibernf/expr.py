"""Expression mini-language for Hamiltonians and potentials.

Grammar (case-sensitive)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | power
    power := atom (('^' | '**') unary)?
    atom  := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

Names are the phase variables ``q0..qd`` and ``p0..pd``, the constant ``pi``,
and any parameter supplied in the ``params`` table; parameters are replaced
by their numeric value at parse time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatchError, ExpressionSyntaxError, UnknownIdentifierError

FUNCTIONS = ("sqrt", "sin", "cos", "exp", "log")

# opcodes shared with the evaluation kernels
OP_CONST, OP_VAR, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_NEG = range(8)
OP_SQRT, OP_SIN, OP_COS, OP_EXP, OP_LOG = range(8, 13)
_FUNC_OPS = {"sqrt": OP_SQRT, "sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG}
_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}


class Node:
    __slots__ = ()

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return power(self, _lift(other))

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True, eq=True, repr=False)
class Num(Node):
    value: float

    def __repr__(self):
        return f"Num({self.value!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Var(Node):
    name: str

    def __repr__(self):
        return f"Var({self.name!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Neg(Node):
    arg: Node

    def __repr__(self):
        return f"Neg({self.arg!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Call(Node):
    fn: str
    arg: Node

    def __repr__(self):
        return f"Call({self.fn!r}, {self.arg!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Bin(Node):
    op: str
    left: Node
    right: Node

    def __repr__(self):
        return f"Bin({self.op!r}, {self.left!r}, {self.right!r})"


ZERO = Num(0.0)
ONE = Num(1.0)


def _lift(x):
    if isinstance(x, Node):
        return x
    return Num(float(x))


def _is_num(node, value=None):
    return isinstance(node, Num) and (value is None or node.value == value)


# -- simplifying constructors (constant folding and unit/zero elimination only)

def add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Bin("+", a, b)


def sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return neg(b)
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    return Bin("-", a, b)


def mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return ZERO
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, -1.0):
        return neg(b)
    if _is_num(b, -1.0):
        return neg(a)
    return Bin("*", a, b)


def div(a, b):
    if _is_num(a, 0.0):
        return ZERO
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b) and b.value != 0.0:
        return Num(a.value / b.value)
    return Bin("/", a, b)


def neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a, b):
    if _is_num(b, 0.0):
        return ONE
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        try:
            return Num(float(a.value**b.value))
        except (OverflowError, ZeroDivisionError):
            pass
    return Bin("^", a, b)


def call(fn, a):
    return Call(fn, a)


# -- tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)
_VAR_RE = re.compile(r"([qp])(\d+)$")


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "op" and value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text, d, params):
        self.text = text
        self.d = d
        self.params = params
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ExpressionSyntaxError(f"expected {value!r}, found {found}", pos, self.text)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {val!r}", pos, self.text)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            m = _VAR_RE.match(val)
            if m is not None:
                idx = int(m.group(2))
                if self.d is not None and idx > self.d:
                    raise DimensionMismatchError(
                        f"variable {val} exceeds dimension d={self.d}", pos, self.text
                    )
                return Var(val)
            if val in self.params:
                return Num(float(self.params[val]))
            if val == "pi":
                return Num(math.pi)
            raise UnknownIdentifierError(f"unknown identifier {val!r}", pos, self.text)
        if kind == "end":
            raise ExpressionSyntaxError("unexpected end of input", pos, self.text)
        raise ExpressionSyntaxError(f"unexpected token {val!r}", pos, self.text)


def parse(text, d=None, params=None):
    """Parse ``text`` into an expression tree.

    ``d`` bounds the variable indices (``q0..qd``, ``p0..pd``); ``params``
    maps parameter names to values that are substituted as constants.
    """
    return _Parser(text, d, dict(params or {})).parse()


# -- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node):
    if isinstance(node, Bin):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return 3
    return 5


def _fmt_num(v):
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"cannot print non-finite constant {v}")
    s = repr(float(v))
    if s.endswith(".0"):
        s = s[:-2]
    return s


def to_string(node):
    """Print with the minimal parentheses that re-parse to the same tree."""
    if isinstance(node, Num):
        if node.value < 0 or math.copysign(1.0, node.value) < 0:
            return "-" + _fmt_num(-node.value)
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}({to_string(node.arg)})"
    if isinstance(node, Neg):
        s = to_string(node.arg)
        return f"-({s})" if _prec(node.arg) < 3 else f"-{s}"
    p = _PREC[node.op]
    ls, rs = to_string(node.left), to_string(node.right)
    if node.op == "^":
        if _prec(node.left) <= 4:
            ls = f"({ls})"
        if _prec(node.right) < 3:
            rs = f"({rs})"
        return f"{ls}^{rs}"
    if _prec(node.left) < p:
        ls = f"({ls})"
    if _prec(node.right) <= p:
        rs = f"({rs})"
    return f"{ls}{node.op}{rs}" if p == 2 else f"{ls} {node.op} {rs}"


# -- analysis

def variables(node):
    out = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            out.add(n.name)
        elif isinstance(n, (Neg, Call)):
            stack.append(n.arg)
        elif isinstance(n, Bin):
            stack.extend((n.left, n.right))
    return out


def substitute(node, mapping):
    """Replace variables by sub-trees (``mapping``: name -> Node)."""
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return neg(substitute(node.arg, mapping))
    if isinstance(node, Call):
        return Call(node.fn, substitute(node.arg, mapping))
    left, right = substitute(node.left, mapping), substitute(node.right, mapping)
    return {"+": add, "-": sub, "*": mul, "/": div, "^": power}[node.op](left, right)


@lru_cache(maxsize=None)
def diff(node, name):
    """Symbolic derivative of ``node`` with respect to variable ``name``."""
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == name else ZERO
    if isinstance(node, Neg):
        return neg(diff(node.arg, name))
    if isinstance(node, Call):
        u = node.arg
        du = diff(u, name)
        if _is_num(du, 0.0):
            return ZERO
        if node.fn == "sqrt":
            return div(du, mul(Num(2.0), node))
        if node.fn == "sin":
            return mul(Call("cos", u), du)
        if node.fn == "cos":
            return neg(mul(Call("sin", u), du))
        if node.fn == "exp":
            return mul(node, du)
        if node.fn == "log":
            return div(du, u)
        raise ValueError(node.fn)
    a, b = node.left, node.right
    da, db = diff(a, name), diff(b, name)
    if node.op == "+":
        return add(da, db)
    if node.op == "-":
        return sub(da, db)
    if node.op == "*":
        return add(mul(da, b), mul(a, db))
    if node.op == "/":
        if _is_num(db, 0.0):
            return div(da, b)
        return sub(div(da, b), div(mul(a, db), power(b, Num(2.0))))
    # power
    if _is_num(db, 0.0):
        if _is_num(da, 0.0):
            return ZERO
        if isinstance(b, Num):
            return mul(mul(b, power(a, Num(b.value - 1.0))), da)
        return mul(mul(b, power(a, sub(b, ONE))), da)
    return mul(node, add(mul(db, Call("log", a)), div(mul(b, da), a)))


def diff_multi(node, names):
    for name in names:
        node = diff(node, name)
    return node


# -- compilation to stack bytecode

@dataclass(frozen=True)
class Program:
    """Several expressions compiled to one postfix instruction stream.

    ``code`` has rows (opcode, argument); program ``k`` occupies rows
    ``starts[k]:starts[k+1]`` and leaves one value on the stack.
    """

    code: np.ndarray
    starts: np.ndarray
    consts: np.ndarray
    stack_size: int
    n_vars: int

    @property
    def n_outputs(self):
        return len(self.starts) - 1


def compile_many(nodes, var_index):
    code = []
    consts = []
    const_idx = {}
    starts = [0]
    max_depth = 1

    def emit(node, depth):
        nonlocal max_depth
        max_depth = max(max_depth, depth)
        if isinstance(node, Num):
            key = float(node.value)
            key_id = (key, math.copysign(1.0, key))
            if key_id not in const_idx:
                const_idx[key_id] = len(consts)
                consts.append(key)
            code.append((OP_CONST, const_idx[key_id]))
        elif isinstance(node, Var):
            code.append((OP_VAR, var_index[node.name]))
        elif isinstance(node, Neg):
            emit(node.arg, depth)
            code.append((OP_NEG, 0))
        elif isinstance(node, Call):
            emit(node.arg, depth)
            code.append((_FUNC_OPS[node.fn], 0))
        else:
            emit(node.left, depth)
            emit(node.right, depth + 1)
            code.append((_BIN_OPS[node.op], 0))

    for node in nodes:
        emit(node, 1)
        starts.append(len(code))
    if not consts:
        consts.append(0.0)
    return Program(
        code=np.ascontiguousarray(np.array(code, dtype=np.int32).reshape(-1, 2)),
        starts=np.ascontiguousarray(np.array(starts, dtype=np.intp)),
        consts=np.ascontiguousarray(np.array(consts, dtype=float)),
        stack_size=max_depth,
        n_vars=len(var_index),
    )


def phase_var_index(d):
    m = d + 1
    index = {f"q{i}": i for i in range(m)}
    index.update({f"p{i}": m + i for i in range(m)})
    return index


def phase_var_names(d):
    m = d + 1
    return [f"q{i}" for i in range(m)] + [f"p{i}" for i in range(m)]
