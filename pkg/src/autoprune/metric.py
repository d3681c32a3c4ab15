"""A tiny expression language for per-weight importance scores.

Grammar::

    expr     := term (('+'|'-') term)*
    term     := factor (('*'|'/') factor)*
    factor   := func '(' expr ')' | terminal | number | '(' expr ')'
    func     := 'abs' | 'sqrt' | 'sq' | 'log1p'
    terminal := 'W' | 'rowl1(W)' | 'rowl2(W)' | 'coll1(X)' | 'coll2(X)'
              | 'coll2sq(X)' | 'hessdiag(X)'

Values broadcast like numpy arrays shaped ``()`` for constants, ``(d_out, 1)``
for row statistics of ``W``, ``(1, d_in)`` for column statistics of the
calibration activations ``X`` and ``(d_out, d_in)`` for ``W`` itself.

Division replaces a denominator ``d`` with ``sign(d) * max(|d|, 1e-12)``
(``sign(0) = +1``). ``sqrt`` and ``log1p`` clamp negative arguments to zero.
"""

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MetricShapeError, MetricSyntaxError, MissingCalibration
from .validation import check_matrix

DIV_EPS = 1e-12

# terminal key -> (source text, argument symbol, shape)
TERMINALS = {
    "W": ("W", None, "matrix"),
    "rowl1": ("rowl1(W)", "W", "col"),
    "rowl2": ("rowl2(W)", "W", "col"),
    "coll1": ("coll1(X)", "X", "row"),
    "coll2": ("coll2(X)", "X", "row"),
    "coll2sq": ("coll2sq(X)", "X", "row"),
    "hessdiag": ("hessdiag(X)", "X", "row"),
}
UNARY = ("abs", "sqrt", "sq", "log1p")
BINARY = {"+": 1, "-": 1, "*": 2, "/": 2}
ACTIVATION_TERMINALS = frozenset({"coll1", "coll2", "coll2sq", "hessdiag"})


@dataclass(frozen=True)
class Terminal:
    name: str


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError("constants must be finite and non-negative")


@dataclass(frozen=True)
class Unary:
    op: str
    arg: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


def _join(a, b):
    if a == b or b == "scalar":
        return a
    if a == "scalar":
        return b
    return "matrix"


def shape_of(expr):
    if isinstance(expr, Terminal):
        return TERMINALS[expr.name][2]
    if isinstance(expr, Const):
        return "scalar"
    if isinstance(expr, Unary):
        return shape_of(expr.arg)
    return _join(shape_of(expr.left), shape_of(expr.right))


def terminals(expr):
    if isinstance(expr, Terminal):
        return {expr.name}
    if isinstance(expr, Const):
        return set()
    if isinstance(expr, Unary):
        return terminals(expr.arg)
    return terminals(expr.left) | terminals(expr.right)


def uses_activations(expr):
    return bool(terminals(expr) & ACTIVATION_TERMINALS)


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/()]))"
)


def _tokenize(text):
    tokens, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise MetricSyntaxError(f"unexpected character {text[start]!r}", start + 1)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    tokens.append(("eof", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, text):
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
        if val != value or kind == "eof":
            found = "end of input" if kind == "eof" else repr(val)
            raise MetricSyntaxError(f"expected {value!r}, found {found}", pos)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.factor())
        return node

    def factor(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            if val == "W":
                return Terminal("W")
            if val in UNARY:
                self.expect("(")
                node = self.expr()
                self.expect(")")
                return Unary(val, node)
            if val in TERMINALS:
                arg = TERMINALS[val][1]
                self.expect("(")
                self.expect(arg)
                self.expect(")")
                return Terminal(val)
            raise MetricSyntaxError(f"unknown name {val!r}", pos)
        found = "end of input" if kind == "eof" else repr(val)
        raise MetricSyntaxError(f"unexpected {found}", pos)


def parse_metric(text):
    """Parse and shape-check a metric expression."""
    if not text or not text.strip():
        raise MetricSyntaxError("empty expression", 1)
    p = _Parser(text)
    node = p.expr()
    kind, val, pos = p.peek()
    if kind != "eof":
        raise MetricSyntaxError(f"unexpected {val!r}", pos)
    if shape_of(node) == "scalar":
        raise MetricShapeError("expression is constant and cannot rank weights", pretty_print(node))
    return node


# -- printing --------------------------------------------------------------

def _prec(expr):
    return BINARY[expr.op] if isinstance(expr, Binary) else 3


def _fmt_const(v):
    return repr(float(v))


def pretty_print(expr):
    if isinstance(expr, Terminal):
        return TERMINALS[expr.name][0]
    if isinstance(expr, Const):
        return _fmt_const(expr.value)
    if isinstance(expr, Unary):
        return f"{expr.op}({pretty_print(expr.arg)})"
    p = BINARY[expr.op]
    left = pretty_print(expr.left)
    right = pretty_print(expr.right)
    if _prec(expr.left) < p:
        left = f"({left})"
    if _prec(expr.right) <= p:
        right = f"({right})"
    return f"{left} {expr.op} {right}"


# -- builtins --------------------------------------------------------------

BUILTIN_TEXT = {
    "magnitude": "abs(W)",
    "wanda": "abs(W) * coll2(X)",
    "autoprune": "abs(W) / rowl1(W) * sqrt(coll1(X) + coll2sq(X))",
    "sparsegpt_score": "abs(W) / hessdiag(X)",
}


def builtin(name):
    try:
        return parse_metric(BUILTIN_TEXT[name])
    except KeyError:
        raise ValueError(f"unknown builtin metric {name!r}; choose from {sorted(BUILTIN_TEXT)}") from None


def resolve_metric(metric):
    """Accept an AST, a builtin name or expression text."""
    if isinstance(metric, (Terminal, Const, Unary, Binary)):
        return metric
    if metric in BUILTIN_TEXT:
        return builtin(metric)
    return parse_metric(metric)


def metric_label(metric):
    for name, text in BUILTIN_TEXT.items():
        if resolve_metric(metric) == builtin(name):
            return name
    return pretty_print(resolve_metric(metric))


# -- evaluation ------------------------------------------------------------

def _terminal_value(name, W, stats):
    if name == "W":
        return W
    if name == "rowl1":
        return np.sum(np.abs(W), axis=1, keepdims=True)
    if name == "rowl2":
        return np.sqrt(np.sum(W * W, axis=1, keepdims=True))
    if stats is None:
        raise MissingCalibration(f"terminal {TERMINALS[name][0]} needs calibration statistics")
    vec = {
        "coll1": stats.col_l1,
        "coll2": stats.col_l2,
        "coll2sq": stats.col_l2sq,
        "hessdiag": stats.hess_diag,
    }[name]
    if vec is None:
        raise MissingCalibration("hessdiag(X) needs statistics captured with the Hessian diagonal")
    return np.asarray(vec, dtype=np.float64).reshape(1, -1)


def _guard(d):
    d = np.asarray(d, dtype=np.float64)
    sign = np.where(d < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(d), DIV_EPS)


def _eval(expr, W, stats):
    if isinstance(expr, Terminal):
        return _terminal_value(expr.name, W, stats)
    if isinstance(expr, Const):
        return np.float64(expr.value)
    if isinstance(expr, Unary):
        x = _eval(expr.arg, W, stats)
        if expr.op == "abs":
            return np.abs(x)
        if expr.op == "sqrt":
            return np.sqrt(np.maximum(x, 0.0))
        if expr.op == "sq":
            return x * x
        return np.log1p(np.maximum(x, 0.0))
    a = _eval(expr.left, W, stats)
    b = _eval(expr.right, W, stats)
    if expr.op == "+":
        return a + b
    if expr.op == "-":
        return a - b
    if expr.op == "*":
        return a * b
    return a / _guard(b)


def eval_metric(expr, W, stats=None):
    """Score matrix of ``expr`` for weight ``W`` (``d_out x d_in``).

    ``stats`` is one layer's :class:`~autoprune.stats.LayerActivationStats`.
    """
    expr = resolve_metric(expr)
    W = check_matrix(W, "W")
    if stats is not None and stats.d_in != W.shape[1]:
        raise DimensionMismatch(f"statistics cover {stats.d_in} input columns, W has {W.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.broadcast_to(_eval(expr, W, stats), W.shape).astype(np.float64)
    big = np.finfo(np.float64).max
    return np.nan_to_num(out, nan=0.0, posinf=big, neginf=-big)
