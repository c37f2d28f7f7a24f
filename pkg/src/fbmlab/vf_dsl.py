"""A small expression language for vector fields V_0..V_d on R^n.

Grammar (whitespace-insensitive)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | VAR | FUNC '(' expr ')' | 'pow' '(' expr ',' INT ')'
             | '(' expr ')'

VAR is ``x1``..``xn``; FUNC is one of sin, cos, exp, tanh. Expressions are
compiled to NumPy source for fast batched evaluation; first derivatives come
from forward-mode dual numbers.
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import optimize

from . import rng

FUNCS = ("sin", "cos", "exp", "tanh")


class ParseError(ValueError):
    """Syntax error; ``offset`` is the 1-based character position."""

    def __init__(self, message: str, offset: int, expected=()):
        self.offset = offset
        self.expected = frozenset(expected)
        exp = ", ".join(sorted(repr(e) for e in self.expected))
        super().__init__(f"{message} at offset {offset}" + (f" (expected {exp})" if exp else ""))


class EvaluationError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


Expr = Union[Num, Var, Neg, Add, Sub, Mul, Div, Call, Pow]
_BINARY = {Add: "+", Sub: "-", Mul: "*", Div: "/"}


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/(),])
""", re.VERBOSE)


def _tokenize(text: str):
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            toks.append((kind, m.group(), pos + 1))
        pos = m.end()
    toks.append(("end", "", len(text) + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value or kind == "end":
            raise ParseError(f"expected {value!r}", pos, {value})
        return self.take()

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {text!r}", pos, {"+", "-", "*", "/", "end of input"})
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            right = self.term()
            left = Add(left, right) if op == "+" else Sub(left, right)
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            right = self.unary()
            left = Mul(left, right) if op == "*" else Div(left, right)
        return left

    def unary(self) -> Expr:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            m = re.fullmatch(r"x([1-9]\d*)", text)
            if m:
                return Var(int(m.group(1)))
            if text in FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text == "pow":
                self.expect("(")
                base = self.expr()
                self.expect(",")
                sign = 1
                if self.peek()[:2] == ("op", "-"):
                    self.take()
                    sign = -1
                k, ktext, kpos = self.take()
                if k != "num" or not re.fullmatch(r"\d+", ktext):
                    raise ParseError("pow needs an integer exponent", kpos, {"integer"})
                self.expect(")")
                return Pow(base, sign * int(ktext))
            raise ParseError(f"unknown name {text!r}", pos, set(FUNCS) | {"pow", "x<i>"})
        if (kind, text) == ("op", "("):
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {text or 'end of input'!r}", pos,
                         {"number", "variable", "function", "(", "-"})


def parse_field(text: str) -> Expr:
    """Parse one scalar expression."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return _Parser(text).parse()


def to_text(e: Expr) -> str:
    """Fully parenthesised rendering; ``parse_field(to_text(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        return f"(-{to_text(e.arg)})"
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    if isinstance(e, Pow):
        return f"pow({to_text(e.base)}, {e.exponent})"
    return f"({to_text(e.left)} {_BINARY[type(e)]} {to_text(e.right)})"


def variables(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)


def is_bounded(e: Expr) -> bool:
    """Conservative test: every variable sits under sin, cos or tanh."""
    if isinstance(e, (Num,)):
        return True
    if isinstance(e, Var):
        return False
    if isinstance(e, Call):
        return e.func != "exp" and (e.func in ("sin", "cos", "tanh") or is_bounded(e.arg))
    if isinstance(e, Neg):
        return is_bounded(e.arg)
    if isinstance(e, Pow):
        return is_bounded(e.base) and (e.exponent >= 0 or not variables(e.base))
    if isinstance(e, Div):
        return is_bounded(e.left) and not variables(e.right)
    return is_bounded(e.left) and is_bounded(e.right)


# --------------------------------------------------------------------------
# evaluation


def _source(e: Expr) -> str:
    if isinstance(e, Num):
        return f"_f({e.value!r})"
    if isinstance(e, Var):
        return f"x[{e.index - 1}]"
    if isinstance(e, Neg):
        return f"(-{_source(e.arg)})"
    if isinstance(e, Call):
        return f"_np.{e.func}({_source(e.arg)})"
    if isinstance(e, Pow):
        return f"_ipow({_source(e.base)}, {e.exponent})"
    return f"({_source(e.left)} {_BINARY[type(e)]} {_source(e.right)})"


def _ipow(b, k):
    return b ** k if k >= 0 else 1.0 / b ** (-k)


def compile_expr(e: Expr):
    """Compile to a function of a sequence of arrays ``x``."""
    code = f"lambda x: {_source(e)}"
    return eval(code, {"_np": np, "_f": np.float64, "_ipow": _ipow})


def reference_eval(e: Expr, x) -> float:
    """Tree-walking scalar evaluator using the math module."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return float(x[e.index - 1])
    if isinstance(e, Neg):
        return -reference_eval(e.arg, x)
    if isinstance(e, Call):
        return getattr(math, e.func)(reference_eval(e.arg, x))
    if isinstance(e, Pow):
        b = reference_eval(e.base, x)
        return b ** e.exponent if e.exponent >= 0 else 1.0 / b ** (-e.exponent)
    a, b = reference_eval(e.left, x), reference_eval(e.right, x)
    if isinstance(e, Add):
        return a + b
    if isinstance(e, Sub):
        return a - b
    if isinstance(e, Mul):
        return a * b
    return a / b


class Dual:
    """Value with a stack of directional derivatives (leading axis)."""

    __slots__ = ("val", "der")

    def __init__(self, val, der):
        self.val = val
        self.der = der

    def __add__(self, o):
        return Dual(self.val + o.val, self.der + o.der)

    def __sub__(self, o):
        return Dual(self.val - o.val, self.der - o.der)

    def __mul__(self, o):
        return Dual(self.val * o.val, self.der * o.val + self.val * o.der)

    def __truediv__(self, o):
        q = self.val / o.val
        return Dual(q, (self.der - q * o.der) / o.val)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def apply(self, func: str) -> "Dual":
        v = self.val
        if func == "sin":
            return Dual(np.sin(v), np.cos(v) * self.der)
        if func == "cos":
            return Dual(np.cos(v), -np.sin(v) * self.der)
        if func == "exp":
            ev = np.exp(v)
            return Dual(ev, ev * self.der)
        th = np.tanh(v)
        return Dual(th, (1.0 - th * th) * self.der)

    def ipow(self, k: int) -> "Dual":
        if k == 0:
            return Dual(np.ones_like(self.val), np.zeros_like(self.der))
        return Dual(_ipow(self.val, k), k * _ipow(self.val, k - 1) * self.der)


def dual_eval(e: Expr, x: list) -> Dual:
    if isinstance(e, Num):
        v = np.full_like(x[0].val, e.value)
        return Dual(v, np.zeros_like(x[0].der))
    if isinstance(e, Var):
        return x[e.index - 1]
    if isinstance(e, Neg):
        return -dual_eval(e.arg, x)
    if isinstance(e, Call):
        return dual_eval(e.arg, x).apply(e.func)
    if isinstance(e, Pow):
        return dual_eval(e.base, x).ipow(e.exponent)
    a, b = dual_eval(e.left, x), dual_eval(e.right, x)
    if isinstance(e, Add):
        return a + b
    if isinstance(e, Sub):
        return a - b
    if isinstance(e, Mul):
        return a * b
    return a / b


# --------------------------------------------------------------------------
# vector-field systems


@dataclass(frozen=True, eq=False)
class VectorFieldSystem:
    """Fields V_0 (drift) and V_1..V_d (diffusion) on R^n."""

    n: int
    d: int
    fields: tuple
    ellipticity_lambda: float | None = None
    name: str = ""
    warnings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.fields) != self.d + 1:
            raise ValueError("need d + 1 fields")
        for j, comps in enumerate(self.fields):
            if len(comps) != self.n:
                raise ValueError(f"V{j} has {len(comps)} components, expected {self.n}")
            for e in comps:
                bad = [i for i in variables(e) if i > self.n]
                if bad:
                    raise ValueError(f"V{j} references x{bad[0]} but n = {self.n}")
        object.__setattr__(self, "_compiled",
                           tuple(tuple(compile_expr(e) for e in comps) for comps in self.fields))
        notes = list(self.warnings)
        for j, comps in enumerate(self.fields):
            if not all(is_bounded(e) for e in comps):
                notes.append(f"V{j} is not provably bounded; moment and density "
                             "bounds may not apply")
        object.__setattr__(self, "warnings", tuple(notes))

    @classmethod
    def from_strings(cls, fields: dict | list, n: int | None = None, name: str = "",
                     ellipticity_lambda: float | None = None) -> "VectorFieldSystem":
        """Build from ``{"V0": [...], "V1": [...], ...}`` or a list [V0, V1, ...]."""
        if isinstance(fields, dict):
            keys = sorted((k for k in fields if re.fullmatch(r"V\d+", k)), key=lambda k: int(k[1:]))
            idx = [int(k[1:]) for k in keys]
            if not idx or idx[-1] < 1:
                raise ValueError("need at least V1")
            if n is None:
                n = len(fields[keys[-1]])
            texts = [fields.get(f"V{j}", ["0"] * n) for j in range(idx[-1] + 1)]
        else:
            texts = list(fields)
            if n is None:
                n = len(texts[-1])
        parsed = tuple(tuple(parse_field(s) for s in comps) for comps in texts)
        return cls(n, len(parsed) - 1, parsed, ellipticity_lambda, name)

    def to_strings(self) -> dict:
        return {f"V{j}": [to_text(e) for e in comps] for j, comps in enumerate(self.fields)}

    @property
    def has_drift(self) -> bool:
        return any(not (isinstance(e, Num) and e.value == 0.0) for e in self.fields[0])

    def _args(self, x):
        x = np.asarray(x, dtype=float)
        return x, [x[..., i] for i in range(self.n)]

    def eval_field(self, j: int, x) -> np.ndarray:
        """V_j(x) for x of shape (..., n)."""
        x, cols = self._args(x)
        try:
            with np.errstate(all="raise"):
                out = [np.broadcast_to(f(cols), x.shape[:-1]) for f in self._compiled[j]]
        except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
            raise EvaluationError(f"non-finite value while evaluating V{j}: {exc}") from exc
        out = np.stack(out, axis=-1)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite value while evaluating V{j}")
        return out

    def diffusion(self, x) -> np.ndarray:
        """Matrix [V_1 .. V_d](x), shape (..., n, d)."""
        return np.stack([self.eval_field(j, x) for j in range(1, self.d + 1)], axis=-1)

    def jacobian_field(self, j: int, x) -> np.ndarray:
        """DV_j(x), shape (..., n, n) with [a, b] = dV_j^a / dx_b."""
        x = np.asarray(x, dtype=float)
        n = self.n
        eye = np.eye(n)
        duals = [Dual(x[..., i], np.broadcast_to(eye[i].reshape((n,) + (1,) * (x.ndim - 1)),
                                                 (n,) + x.shape[:-1]))
                 for i in range(n)]
        rows = []
        try:
            with np.errstate(all="raise"):
                for e in self.fields[j]:
                    r = dual_eval(e, duals)
                    rows.append(np.broadcast_to(r.der, (n,) + x.shape[:-1]))
        except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
            raise EvaluationError(f"non-finite derivative of V{j}: {exc}") from exc
        # rows[a][b] = dV^a/dx_b; move the direction axis last
        out = np.stack([np.moveaxis(r, 0, -1) for r in rows], axis=-2)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite derivative of V{j}")
        return out


def eval_field(vf: VectorFieldSystem, j: int, x) -> np.ndarray:
    return vf.eval_field(j, x)


def jacobian_field(vf: VectorFieldSystem, j: int, x) -> np.ndarray:
    return vf.jacobian_field(j, x)


def _lambda_min(vf: VectorFieldSystem, x) -> np.ndarray:
    v = vf.diffusion(x)
    return np.linalg.eigvalsh(v @ np.swapaxes(v, -1, -2))[..., 0]


def estimate_ellipticity(vf: VectorFieldSystem, box, samples: int = 2000,
                         seed: int = 0, polish: int = 5) -> float:
    """Sampled minimum of lambda_min(V(x) V(x)^*) over ``box``.

    ``box`` is a sequence of (lo, hi) pairs. Random samples are followed by a
    bounded local minimisation from the ``polish`` best ones. This is a proxy
    for the ellipticity constant, not a certificate.
    """
    if vf.d < vf.n:
        raise ValueError("ellipticity needs d >= n")
    box = np.asarray(box, dtype=float).reshape(vf.n, 2)
    u = rng.uniforms(seed, "ellipticity", 0, int(samples), (vf.n,))
    pts = box[:, 0] + u * (box[:, 1] - box[:, 0])
    lam = _lambda_min(vf, pts)
    best = float(lam.min())
    for i in np.argsort(lam)[:polish]:
        res = optimize.minimize(lambda y: float(_lambda_min(vf, y[None, :])[0]), pts[i],
                                method="L-BFGS-B", bounds=[tuple(b) for b in box])
        best = min(best, float(res.fun))
    return max(best, 0.0)


# --------------------------------------------------------------------------
# catalogue of example systems

CATALOG = {
    "constant1d": {"V1": ["1"]},
    "constant2d": {"V1": ["1", "0"], "V2": ["0", "1"]},
    "constant3d": {"V1": ["1", "0", "0"], "V2": ["0", "1", "0"], "V3": ["0", "0", "1"]},
    "sine1d": {"V1": ["1 + 0.5*sin(x1)"]},
    "drift_sine1d": {"V0": ["0.3*cos(x1)"], "V1": ["1 + 0.5*sin(x1)"]},
    "elliptic2d": {"V0": ["-0.2*sin(x1)", "0.1*cos(x2)"],
                   "V1": ["1 + 0.3*sin(x2)", "0.2*cos(x1)"],
                   "V2": ["0.2*sin(x1)", "1 + 0.3*cos(x2)"]},
    "geometric1d": {"V1": ["0.5*x1"]},
}

ELLIPTIC_CATALOG = ("sine1d", "drift_sine1d", "elliptic2d")


def catalog(name: str) -> VectorFieldSystem:
    if name not in CATALOG:
        raise KeyError(f"unknown catalogue system {name!r}; known: {sorted(CATALOG)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return VectorFieldSystem.from_strings(CATALOG[name], name=name)
