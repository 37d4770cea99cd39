"""Immutable expression trees with symbolic differentiation.

Expressions are built over a fixed symbol alphabet::

    y1, y0, delta, eps, Delta0, beta[i]

and support exact differentiation, substitution, best-effort simplification,
numeric evaluation (scalars or numpy arrays), extraction of the Laurent
polynomial in ``Delta0``, and a deterministic infix text form that
:func:`parse` reads back.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction
from typing import Iterable, Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Sym",
    "Add",
    "Mul",
    "Div",
    "Pow",
    "Exp",
    "Log",
    "Neg",
    "ExprError",
    "DomainError",
    "DivisionByZeroError",
    "UnboundSymbolError",
    "NotPolynomialError",
    "ExpressionTooLargeError",
    "ParseError",
    "DEFAULT_SIZE_CAP",
    "sym",
    "beta",
    "const",
    "as_expr",
    "exp",
    "log",
    "sqrt",
    "add",
    "mul",
    "differentiate",
    "evaluate",
    "lambdify",
    "substitute",
    "substitute_many",
    "simplify",
    "expand",
    "extract_delta0_polynomial",
    "laurent_coefficients",
    "check_size",
    "render",
    "parse",
    "symbol_role",
    "Y1",
    "Y0",
    "DELTA",
    "EPS",
    "DELTA0",
    "ZERO",
    "ONE",
]

DEFAULT_SIZE_CAP = 20_000

_FIXED_ROLES = {
    "y1": "state",
    "y0": "lag-state",
    "delta": "interval",
    "eps": "expansion-scale",
    "Delta0": "interval-shape",
}
_BETA_RE = re.compile(r"beta\[(\d+)\]\Z")


class ExprError(Exception):
    """Base class for expression errors."""


class DomainError(ExprError, ArithmeticError):
    """Evaluation left the domain of a node (log of non-positive, overflow, ...)."""


class DivisionByZeroError(DomainError, ZeroDivisionError):
    pass


class UnboundSymbolError(ExprError, KeyError):
    pass


class NotPolynomialError(ExprError):
    """The expression is not a Laurent polynomial in Delta0."""


class ExpressionTooLargeError(ExprError):
    pass


class ParseError(ExprError, ValueError):
    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at column {position + 1}: {text!r}")


def symbol_role(name: str) -> str:
    """Role tag of a symbol name; raises ValueError for names outside the alphabet."""
    if name in _FIXED_ROLES:
        return _FIXED_ROLES[name]
    if _BETA_RE.match(name):
        return "parameter"
    raise ValueError(f"unknown symbol name {name!r}")


Number = Union[int, float, Fraction]


class Expr:
    """Base node. Subclasses are immutable; equality is structural."""

    __slots__ = ("_key", "_hash", "_size", "_symbols", "_simplified")

    def __init__(self) -> None:
        self._key = None
        self._hash = None
        self._size = None
        self._symbols = None
        self._simplified = False

    def __setattr__(self, name, value):
        if name in Expr.__slots__:
            object.__setattr__(self, name, value)
            return
        if getattr(self, "_frozen", False):
            raise AttributeError("Expr nodes are immutable")
        object.__setattr__(self, name, value)

    @property
    def children(self) -> tuple["Expr", ...]:
        return ()

    @property
    def key(self) -> str:
        if self._key is None:
            self._key = render(self)
        return self._key

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        return type(self) is type(other) and hash(self) == hash(other) and self.key == other.key

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((type(self).__name__, self.key))
        return self._hash

    def __repr__(self) -> str:
        return f"Expr({self.key})"

    def __str__(self) -> str:
        return self.key

    @property
    def size(self) -> int:
        if self._size is None:
            self._size = 1 + sum(c.size for c in self.children)
        return self._size

    @property
    def symbols(self) -> frozenset[str]:
        if self._symbols is None:
            out: frozenset[str] = frozenset()
            for c in self.children:
                out = out | c.symbols
            self._symbols = out
        return self._symbols

    def has(self, name: str) -> bool:
        return name in self.symbols

    # arithmetic sugar
    def __add__(self, other):
        return Add((self, as_expr(other)))

    def __radd__(self, other):
        return Add((as_expr(other), self))

    def __sub__(self, other):
        return Add((self, Neg(as_expr(other))))

    def __rsub__(self, other):
        return Add((as_expr(other), Neg(self)))

    def __mul__(self, other):
        return Mul((self, as_expr(other)))

    def __rmul__(self, other):
        return Mul((as_expr(other), self))

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, exponent):
        return Pow(self, exponent)


class Const(Expr):
    __slots__ = ("value", "_frozen")

    def __init__(self, value: Number):
        super().__init__()
        v = float(value)
        if not math.isfinite(v):
            raise DomainError(f"non-finite constant {value!r}")
        self.value = v + 0.0  # normalise -0.0
        self._symbols = frozenset()
        self._frozen = True


class Sym(Expr):
    __slots__ = ("name", "_frozen")

    def __init__(self, name: str):
        super().__init__()
        symbol_role(name)
        self.name = name
        self._symbols = frozenset((name,))
        self._frozen = True

    @property
    def role(self) -> str:
        return symbol_role(self.name)


class Add(Expr):
    __slots__ = ("terms", "_frozen")

    def __init__(self, terms: Iterable[Expr]):
        super().__init__()
        self.terms = tuple(terms)
        if len(self.terms) < 2:
            raise ValueError("Add needs at least two terms")
        self._frozen = True

    @property
    def children(self):
        return self.terms


class Mul(Expr):
    __slots__ = ("factors", "_frozen")

    def __init__(self, factors: Iterable[Expr]):
        super().__init__()
        self.factors = tuple(factors)
        if len(self.factors) < 2:
            raise ValueError("Mul needs at least two factors")
        self._frozen = True

    @property
    def children(self):
        return self.factors


class Div(Expr):
    __slots__ = ("num", "den", "_frozen")

    def __init__(self, num: Expr, den: Expr):
        super().__init__()
        self.num = num
        self.den = den
        self._frozen = True

    @property
    def children(self):
        return (self.num, self.den)


class Pow(Expr):
    """``base ** exponent`` with a rational exponent."""

    __slots__ = ("base", "exponent", "_frozen")

    def __init__(self, base: Expr, exponent: Number):
        super().__init__()
        if isinstance(exponent, float):
            exponent = Fraction(exponent).limit_denominator(10**6)
        self.base = base
        self.exponent = Fraction(exponent)
        self._frozen = True

    @property
    def children(self):
        return (self.base,)


class Exp(Expr):
    __slots__ = ("arg", "_frozen")

    def __init__(self, arg: Expr):
        super().__init__()
        self.arg = arg
        self._frozen = True

    @property
    def children(self):
        return (self.arg,)


class Log(Expr):
    __slots__ = ("arg", "_frozen")

    def __init__(self, arg: Expr):
        super().__init__()
        self.arg = arg
        self._frozen = True

    @property
    def children(self):
        return (self.arg,)


class Neg(Expr):
    __slots__ = ("arg", "_frozen")

    def __init__(self, arg: Expr):
        super().__init__()
        self.arg = arg
        self._frozen = True

    @property
    def children(self):
        return (self.arg,)


ZERO = Const(0)
ONE = Const(1)


def sym(name: str) -> Sym:
    return Sym(name)


def beta(i: int) -> Sym:
    return Sym(f"beta[{int(i)}]")


def const(value: Number) -> Const:
    return Const(value)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, Fraction, np.floating, np.integer)):
        return Const(value)
    if isinstance(value, str):
        return parse(value)
    raise TypeError(f"cannot convert {type(value).__name__} to Expr")


Y1 = Sym("y1")
Y0 = Sym("y0")
DELTA = Sym("delta")
EPS = Sym("eps")
DELTA0 = Sym("Delta0")


def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


# Light-weight smart constructors used while differentiating; they only drop
# literal zeros and ones so trees stay small before a full simplify.
def add(*terms) -> Expr:
    kept = []
    total = 0.0
    for t in terms:
        t = as_expr(t)
        if isinstance(t, Const):
            total += t.value
        else:
            kept.append(t)
    if total != 0.0 or not kept:
        kept.append(Const(total))
    return kept[0] if len(kept) == 1 else Add(kept)


def mul(*factors) -> Expr:
    kept = []
    coef = 1.0
    for f in factors:
        f = as_expr(f)
        if isinstance(f, Const):
            coef *= f.value
        else:
            kept.append(f)
    if coef == 0.0:
        return ZERO
    if coef != 1.0 or not kept:
        kept.insert(0, Const(coef))
    return kept[0] if len(kept) == 1 else Mul(kept)


def exp(e) -> Expr:
    return Exp(as_expr(e))


def log(e) -> Expr:
    return Log(as_expr(e))


def sqrt(e) -> Expr:
    return Pow(as_expr(e), Fraction(1, 2))


def _pow(base: Expr, p: Fraction) -> Expr:
    if p == 0:
        return ONE
    if p == 1:
        return base
    return Pow(base, p)


def _div(num: Expr, den: Expr) -> Expr:
    if _is_const(num, 0.0):
        return ZERO
    if _is_const(den, 1.0):
        return num
    return Div(num, den)


def _neg(e: Expr) -> Expr:
    if isinstance(e, Const):
        return Const(-e.value)
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


# ---------------------------------------------------------------- differentiate


def differentiate(e: Expr, s: Union[Sym, str]) -> Expr:
    """Exact partial derivative of ``e`` with respect to symbol ``s``."""
    name = s.name if isinstance(s, Sym) else s
    cache: dict[int, Expr] = {}

    def d(node: Expr) -> Expr:
        if name not in node.symbols:
            return ZERO
        hit = cache.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, Sym):
            out: Expr = ONE
        elif isinstance(node, Add):
            out = add(*(d(t) for t in node.terms))
        elif isinstance(node, Mul):
            parts = []
            fs = node.factors
            for i, f in enumerate(fs):
                df = d(f)
                if _is_const(df, 0.0):
                    continue
                parts.append(mul(*fs[:i], df, *fs[i + 1:]))
            out = add(*parts) if parts else ZERO
        elif isinstance(node, Div):
            da, db = d(node.num), d(node.den)
            first = _div(da, node.den)
            if _is_const(db, 0.0):
                out = first
            else:
                second = _div(mul(node.num, db), Pow(node.den, 2))
                out = add(first, _neg(second))
        elif isinstance(node, Pow):
            p = node.exponent
            out = mul(Const(float(p)), _pow(node.base, p - 1), d(node.base))
        elif isinstance(node, Exp):
            out = mul(node, d(node.arg))
        elif isinstance(node, Log):
            out = _div(d(node.arg), node.arg)
        elif isinstance(node, Neg):
            out = _neg(d(node.arg))
        else:  # pragma: no cover - Const handled by the symbol check
            out = ZERO
        cache[id(node)] = out
        return out

    return d(e)


# ---------------------------------------------------------------- evaluate


def _binding_names(bindings: Mapping) -> dict[str, object]:
    out = {}
    for k, v in bindings.items():
        out[k.name if isinstance(k, Sym) else str(k)] = v
    return out


def evaluate(e: Expr, bindings: Mapping, *, check_finite: bool = True):
    """Evaluate ``e`` numerically.

    Bound values may be floats or numpy arrays (broadcast together). Raises
    :class:`UnboundSymbolError` for a missing symbol and :class:`DomainError`
    for log of a non-positive value, division by zero, invalid fractional
    powers or overflow.
    """
    env = _binding_names(bindings)
    missing = sorted(n for n in e.symbols if n not in env)
    if missing:
        raise UnboundSymbolError(f"unbound symbol(s): {', '.join(missing)}")
    cache: dict[int, object] = {}
    scalar = all(np.ndim(env[n]) == 0 for n in e.symbols)

    def ev(node: Expr):
        hit = cache.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, Const):
            out = node.value
        elif isinstance(node, Sym):
            v = env[node.name]
            out = float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=float)
        elif isinstance(node, Add):
            out = ev(node.terms[0])
            for t in node.terms[1:]:
                out = out + ev(t)
        elif isinstance(node, Mul):
            out = ev(node.factors[0])
            for f in node.factors[1:]:
                out = out * ev(f)
        elif isinstance(node, Div):
            num, den = ev(node.num), ev(node.den)
            if np.any(np.asarray(den) == 0):
                raise DivisionByZeroError(f"division by zero in {node.key}")
            out = num / den
        elif isinstance(node, Pow):
            out = _eval_pow(ev(node.base), node.exponent, node)
        elif isinstance(node, Exp):
            with np.errstate(over="ignore"):
                out = np.exp(ev(node.arg))
        elif isinstance(node, Log):
            a = ev(node.arg)
            if np.any(np.asarray(a) <= 0):
                raise DomainError(f"log of non-positive value in {node.key}")
            out = np.log(a)
        elif isinstance(node, Neg):
            out = -ev(node.arg)
        else:  # pragma: no cover
            raise TypeError(type(node))
        cache[id(node)] = out
        return out

    with np.errstate(over="ignore", invalid="ignore"):
        result = ev(e)
    if check_finite and not np.all(np.isfinite(result)):
        raise DomainError(f"non-finite result evaluating {e.key[:200]}")
    if scalar:
        return float(result)
    return result


def _eval_pow(base, p: Fraction, node: Expr):
    b = np.asarray(base, dtype=float)
    if p.denominator == 1:
        if p < 0 and np.any(b == 0):
            raise DivisionByZeroError(f"division by zero in {node.key}")
        n = int(p)
        if np.ndim(base) == 0:
            return float(base) ** n
        return b ** n
    if np.any(b < 0):
        raise DomainError(f"fractional power of negative base in {node.key}")
    if p < 0 and np.any(b == 0):
        raise DivisionByZeroError(f"division by zero in {node.key}")
    if p == Fraction(1, 2):
        out = np.sqrt(b)
    else:
        out = b ** float(p)
    return float(out) if np.ndim(base) == 0 else out


def lambdify(e: Expr, name: str):
    """Fast callable ``f(x)`` for an expression in the single symbol ``name``.

    No domain checks are made; meant for inner loops (simulation) where
    :func:`evaluate` overhead dominates.
    """
    extra = sorted(e.symbols - {name})
    if extra:
        raise UnboundSymbolError(f"unbound symbol(s): {', '.join(extra)}")

    def build(node: Expr):
        if isinstance(node, Const):
            v = node.value
            return lambda x: v
        if isinstance(node, Sym):
            return lambda x: x
        if isinstance(node, (Add, Mul)):
            parts = [build(c) for c in node.children]
            if isinstance(node, Add):
                return lambda x: sum(f(x) for f in parts)

            def prod(x):
                out = parts[0](x)
                for f in parts[1:]:
                    out = out * f(x)
                return out
            return prod
        if isinstance(node, Div):
            a, b = build(node.num), build(node.den)
            return lambda x: a(x) / b(x)
        if isinstance(node, Pow):
            b = build(node.base)
            p = node.exponent
            if p.denominator == 1:
                n = int(p)
                if 1 <= n <= 4:
                    def small_power(x):
                        v = b(x)
                        out = v
                        for _ in range(n - 1):
                            out = out * v
                        return out
                    return small_power
                return lambda x: b(x) ** n
            fp = float(p)
            return lambda x: np.power(b(x), fp)
        if isinstance(node, Exp):
            a = build(node.arg)
            return lambda x: np.exp(a(x))
        if isinstance(node, Log):
            a = build(node.arg)
            return lambda x: np.log(a(x))
        if isinstance(node, Neg):
            a = build(node.arg)
            return lambda x: -a(x)
        raise TypeError(type(node))  # pragma: no cover

    return build(e)


# ---------------------------------------------------------------- substitute


def substitute_many(e: Expr, mapping: Mapping) -> Expr:
    """Replace several symbols at once (simultaneous substitution)."""
    repl = {(k.name if isinstance(k, Sym) else str(k)): as_expr(v) for k, v in mapping.items()}
    targets = frozenset(repl)
    cache: dict[int, Expr] = {}

    def sub(node: Expr) -> Expr:
        if not (node.symbols & targets):
            return node
        hit = cache.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, Sym):
            out = repl[node.name]
        elif isinstance(node, Add):
            out = Add(sub(t) for t in node.terms)
        elif isinstance(node, Mul):
            out = Mul(sub(f) for f in node.factors)
        elif isinstance(node, Div):
            out = Div(sub(node.num), sub(node.den))
        elif isinstance(node, Pow):
            out = Pow(sub(node.base), node.exponent)
        elif isinstance(node, (Exp, Log, Neg)):
            out = type(node)(sub(node.arg))
        else:  # pragma: no cover
            out = node
        cache[id(node)] = out
        return out

    return sub(e)


def substitute(e: Expr, s: Union[Sym, str], r) -> Expr:
    return substitute_many(e, {s: r})


# ---------------------------------------------------------------- simplify


def _split_term(e: Expr) -> tuple[float, Expr | None]:
    """Split a simplified term into (numeric coefficient, monomial)."""
    if isinstance(e, Const):
        return e.value, None
    if isinstance(e, Neg):
        c, m = _split_term(e.arg)
        return -c, m
    if isinstance(e, Mul) and isinstance(e.factors[0], Const):
        rest = e.factors[1:]
        return e.factors[0].value, rest[0] if len(rest) == 1 else Mul(rest)
    return 1.0, e


def _build_term(coef: float, mono: Expr | None) -> Expr:
    if mono is None:
        return Const(coef)
    if coef == 1.0:
        return mono
    if coef == -1.0:
        return Neg(mono)
    if isinstance(mono, Mul):
        return Mul((Const(coef),) + mono.factors)
    return Mul((Const(coef), mono))


def _fold_const_pow(v: float, p: Fraction) -> float | None:
    if p.denominator == 1:
        if v == 0 and p < 0:
            return None
        try:
            return float(v ** int(p))
        except OverflowError:
            return None
    if v < 0 or (v == 0 and p < 0):
        return None
    return float(v ** float(p))


def _simplify_add(terms: Iterable[Expr]) -> Expr:
    coefs: dict[Expr, float] = {}
    order: list[Expr] = []
    total = 0.0
    stack = list(terms)
    flat: list[Expr] = []
    while stack:
        t = stack.pop(0)
        if isinstance(t, Add):
            stack[0:0] = list(t.terms)
        else:
            flat.append(t)
    for t in flat:
        c, m = _split_term(t)
        if m is None:
            total += c
            continue
        if m in coefs:
            coefs[m] += c
        else:
            coefs[m] = c
            order.append(m)
    out = [_build_term(coefs[m], m) for m in sorted(order, key=lambda x: x.key) if coefs[m] != 0.0]
    if total != 0.0:
        out.append(Const(total))
    if not out:
        return ZERO
    return out[0] if len(out) == 1 else Add(out)


def _simplify_mul(items: Iterable[tuple[Expr, Fraction]]) -> Expr:
    coef = 1.0
    powers: dict[Expr, Fraction] = {}
    order: list[Expr] = []

    def put(base: Expr, p: Fraction) -> None:
        if base in powers:
            powers[base] += p
        else:
            powers[base] = p
            order.append(base)

    def walk(node: Expr, p: Fraction) -> None:
        nonlocal coef
        integral = p.denominator == 1
        if isinstance(node, Const):
            folded = _fold_const_pow(node.value, p)
            if folded is None:
                put(node, p)
            else:
                coef *= folded
        elif isinstance(node, Neg) and integral:
            coef *= -1.0 if int(p) % 2 else 1.0
            walk(node.arg, p)
        elif isinstance(node, Mul) and integral:
            for f in node.factors:
                walk(f, p)
        elif isinstance(node, Pow) and integral:
            walk(node.base, node.exponent * p)
        elif isinstance(node, Div) and integral:
            walk(node.num, p)
            walk(node.den, -p)
        else:
            put(node, p)

    for node, p in items:
        walk(node, p)
    if coef == 0.0:
        return ZERO
    factors = []
    for base in sorted(order, key=lambda x: x.key):
        p = powers[base]
        if p == 0:
            continue
        factors.append(base if p == 1 else Pow(base, p))
    if not factors:
        return Const(coef)
    mono = factors[0] if len(factors) == 1 else Mul(factors)
    return _build_term(coef, mono)


def simplify(e: Expr) -> Expr:
    """Value-preserving best-effort simplification.

    Folds constants, removes additive zeros and multiplicative ones, flattens
    nested sums and products, collects like terms and merges powers of equal
    bases. Quotients are rewritten as negative powers.
    """
    cache: dict[int, Expr] = {}

    def s(node: Expr) -> Expr:
        if node._simplified:
            return node
        hit = cache.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, (Const, Sym)):
            out = node
        elif isinstance(node, Add):
            out = _simplify_add(s(t) for t in node.terms)
        elif isinstance(node, Mul):
            out = _simplify_mul((s(f), Fraction(1)) for f in node.factors)
        elif isinstance(node, Div):
            out = _simplify_mul([(s(node.num), Fraction(1)), (s(node.den), Fraction(-1))])
        elif isinstance(node, Pow):
            out = _simplify_mul([(s(node.base), node.exponent)])
        elif isinstance(node, Neg):
            inner = s(node.arg)
            c, m = _split_term(inner)
            out = _build_term(-c, m)
        elif isinstance(node, Exp):
            a = s(node.arg)
            if isinstance(a, Const) and a.value < 700:
                out = Const(math.exp(a.value))
            elif isinstance(a, Log):
                out = a.arg
            else:
                out = Exp(a)
        elif isinstance(node, Log):
            a = s(node.arg)
            if isinstance(a, Const) and a.value > 0:
                out = Const(math.log(a.value))
            elif isinstance(a, Exp):
                out = a.arg
            else:
                out = Log(a)
        else:  # pragma: no cover
            raise TypeError(type(node))
        out._simplified = True
        cache[id(node)] = out
        return out

    return s(e)


def _terms_of(e: Expr) -> dict:
    """Monomial -> coefficient map of an expanded, simplified sum."""
    out: dict = {}
    for t in (e.terms if isinstance(e, Add) else (e,)):
        c, m = _split_term(t)
        if c != 0.0:
            out[m] = out.get(m, 0.0) + c
    return out


def _from_terms(terms: dict) -> Expr:
    return _simplify_add(_build_term(c, m) for m, c in terms.items() if c != 0.0)


def _times(a: dict, b: dict) -> dict:
    out: dict = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            if ma is None:
                m = mb
            elif mb is None:
                m = ma
            else:
                prod = _simplify_mul([(ma, Fraction(1)), (mb, Fraction(1))])
                cm, m = _split_term(prod)
                ca_ = ca * cm
                out[m] = out.get(m, 0.0) + ca_ * cb
                continue
            out[m] = out.get(m, 0.0) + ca * cb
    return {m: c for m, c in out.items() if c != 0.0}


def expand(e: Expr, cap: int = DEFAULT_SIZE_CAP) -> Expr:
    """Distribute products and non-negative integer powers over sums.

    The result is a simplified sum of monomials, so polynomial identities
    cancel exactly. Sums under negative or fractional powers, ``exp`` and
    ``log`` are expanded internally but kept as atoms.
    """
    cache: dict[int, tuple[Expr, dict]] = {}

    def go(node: Expr) -> dict:
        hit = cache.get(id(node))
        if hit is not None:
            return hit[1]
        if isinstance(node, Const):
            out = {None: node.value} if node.value != 0.0 else {}
        elif isinstance(node, Sym):
            out = {node: 1.0}
        elif isinstance(node, Add):
            out = {}
            for t in node.terms:
                for m, c in go(t).items():
                    out[m] = out.get(m, 0.0) + c
            out = {m: c for m, c in out.items() if c != 0.0}
        elif isinstance(node, Neg):
            out = {m: -c for m, c in go(node.arg).items()}
        elif isinstance(node, Mul):
            out = {None: 1.0}
            for f in node.factors:
                out = _times(out, go(f))
                if sum(1 for _ in out) > cap:
                    raise ExpressionTooLargeError(f"expansion exceeds {cap} terms")
        elif isinstance(node, (Div, Pow)):
            base, p = (node.num, None) if isinstance(node, Div) else (node.base, node.exponent)
            if isinstance(node, Div):
                out = _times(go(node.num), go(Pow(node.den, Fraction(-1))))
            else:
                inner = go(base)
                if p.denominator == 1 and p >= 0:
                    out = {None: 1.0}
                    for _ in range(int(p)):
                        out = _times(out, inner)
                elif len(inner) == 1:
                    ((m, c),) = inner.items()
                    folded = _fold_const_pow(c, p)
                    if m is None:
                        out = {None: folded} if folded is not None else {Pow(Const(c), p): 1.0}
                    elif folded is not None:
                        cm, mm = _split_term(_simplify_mul([(m, p)]))
                        out = {mm: folded * cm} if mm is not None else {None: folded * cm}
                    else:
                        out = {_simplify_mul([(simplify(_from_terms(inner)), p)]): 1.0}
                else:
                    atom = _simplify_mul([(_from_terms(inner), p)])
                    cm, mm = _split_term(atom)
                    out = {mm: cm}
        elif isinstance(node, Exp):
            a = _from_terms(go(node.arg))
            out = _terms_of(simplify(Exp(a)))
        elif isinstance(node, Log):
            a = _from_terms(go(node.arg))
            out = _terms_of(simplify(Log(a)))
        else:  # pragma: no cover
            raise TypeError(type(node))
        cache[id(node)] = (node, out)
        return out

    result = _from_terms(go(e))
    result._simplified = True
    return result


def check_size(e: Expr, cap: int = DEFAULT_SIZE_CAP, context: str = "") -> Expr:
    """Raise :class:`ExpressionTooLargeError` when ``e`` exceeds ``cap`` nodes."""
    if e.size > cap:
        where = f" ({context})" if context else ""
        raise ExpressionTooLargeError(f"expression has {e.size} nodes, cap is {cap}{where}")
    return e


# ---------------------------------------------------------------- Delta0 Laurent form


def _poly_add(a: dict[int, Expr], b: dict[int, Expr]) -> dict[int, Expr]:
    out = dict(a)
    for q, c in b.items():
        out[q] = add(out[q], c) if q in out else c
    return out


def _poly_mul(a: dict[int, Expr], b: dict[int, Expr]) -> dict[int, Expr]:
    out: dict[int, Expr] = {}
    for qa, ca in a.items():
        for qb, cb in b.items():
            term = mul(ca, cb)
            q = qa + qb
            out[q] = add(out[q], term) if q in out else term
    return out


def laurent_coefficients(e: Expr, name: str) -> list[tuple[int, Expr]]:
    """Decompose ``e`` as ``sum_q name**q * coeff_q`` (integer ``q``).

    Returns ``[(q, coeff), ...]`` sorted by decreasing ``q`` with zero
    coefficients dropped; coefficients are free of ``name``. Raises
    :class:`NotPolynomialError` when ``e`` depends on ``name`` other than
    through integer powers (for example ``exp(Delta0)``).
    """
    name = name.name if isinstance(name, Sym) else name
    if name not in e.symbols:
        return [(0, e)]
    cache: dict[int, dict[int, Expr]] = {}

    def monomial_inverse(poly: dict[int, Expr], node: Expr) -> dict[int, Expr]:
        if len(poly) != 1:
            raise NotPolynomialError(f"division by a non-monomial in {name}: {node.key[:200]}")
        ((q, c),) = poly.items()
        return {-q: _div(ONE, c)}

    def go(node: Expr) -> dict[int, Expr]:
        if name not in node.symbols:
            return {0: node}
        hit = cache.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, Sym):
            out = {1: ONE}
        elif isinstance(node, Add):
            out = {}
            for t in node.terms:
                out = _poly_add(out, go(t))
        elif isinstance(node, Mul):
            out = {0: ONE}
            for f in node.factors:
                out = _poly_mul(out, go(f))
        elif isinstance(node, Div):
            out = _poly_mul(go(node.num), monomial_inverse(go(node.den), node))
        elif isinstance(node, Pow):
            p = node.exponent
            if p.denominator != 1:
                raise NotPolynomialError(f"fractional power of a {name} term: {node.key[:200]}")
            base = go(node.base)
            if p < 0:
                base = monomial_inverse(base, node)
            out = {0: ONE}
            for _ in range(abs(int(p))):
                out = _poly_mul(out, base)
        elif isinstance(node, Neg):
            out = {q: _neg(c) for q, c in go(node.arg).items()}
        else:
            raise NotPolynomialError(f"{name} inside {type(node).__name__.lower()}: {node.key[:200]}")
        cache[id(node)] = out
        return out

    result = []
    for q, c in go(e).items():
        c = simplify(c)
        if not _is_const(c, 0.0):
            result.append((q, c))
    result.sort(key=lambda qc: -qc[0])
    return result or [(0, ZERO)]


def extract_delta0_polynomial(e: Expr) -> list[tuple[int, Expr]]:
    """Laurent decomposition in the formal interval-shape symbol ``Delta0``."""
    return laurent_coefficients(e, DELTA0.name)


# ---------------------------------------------------------------- rendering


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return f"{int(v)}.0" if v >= 0 else f"-{int(-v)}.0"
    return repr(v)


def _fmt_exponent(p: Fraction) -> str:
    if p.denominator == 1 and p >= 0:
        return str(p.numerator)
    if p.denominator == 1:
        return f"({p.numerator})"
    return f"({p.numerator}/{p.denominator})"


def _atomic(e: Expr) -> bool:
    return isinstance(e, (Sym, Exp, Log)) or (isinstance(e, Const) and e.value >= 0)


def render(e: Expr) -> str:
    """Deterministic infix text; :func:`parse` reconstructs the same tree."""
    if e._key is not None:
        return e._key
    if isinstance(e, Const):
        out = _fmt_number(e.value)
    elif isinstance(e, Sym):
        out = e.name
    elif isinstance(e, Add):
        parts = [f"({render(e.terms[0])})" if isinstance(e.terms[0], Add) else render(e.terms[0])]
        for t in e.terms[1:]:
            if isinstance(t, Neg):
                inner = render(t.arg)
                parts.append(f" - ({inner})" if isinstance(t.arg, Add) else f" - {inner}")
            else:
                parts.append(f" + ({render(t)})" if isinstance(t, Add) else f" + {render(t)}")
        out = "".join(parts)
    elif isinstance(e, Mul):
        out = " * ".join(
            f"({render(f)})" if isinstance(f, (Add, Mul, Div)) else render(f) for f in e.factors
        )
    elif isinstance(e, Div):
        num = f"({render(e.num)})" if isinstance(e.num, Add) else render(e.num)
        den = render(e.den)
        if isinstance(e.den, (Add, Mul, Div)):
            den = f"({den})"
        out = f"{num} / {den}"
    elif isinstance(e, Pow):
        base = render(e.base) if _atomic(e.base) else f"({render(e.base)})"
        out = f"{base}^{_fmt_exponent(e.exponent)}"
    elif isinstance(e, Exp):
        out = f"exp({render(e.arg)})"
    elif isinstance(e, Log):
        out = f"log({render(e.arg)})"
    elif isinstance(e, Neg):
        a = e.arg
        inner = render(a)
        out = f"-{inner}" if isinstance(a, (Sym, Exp, Log, Pow, Neg)) else f"-({inner})"
    else:  # pragma: no cover
        raise TypeError(type(e))
    e._key = out
    return out


# ---------------------------------------------------------------- parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\[\s*\d+\s*\])?)"
    r"|(?P<op>[-+*/^(),]))"
)


class _Parser:
    def __init__(self, text: str, symbol_map: Mapping[str, Expr] | None):
        self.text = text
        self.symbol_map = dict(symbol_map or {})
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                if text[pos:].strip() == "":
                    break
                bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ParseError(f"unexpected character {text[bad]!r}", text, bad)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("end", "", len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise ParseError(f"expected {value!r} but found {val or 'end of input'!r}", self.text, pos)

    def parse(self) -> Expr:
        if not self.tokens:
            raise ParseError("empty expression", self.text, 0)
        e = self.expression()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", self.text, pos)
        return e

    def expression(self) -> Expr:
        terms = [self.term()]
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            t = self.term()
            terms.append(t if op == "+" else Neg(t))
        return terms[0] if len(terms) == 1 else Add(terms)

    def term(self) -> Expr:
        factors = [self.unary()]
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            if op == "*":
                factors.append(rhs)
            else:
                left = factors[0] if len(factors) == 1 else Mul(factors)
                factors = [Div(left, rhs)]
        return factors[0] if len(factors) == 1 else Mul(factors)

    def unary(self) -> Expr:
        kind, val, pos = self.peek()
        if val == "-":
            self.take()
            nxt = self.peek()
            if nxt[0] == "num":
                # a literal directly after unary minus is a negative constant,
                # unless it is raised to a power
                save = self.i
                self.take()
                if self.peek()[1] != "^":
                    return Const(-float(nxt[1]))
                self.i = save
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.peek()[1] == "^":
            _, _, pos = self.take()
            exponent = self.unary()
            return Pow(base, self.as_fraction(exponent, pos))
        return base

    def as_fraction(self, e: Expr, pos: int) -> Fraction:
        if isinstance(e, Const):
            return Fraction(repr(e.value)) if e.value != int(e.value) else Fraction(int(e.value))
        if isinstance(e, Neg):
            return -self.as_fraction(e.arg, pos)
        if isinstance(e, Div):
            return self.as_fraction(e.num, pos) / self.as_fraction(e.den, pos)
        raise ParseError("exponent must be a rational constant", self.text, pos)

    def primary(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            name = re.sub(r"\s+", "", val)
            if name in ("exp", "log", "sqrt"):
                self.expect("(")
                arg = self.expression()
                self.expect(")")
                return {"exp": Exp, "log": Log, "sqrt": sqrt}[name](arg)
            if name in self.symbol_map:
                return self.symbol_map[name]
            try:
                return Sym(name)
            except ValueError:
                raise ParseError(f"unknown symbol {name!r}", self.text, pos) from None
        if val == "(":
            e = self.expression()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {'end of input' if kind == 'end' else repr(val)}", self.text, pos)


def parse(text: str, symbol_map: Mapping[str, Expr] | None = None) -> Expr:
    """Parse infix text produced by :func:`render` (or written by hand).

    ``symbol_map`` adds extra identifiers, e.g. ``{"theta": beta(0)}``.
    Errors raise :class:`ParseError` carrying the offending column.
    """
    return _Parser(text, symbol_map).parse()
