"""Immutable expression trees with exact evaluation and reverse-mode differentiation.

Objectives and constraint bodies are stored as trees of the node types below.
Trees are frozen dataclasses: structural equality and hashing come for free,
and they are safe to share across threads and processes.

Supported operators: n-ary sum and product, power (integer exponents are
evaluated by repeated multiplication so negative bases stay legal; real
exponents go through exp/log and require a nonnegative base), negation,
division, exp, log, sin, cos, sqrt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np


class DomainError(ArithmeticError):
    """Evaluation left the domain of an operator (log/sqrt of a negative,
    division by zero, negative base under a real exponent)."""

    def __init__(self, message: str, subexpr: "Expr"):
        super().__init__(f"{message}: {subexpr!r}")
        self.subexpr = subexpr


class Expr:
    """Base class for expression nodes. Instances are immutable."""

    __slots__ = ()

    # Operator sugar so models and tests read naturally.
    def __add__(self, other) -> "Expr":
        return Sum((self, _wrap(other)))

    def __radd__(self, other) -> "Expr":
        return Sum((_wrap(other), self))

    def __sub__(self, other) -> "Expr":
        return Sum((self, Negate(_wrap(other))))

    def __rsub__(self, other) -> "Expr":
        return Sum((_wrap(other), Negate(self)))

    def __mul__(self, other) -> "Expr":
        return Product((self, _wrap(other)))

    def __rmul__(self, other) -> "Expr":
        return Product((_wrap(other), self))

    def __truediv__(self, other) -> "Expr":
        return Div(self, _wrap(other))

    def __rtruediv__(self, other) -> "Expr":
        return Div(_wrap(other), self)

    def __pow__(self, exponent) -> "Expr":
        if isinstance(exponent, Expr):
            raise TypeError("exponent must be a number, not an expression")
        return Power(self, float(exponent))

    def __neg__(self) -> "Expr":
        return Negate(self)


def _wrap(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Constant(float(value))


@dataclass(frozen=True, repr=False)
class Constant(Expr):
    value: float

    def __repr__(self):
        return f"Constant({self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"variable index must be nonnegative, got {self.index}")

    def __repr__(self):
        return f"Var({self.index})"


@dataclass(frozen=True)
class Sum(Expr):
    children: tuple[Expr, ...]


@dataclass(frozen=True)
class Product(Expr):
    children: tuple[Expr, ...]


@dataclass(frozen=True)
class Power(Expr):
    base: Expr
    exponent: float


@dataclass(frozen=True)
class Negate(Expr):
    child: Expr


@dataclass(frozen=True)
class Div(Expr):
    numerator: Expr
    denominator: Expr


@dataclass(frozen=True)
class Exp(Expr):
    child: Expr


@dataclass(frozen=True)
class Log(Expr):
    child: Expr


@dataclass(frozen=True)
class Sin(Expr):
    child: Expr


@dataclass(frozen=True)
class Cos(Expr):
    child: Expr


@dataclass(frozen=True)
class Sqrt(Expr):
    child: Expr


def children_of(expr: Expr) -> tuple[Expr, ...]:
    """Child nodes of *expr* in a fixed order."""
    if isinstance(expr, (Constant, Var)):
        return ()
    if isinstance(expr, (Sum, Product)):
        return expr.children
    if isinstance(expr, Power):
        return (expr.base,)
    if isinstance(expr, Negate):
        return (expr.child,)
    if isinstance(expr, Div):
        return (expr.numerator, expr.denominator)
    if isinstance(expr, (Exp, Log, Sin, Cos, Sqrt)):
        return (expr.child,)
    raise TypeError(f"unknown expression node {type(expr).__name__}")


def iter_nodes(expr: Expr) -> Iterator[Expr]:
    """Yield every node reachable from *expr* (children before parents).

    Shared subtrees are yielded once, so the result doubles as a topological
    order for forward evaluation and reverse accumulation.
    """
    seen: set[int] = set()
    order: list[Expr] = []
    stack: list[tuple[Expr, bool]] = [(expr, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in children_of(node):
            if id(child) not in seen:
                stack.append((child, False))
    return iter(order)


def max_var_index(expr: Expr) -> int:
    """Largest variable index in the tree, or -1 if there are none."""
    best = -1
    for node in iter_nodes(expr):
        if isinstance(node, Var):
            best = max(best, node.index)
    return best


def int_pow(base: float, exponent: int) -> float:
    """base**exponent for integer exponents, by repeated multiplication.

    Negative bases are legal; base 0 with a negative exponent raises
    ZeroDivisionError for the caller to translate.
    """
    if exponent < 0:
        return 1.0 / int_pow(base, -exponent)
    result = 1.0
    acc = base
    k = exponent
    while k:
        if k & 1:
            result *= acc
        k >>= 1
        if k:
            acc *= acc
    return result


def real_pow(base: float, exponent: float) -> float:
    """base**exponent for real exponents via exp/log; base must be >= 0."""
    if base < 0.0:
        raise ValueError("negative base under real exponent")
    if base == 0.0:
        if exponent > 0.0:
            return 0.0
        if exponent == 0.0:
            return 1.0
        raise ZeroDivisionError("zero base under negative exponent")
    return math.exp(exponent * math.log(base))


def _is_integral(value: float) -> bool:
    return math.isfinite(value) and value == round(value)


def _node_value(node: Expr, vals: dict[int, float], point: np.ndarray) -> float:
    """Value of a single node given its children's values in *vals*."""
    if isinstance(node, Constant):
        return float(node.value)
    if isinstance(node, Var):
        return float(point[node.index])
    if isinstance(node, Sum):
        return math.fsum(vals[id(c)] for c in node.children)
    if isinstance(node, Product):
        out = 1.0
        for c in node.children:
            out *= vals[id(c)]
        return out
    if isinstance(node, Power):
        b = vals[id(node.base)]
        e = node.exponent
        if _is_integral(e):
            try:
                return int_pow(b, int(round(e)))
            except ZeroDivisionError:
                raise DomainError("zero base under negative exponent", node) from None
        try:
            return real_pow(b, e)
        except ValueError:
            raise DomainError("negative base under real exponent", node) from None
        except ZeroDivisionError:
            raise DomainError("zero base under negative exponent", node) from None
    if isinstance(node, Negate):
        return -vals[id(node.child)]
    if isinstance(node, Div):
        den = vals[id(node.denominator)]
        if den == 0.0:
            raise DomainError("division by zero", node)
        return vals[id(node.numerator)] / den
    if isinstance(node, Exp):
        return math.exp(vals[id(node.child)])
    if isinstance(node, Log):
        v = vals[id(node.child)]
        if v <= 0.0:
            raise DomainError("log of a nonpositive value", node)
        return math.log(v)
    if isinstance(node, Sin):
        return math.sin(vals[id(node.child)])
    if isinstance(node, Cos):
        return math.cos(vals[id(node.child)])
    if isinstance(node, Sqrt):
        v = vals[id(node.child)]
        if v < 0.0:
            raise DomainError("sqrt of a negative value", node)
        return math.sqrt(v)
    raise TypeError(f"unknown expression node {type(node).__name__}")


def evaluate(expr: Expr, point: np.ndarray) -> float:
    """Exact recursive evaluation of the tree at *point*.

    Raises DomainError when the point leaves an operator's domain; the error
    carries the offending subexpression.
    """
    point = np.asarray(point, dtype=float)
    vals: dict[int, float] = {}
    for node in iter_nodes(expr):
        vals[id(node)] = _node_value(node, vals, point)
    return vals[id(expr)]


def gradient(expr: Expr, point: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    """Gradient of *expr* at *point* by reverse-mode accumulation.

    One forward sweep caches node values, one reverse sweep pushes adjoints
    down to the Var leaves. Length of the result is len(point) unless *n*
    overrides it.
    """
    point = np.asarray(point, dtype=float)
    size = len(point) if n is None else n
    order = list(iter_nodes(expr))
    vals: dict[int, float] = {}
    for node in order:
        vals[id(node)] = _node_value(node, vals, point)

    adj: dict[int, float] = {id(node): 0.0 for node in order}
    adj[id(expr)] = 1.0
    grad = np.zeros(size)
    for node in reversed(order):
        a = adj[id(node)]
        if a == 0.0:
            continue
        if isinstance(node, Constant):
            continue
        if isinstance(node, Var):
            grad[node.index] += a
            continue
        if isinstance(node, Sum):
            for c in node.children:
                adj[id(c)] += a
            continue
        if isinstance(node, Product):
            # Prefix/suffix products stay exact when some factor is zero.
            cvals = [vals[id(c)] for c in node.children]
            k = len(cvals)
            prefix = [1.0] * (k + 1)
            for i in range(k):
                prefix[i + 1] = prefix[i] * cvals[i]
            suffix = [1.0] * (k + 1)
            for i in range(k - 1, -1, -1):
                suffix[i] = suffix[i + 1] * cvals[i]
            for i, c in enumerate(node.children):
                adj[id(c)] += a * prefix[i] * suffix[i + 1]
            continue
        if isinstance(node, Power):
            b = vals[id(node.base)]
            e = node.exponent
            if _is_integral(e):
                ei = int(round(e))
                if ei == 0:
                    d = 0.0
                else:
                    try:
                        d = ei * int_pow(b, ei - 1)
                    except ZeroDivisionError:
                        raise DomainError("zero base under negative exponent", node) from None
            else:
                try:
                    d = e * real_pow(b, e - 1.0)
                except (ValueError, ZeroDivisionError):
                    raise DomainError("power gradient undefined at base 0", node) from None
            adj[id(node.base)] += a * d
            continue
        if isinstance(node, Negate):
            adj[id(node.child)] -= a
            continue
        if isinstance(node, Div):
            num = vals[id(node.numerator)]
            den = vals[id(node.denominator)]
            adj[id(node.numerator)] += a / den
            adj[id(node.denominator)] -= a * num / (den * den)
            continue
        if isinstance(node, Exp):
            adj[id(node.child)] += a * vals[id(node)]
            continue
        if isinstance(node, Log):
            adj[id(node.child)] += a / vals[id(node.child)]
            continue
        if isinstance(node, Sin):
            adj[id(node.child)] += a * math.cos(vals[id(node.child)])
            continue
        if isinstance(node, Cos):
            adj[id(node.child)] -= a * math.sin(vals[id(node.child)])
            continue
        if isinstance(node, Sqrt):
            v = vals[id(node)]
            if v == 0.0:
                raise DomainError("sqrt gradient undefined at 0", node)
            adj[id(node.child)] += a / (2.0 * v)
            continue
        raise TypeError(f"unknown expression node {type(node).__name__}")
    return grad


def fold_constants(expr: Expr) -> Expr:
    """Collapse constant subtrees and identity elements.

    Rules: constant-only nodes are evaluated (kept as-is when evaluation
    would leave the domain, so the error surfaces at runtime with context);
    zero terms vanish from sums, a zero factor annihilates a product, unit
    factors/exponents/denominators are dropped, and double negation cancels.
    The transform is deterministic and idempotent.
    """
    if isinstance(expr, (Constant, Var)):
        return expr

    if isinstance(expr, Sum):
        kids = [fold_constants(c) for c in expr.children]
        const = 0.0
        rest: list[Expr] = []
        for c in kids:
            if isinstance(c, Constant):
                const += c.value
            else:
                rest.append(c)
        if not rest:
            return Constant(const)
        if const != 0.0:
            rest.append(Constant(const))
        if len(rest) == 1:
            return rest[0]
        return Sum(tuple(rest))

    if isinstance(expr, Product):
        kids = [fold_constants(c) for c in expr.children]
        const = 1.0
        rest = []
        for c in kids:
            if isinstance(c, Constant):
                if c.value == 0.0:
                    return Constant(0.0)
                const *= c.value
            else:
                rest.append(c)
        if not rest:
            return Constant(const)
        if const != 1.0:
            rest.insert(0, Constant(const))
        if len(rest) == 1:
            return rest[0]
        return Product(tuple(rest))

    if isinstance(expr, Power):
        base = fold_constants(expr.base)
        if expr.exponent == 1.0:
            return base
        if expr.exponent == 0.0:
            return Constant(1.0)
        node = Power(base, expr.exponent)
        if isinstance(base, Constant):
            return _try_fold(node)
        return node

    if isinstance(expr, Negate):
        child = fold_constants(expr.child)
        if isinstance(child, Constant):
            return Constant(-child.value)
        if isinstance(child, Negate):
            return child.child
        return Negate(child)

    if isinstance(expr, Div):
        num = fold_constants(expr.numerator)
        den = fold_constants(expr.denominator)
        if isinstance(den, Constant) and den.value == 1.0:
            return num
        node = Div(num, den)
        if isinstance(num, Constant) and isinstance(den, Constant):
            return _try_fold(node)
        return node

    if isinstance(expr, (Exp, Log, Sin, Cos, Sqrt)):
        child = fold_constants(children_of(expr)[0])
        node = type(expr)(child)
        if isinstance(child, Constant):
            return _try_fold(node)
        return node

    raise TypeError(f"unknown expression node {type(expr).__name__}")


def _try_fold(node: Expr) -> Expr:
    try:
        value = evaluate(node, np.empty(0))
    except (DomainError, OverflowError):
        return node
    if not math.isfinite(value):
        return node
    return Constant(value)


@dataclass(frozen=True)
class LinearForm:
    """Affine view of an expression: sum(coeffs[j] * x_j) + constant."""

    coeffs: dict[int, float]
    constant: float

    def value_at(self, point: np.ndarray) -> float:
        return math.fsum(c * point[j] for j, c in self.coeffs.items()) + self.constant


def detect_linear(expr: Expr) -> Optional[LinearForm]:
    """Exact affine coefficients of *expr*, or None when it is nonlinear.

    Constant folding runs first, so e.g. a zero-scaled transcendental factor
    still counts as linear.
    """
    return _linear_of(fold_constants(expr))


def _linear_of(expr: Expr) -> Optional[LinearForm]:
    if isinstance(expr, Constant):
        return LinearForm({}, expr.value)
    if isinstance(expr, Var):
        return LinearForm({expr.index: 1.0}, 0.0)
    if isinstance(expr, Sum):
        coeffs: dict[int, float] = {}
        const = 0.0
        for c in expr.children:
            sub = _linear_of(c)
            if sub is None:
                return None
            const += sub.constant
            for j, v in sub.coeffs.items():
                coeffs[j] = coeffs.get(j, 0.0) + v
        return _trimmed(coeffs, const)
    if isinstance(expr, Negate):
        sub = _linear_of(expr.child)
        if sub is None:
            return None
        return LinearForm({j: -v for j, v in sub.coeffs.items()}, -sub.constant)
    if isinstance(expr, Product):
        # Affine only when at most one factor carries variables.
        scale = 1.0
        carrier: Optional[LinearForm] = None
        for c in expr.children:
            sub = _linear_of(c)
            if sub is None:
                return None
            if sub.coeffs:
                if carrier is not None:
                    return None
                carrier = sub
            else:
                scale *= sub.constant
        if carrier is None:
            return LinearForm({}, scale)
        coeffs = {j: scale * v for j, v in carrier.coeffs.items()}
        return _trimmed(coeffs, scale * carrier.constant)
    if isinstance(expr, Div):
        den = _linear_of(expr.denominator)
        if den is None or den.coeffs or den.constant == 0.0:
            return None
        num = _linear_of(expr.numerator)
        if num is None:
            return None
        inv = 1.0 / den.constant
        return _trimmed({j: inv * v for j, v in num.coeffs.items()}, inv * num.constant)
    if isinstance(expr, Power):
        # Nonconstant bases fold to Power only with exponent not in {0, 1}.
        return None
    return None


def _trimmed(coeffs: dict[int, float], const: float) -> LinearForm:
    return LinearForm({j: v for j, v in coeffs.items() if v != 0.0}, const)
