"""Sparse multivariate polynomials with float coefficients.

Monomials are tuples of nonnegative exponents, one per variable. Terms are
kept in a dict keyed by monomial with zero coefficients dropped, and every
listing (printing, iteration, bases) uses graded-lexicographic order.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

Monomial = tuple[int, ...]


class DimensionError(ValueError):
    """Raised when operands disagree on the number of variables."""


class PolynomialParseError(ValueError):
    pass


def grlex_key(mono: Monomial) -> tuple:
    # degree first, then x1 before x2 before ... (lex, higher power of x1 first)
    return (sum(mono), tuple(-e for e in mono))


def monomials_of_degree(nvars: int, degree: int) -> list[Monomial]:
    """All monomials of exact total degree ``degree`` in grlex order."""
    out = []
    for combo in combinations_with_replacement(range(nvars), degree):
        exps = [0] * nvars
        for i in combo:
            exps[i] += 1
        out.append(tuple(exps))
    out.sort(key=grlex_key)
    return out


def monomials_up_to(nvars: int, max_degree: int, min_degree: int = 0) -> list[Monomial]:
    out: list[Monomial] = []
    for deg in range(min_degree, max_degree + 1):
        out.extend(monomials_of_degree(nvars, deg))
    return out


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


class Polynomial:
    """Immutable sparse polynomial in ``nvars`` variables ``x1..xn``."""

    __slots__ = ("nvars", "_terms", "_arrays")

    def __init__(self, nvars: int, terms: Mapping[Sequence[int], float] | None = None):
        if nvars < 1:
            raise ValueError("nvars must be positive")
        self.nvars = nvars
        clean: dict[Monomial, float] = {}
        for mono, coeff in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != nvars:
                raise DimensionError(f"monomial {mono} has wrong length for {nvars} variables")
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            coeff = float(coeff)
            if coeff != 0.0:
                clean[mono] = clean.get(mono, 0.0) + coeff
                if clean[mono] == 0.0:
                    del clean[mono]
        self._terms = clean
        self._arrays = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, nvars: int) -> Polynomial:
        return cls(nvars)

    @classmethod
    def constant(cls, nvars: int, value: float) -> Polynomial:
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, index: int) -> Polynomial:
        """The coordinate polynomial x_{index+1} (0-based ``index``)."""
        if not 0 <= index < nvars:
            raise DimensionError(f"variable index {index} out of range for {nvars} variables")
        mono = [0] * nvars
        mono[index] = 1
        return cls(nvars, {tuple(mono): 1.0})

    @classmethod
    def monomial(cls, mono: Sequence[int], coeff: float = 1.0) -> Polynomial:
        return cls(len(mono), {tuple(mono): coeff})

    @classmethod
    def squared_norm(cls, nvars: int, scale: float = 1.0) -> Polynomial:
        """``scale * (x1^2 + ... + xn^2)``."""
        terms = {}
        for i in range(nvars):
            mono = [0] * nvars
            mono[i] = 2
            terms[tuple(mono)] = scale
        return cls(nvars, terms)

    @classmethod
    def ball(cls, nvars: int, radius: float) -> Polynomial:
        """``r^2 - sum x_i^2``, nonnegative exactly on the closed ball of radius ``r``."""
        return cls.constant(nvars, radius * radius) - cls.squared_norm(nvars)

    @classmethod
    def parse(cls, text: str, nvars: int | None = None) -> Polynomial:
        return _Parser(text, nvars).parse()

    # -- basic queries ------------------------------------------------------

    @property
    def terms(self) -> dict[Monomial, float]:
        return dict(self._terms)

    def items(self):
        """Terms in grlex order."""
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]))

    def coeff(self, mono: Sequence[int]) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def degree(self) -> int:
        if not self._terms:
            return 0
        return max(sum(m) for m in self._terms)

    def min_degree(self) -> int:
        if not self._terms:
            return 0
        return min(sum(m) for m in self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __eq__(self, other) -> bool:
        if isinstance(other, Polynomial):
            return self.nvars == other.nvars and self._terms == other._terms
        if isinstance(other, (int, float)):
            return self == Polynomial.constant(self.nvars, other)
        return NotImplemented

    def __hash__(self):
        return hash((self.nvars, frozenset(self._terms.items())))

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise DimensionError(f"nvars mismatch: {self.nvars} vs {other.nvars}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.nvars, float(other))
        raise TypeError(f"cannot combine Polynomial with {type(other).__name__}")

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        terms = dict(self._terms)
        for mono, c in other._terms.items():
            terms[mono] = terms.get(mono, 0.0) + c
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.nvars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other) -> Polynomial:
        other = self._coerce(other)
        terms = dict(self._terms)
        for mono, c in other._terms.items():
            terms[mono] = terms.get(mono, 0.0) - c
        return Polynomial(self.nvars, terms)

    def __rsub__(self, other) -> Polynomial:
        return self._coerce(other) - self

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial(self.nvars, {m: c * float(other) for m, c in self._terms.items()})
        other = self._coerce(other)
        terms: dict[Monomial, float] = {}
        for ma, ca in self._terms.items():
            for mb, cb in other._terms.items():
                mono = mono_mul(ma, mb)
                terms[mono] = terms.get(mono, 0.0) + ca * cb
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Polynomial:
        if not isinstance(other, (int, float, np.floating, np.integer)):
            raise TypeError("polynomials can only be divided by scalars")
        return self * (1.0 / float(other))

    def __pow__(self, k: int) -> Polynomial:
        if not isinstance(k, int) or k < 0:
            raise ValueError("exponent must be a nonnegative integer")
        out = Polynomial.constant(self.nvars, 1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    # -- calculus -----------------------------------------------------------

    def diff(self, index: int) -> Polynomial:
        """Partial derivative with respect to x_{index+1}."""
        terms = {}
        for mono, c in self._terms.items():
            e = mono[index]
            if e == 0:
                continue
            new = list(mono)
            new[index] = e - 1
            terms[tuple(new)] = c * e
        return Polynomial(self.nvars, terms)

    def gradient(self) -> list[Polynomial]:
        return [self.diff(i) for i in range(self.nvars)]

    def substitute_scaled(self, scale: float) -> Polynomial:
        """The polynomial ``x -> p(scale * x)``."""
        return Polynomial(self.nvars, {m: c * scale ** sum(m) for m, c in self._terms.items()})

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, x: Sequence[float]) -> float:
        if len(x) != self.nvars:
            raise DimensionError(f"point has {len(x)} coordinates, polynomial has {self.nvars} variables")
        total = 0.0
        for mono, c in self._terms.items():
            total += c * math.prod(xi**e for xi, e in zip(x, mono))
        return total

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.evaluate(list(x))
        return self.evaluate_many(x)

    def _compiled(self):
        if self._arrays is None:
            if self._terms:
                monos = np.array(list(self._terms.keys()), dtype=np.int64)
                coeffs = np.array(list(self._terms.values()), dtype=float)
            else:
                monos = np.zeros((0, self.nvars), dtype=np.int64)
                coeffs = np.zeros(0)
            self._arrays = (monos, coeffs)
        return self._arrays

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of an ``(N, nvars)`` array."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.nvars:
            raise DimensionError(f"expected (N, {self.nvars}) array, got shape {points.shape}")
        monos, coeffs = self._compiled()
        if len(coeffs) == 0:
            return np.zeros(points.shape[0])
        maxdeg = int(monos.max()) if monos.size else 0
        powers = np.ones((maxdeg + 1,) + points.shape)
        for k in range(1, maxdeg + 1):
            powers[k] = powers[k - 1] * points
        out = np.zeros(points.shape[0])
        cols = np.arange(self.nvars)
        for mono, c in zip(monos, coeffs):
            out += c * np.prod(powers[mono, :, cols].T, axis=1)
        return out

    # -- formatting ---------------------------------------------------------

    def __str__(self) -> str:
        return format_polynomial(self)

    def __repr__(self) -> str:
        return f"Polynomial({self.nvars}, {str(self)!r})"

    def to_json(self) -> list:
        """Grlex-ordered ``[[exponents...], coeff]`` pairs."""
        return [[list(m), c] for m, c in self.items()]

    @classmethod
    def from_json(cls, nvars: int, data: Iterable) -> Polynomial:
        return cls(nvars, {tuple(m): c for m, c in data})


def evaluate(p: Polynomial, x: Sequence[float]) -> float:
    return p.evaluate(x)


def gradient(p: Polynomial) -> list[Polynomial]:
    return p.gradient()


def poly_add(a: Polynomial, b: Polynomial) -> Polynomial:
    return a + b


def poly_sub(a: Polynomial, b: Polynomial) -> Polynomial:
    return a - b


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    return a * b


def coeff_max_abs_diff(a: Polynomial, b: Polynomial) -> float:
    """Largest coefficient gap over the union of both supports."""
    if a.nvars != b.nvars:
        raise DimensionError(f"nvars mismatch: {a.nvars} vs {b.nvars}")
    ta, tb = a._terms, b._terms
    worst = 0.0
    for mono in ta.keys() | tb.keys():
        worst = max(worst, abs(ta.get(mono, 0.0) - tb.get(mono, 0.0)))
    return worst


def lie_derivative(p: Polynomial, f: VectorField) -> Polynomial:
    """grad(p) . f, expanded."""
    if p.nvars != f.dim:
        raise DimensionError(f"polynomial has {p.nvars} variables, field has dimension {f.dim}")
    out = Polynomial.zero(p.nvars)
    for dp, fi in zip(p.gradient(), f.components):
        if not dp.is_zero():
            out = out + dp * fi
    return out


@dataclass(frozen=True)
class VectorField:
    """Polynomial right-hand side of x' = f(x)."""

    components: tuple[Polynomial, ...]
    equilibrium_at_origin: bool = True

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("vector field needs at least one component")
        n = comps[0].nvars
        if len(comps) != n or any(c.nvars != n for c in comps):
            raise DimensionError("vector field must have one component per variable")
        if self.equilibrium_at_origin:
            for i, c in enumerate(comps):
                if c.coeff((0,) * n) != 0.0:
                    raise ValueError(f"component {i + 1} does not vanish at the origin")

    @classmethod
    def parse(cls, texts: Sequence[str], nvars: int | None = None, **kwargs) -> VectorField:
        n = nvars if nvars is not None else len(texts)
        return cls(tuple(Polynomial.parse(t, n) for t in texts), **kwargs)

    @property
    def dim(self) -> int:
        return len(self.components)

    def degree(self) -> int:
        return max(c.degree() for c in self.components)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.array([c.evaluate(list(x)) for c in self.components])
        return np.stack([c.evaluate_many(x) for c in self.components], axis=1)

    def rescaled(self, factor: float) -> VectorField:
        """Field for z = factor * x, i.e. ``z' = factor * f(z / factor)``."""
        comps = tuple(c.substitute_scaled(1.0 / factor) * factor for c in self.components)
        return VectorField(comps, self.equilibrium_at_origin)

    def reversed(self) -> VectorField:
        return VectorField(tuple(-c for c in self.components), self.equilibrium_at_origin)

    def __str__(self) -> str:
        return "; ".join(str(c) for c in self.components)


def _format_coeff(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


def format_polynomial(p: Polynomial) -> str:
    """Render as e.g. ``1 - 2*x1^2*x2 + x2^3``; parses back to the same polynomial."""
    if p.is_zero():
        return "0"
    parts = []
    for mono, c in p.items():
        factors = []
        for i, e in enumerate(mono):
            if e == 1:
                factors.append(f"x{i + 1}")
            elif e > 1:
                factors.append(f"x{i + 1}^{e}")
        mag = abs(c)
        if factors:
            body = "*".join(factors) if mag == 1.0 else _format_coeff(mag) + "*" + "*".join(factors)
        else:
            body = _format_coeff(mag)
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append((" - " if c < 0 else " + ") + body)
    return "".join(parts)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<var>x(?P<idx>\d+))|(?P<op>\*\*|[-+*/^()]))"
)


class _Parser:
    """Recursive-descent parser for ``+ - * / ^ ( )`` over numbers and x1..xn."""

    def __init__(self, text: str, nvars: int | None):
        self.text = text
        self.tokens = self._tokenize(text)
        self.pos = 0
        found = [int(tok[1]) for tok in self.tokens if tok[0] == "var"]
        if any(i < 1 for i in found):
            raise PolynomialParseError("variables are numbered from x1")
        need = max(found, default=1)
        if nvars is None:
            nvars = need
        elif need > nvars:
            raise PolynomialParseError(f"x{need} used but only {nvars} variables declared")
        self.nvars = nvars

    @staticmethod
    def _tokenize(text: str):
        tokens = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise PolynomialParseError(f"unexpected character at position {pos} in {text!r}")
            if m.group("num") is not None:
                tokens.append(("num", m.group("num")))
            elif m.group("var") is not None:
                tokens.append(("var", m.group("idx")))
            else:
                op = m.group("op")
                tokens.append(("op", "^" if op == "**" else op))
            pos = m.end()
        if not tokens:
            raise PolynomialParseError("empty polynomial expression")
        return tokens

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def _take(self):
        tok = self._peek()
        self.pos += 1
        return tok

    def parse(self) -> Polynomial:
        p = self._expr()
        if self.pos != len(self.tokens):
            raise PolynomialParseError(f"trailing input after position {self.pos} in {self.text!r}")
        return p

    def _expr(self) -> Polynomial:
        p = self._term()
        while self._peek() in (("op", "+"), ("op", "-")):
            op = self._take()[1]
            rhs = self._term()
            p = p + rhs if op == "+" else p - rhs
        return p

    def _term(self) -> Polynomial:
        p = self._unary()
        while self._peek() in (("op", "*"), ("op", "/")):
            op = self._take()[1]
            rhs = self._unary()
            if op == "*":
                p = p * rhs
            else:
                if rhs.degree() != 0 or rhs.is_zero():
                    raise PolynomialParseError("division is only allowed by nonzero constants")
                p = p / rhs.coeff((0,) * self.nvars)
        return p

    def _unary(self) -> Polynomial:
        if self._peek() == ("op", "-"):
            self._take()
            return -self._unary()
        if self._peek() == ("op", "+"):
            self._take()
            return self._unary()
        return self._power()

    def _power(self) -> Polynomial:
        base = self._atom()
        if self._peek() == ("op", "^"):
            self._take()
            kind, val = self._take()
            if kind != "num" or not val.isdigit():
                raise PolynomialParseError("exponent must be a nonnegative integer literal")
            return base ** int(val)
        return base

    def _atom(self) -> Polynomial:
        kind, val = self._take()
        if kind == "num":
            return Polynomial.constant(self.nvars, float(val))
        if kind == "var":
            return Polynomial.variable(self.nvars, int(val) - 1)
        if (kind, val) == ("op", "("):
            p = self._expr()
            if self._take() != ("op", ")"):
                raise PolynomialParseError("missing closing parenthesis")
            return p
        raise PolynomialParseError(f"unexpected token {val!r} in {self.text!r}")
