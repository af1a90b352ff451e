"""Sparse multivariate polynomials over a global, ordered variable set.

Monomials are tuples of ``(variable_index, exponent)`` pairs sorted by index,
with zero exponents never stored.  Coefficients are float64 and terms whose
magnitude drops below :data:`ZERO_TOL` are pruned, so two polynomials are
equal exactly when their term maps are equal.
"""
from __future__ import annotations

import math
import re
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

ZERO_TOL = 1e-14

Monomial = tuple[tuple[int, int], ...]

ONE: Monomial = ()


class VarSet:
    """Ordered set of distinct variable names."""

    __slots__ = ("names", "index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        index = {name: k for k, name in enumerate(names)}
        if len(index) != len(names):
            raise ValueError(f"duplicate variable names in {names!r}")
        for name in names:
            if not _NAME_RE.fullmatch(name):
                raise ValueError(f"invalid variable name {name!r}")
        self.names = names
        self.index = index

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.index

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        return isinstance(other, VarSet) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"VarSet({list(self.names)!r})"

    def var(self, name: str) -> "Polynomial":
        return Polynomial(self, {((self.position(name), 1),): 1.0})

    def vars(self, names: Iterable[str] | None = None) -> list["Polynomial"]:
        return [self.var(n) for n in (self.names if names is None else names)]

    def position(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None


# -- monomial helpers -------------------------------------------------------

def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    out = dict(a)
    for i, e in b:
        out[i] = out.get(i, 0) + e
    return tuple(sorted(out.items()))


def mono_key(m: Monomial) -> tuple:
    """Graded-lex sort key: lower degree first, then x0^k before x1^k."""
    return (mono_degree(m), tuple((i, -e) for i, e in m))


def mono_from_dense(exps: Sequence[int]) -> Monomial:
    return tuple((i, int(e)) for i, e in enumerate(exps) if e)


def mono_to_dense(m: Monomial, n: int) -> tuple[int, ...]:
    out = [0] * n
    for i, e in m:
        out[i] = e
    return tuple(out)


def mono_vars(m: Monomial) -> set[int]:
    return {i for i, _ in m}


def mono_render(m: Monomial, varset: VarSet) -> str:
    parts = []
    for i, e in m:
        parts.append(varset.names[i] if e == 1 else f"{varset.names[i]}^{e}")
    return "*".join(parts)


# -- polynomials ------------------------------------------------------------

class Polynomial:
    """Immutable sparse polynomial with float coefficients."""

    __slots__ = ("varset", "terms")

    def __init__(self, varset: VarSet, terms: Mapping[Monomial, float] | None = None):
        self.varset = varset
        self.terms: dict[Monomial, float] = {
            m: float(c) for m, c in (terms or {}).items() if abs(c) >= ZERO_TOL
        }

    # construction
    @classmethod
    def constant(cls, varset: VarSet, value: float) -> "Polynomial":
        return cls(varset, {ONE: value})

    @classmethod
    def zero(cls, varset: VarSet) -> "Polynomial":
        return cls(varset)

    @classmethod
    def parse(cls, text: str, varset: VarSet) -> "Polynomial":
        return _Parser(text, varset).parse()

    # inspection
    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree -1."""
        return max((mono_degree(m) for m in self.terms), default=-1)

    @property
    def min_degree(self) -> int:
        return min((mono_degree(m) for m in self.terms), default=-1)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m, 0.0)

    def constant_term(self) -> float:
        return self.terms.get(ONE, 0.0)

    def monomials(self) -> list[Monomial]:
        return sorted(self.terms, key=mono_key)

    def items(self) -> list[tuple[Monomial, float]]:
        return [(m, self.terms[m]) for m in self.monomials()]

    def variables(self) -> set[int]:
        out: set[int] = set()
        for m in self.terms:
            out.update(i for i, _ in m)
        return out

    def variable_names(self) -> list[str]:
        return [self.varset.names[i] for i in sorted(self.variables())]

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # arithmetic
    def _check(self, other: "Polynomial") -> None:
        if self.varset is not other.varset and self.varset != other.varset:
            raise ValueError("polynomials live on different variable sets")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.varset, float(other))
        return NotImplemented

    def __add__(self, other) -> "Polynomial":
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.varset, out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.varset, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return (-self) + other

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out: dict[Monomial, float] = {}
        for ma, ca in self.terms.items():
            for mb, cb in other.terms.items():
                m = mono_mul(ma, mb)
                out[m] = out.get(m, 0.0) + ca * cb
        return Polynomial(self.varset, out)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Polynomial":
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int) -> "Polynomial":
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("polynomial powers must be non-negative integers")
        result = Polynomial.constant(self.varset, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def scale(self, factor: float) -> "Polynomial":
        return Polynomial(self.varset, {m: c * factor for m, c in self.terms.items()})

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.varset, float(other))
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.varset == other.varset and self.terms == other.terms

    __hash__ = None  # mutable-looking dict payload; compare by value only

    def almost_equal(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        return (self - other).max_abs_coefficient() <= tol

    # calculus and evaluation
    def diff(self, var: str | int) -> "Polynomial":
        k = self.varset.position(var) if isinstance(var, str) else int(var)
        if not 0 <= k < len(self.varset):
            raise KeyError(f"variable index {k} out of range")
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            exps = dict(m)
            e = exps.get(k, 0)
            if e == 0:
                continue
            if e == 1:
                del exps[k]
            else:
                exps[k] = e - 1
            mm = tuple(sorted(exps.items()))
            out[mm] = out.get(mm, 0.0) + c * e
        return Polynomial(self.varset, out)

    def gradient(self) -> list["Polynomial"]:
        return [self.diff(k) for k in range(len(self.varset))]

    def evaluate(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.varset),):
            raise ValueError(
                f"point has shape {point.shape}, expected ({len(self.varset)},)"
            )
        total = 0.0
        for m, c in self.items():
            val = c
            for i, e in m:
                val *= point[i] ** e
            total += val
        return float(total)

    __call__ = evaluate

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != len(self.varset):
            raise ValueError("points have the wrong number of columns")
        out = np.zeros(points.shape[0])
        for m, c in self.items():
            val = np.full(points.shape[0], c)
            for i, e in m:
                val = val * points[:, i] ** e
            out += val
        return out

    def substitute_scale(self, factors: Mapping[int, float]) -> "Polynomial":
        """Return p(D x) for the diagonal map x_i -> factors[i] * x_i."""
        out = {}
        for m, c in self.terms.items():
            for i, e in m:
                c = c * factors.get(i, 1.0) ** e
            out[m] = c
        return Polynomial(self.varset, out)

    # text form
    def render(self) -> str:
        if not self.terms:
            return "0"
        pieces = []
        for m, c in self.items():
            mag = repr(abs(c))
            body = mag if not m else f"{mag}*{mono_render(m, self.varset)}"
            if not pieces:
                pieces.append(body if c >= 0 else f"-{body}")
            else:
                pieces.append(f"+ {body}" if c >= 0 else f"- {body}")
        return " ".join(pieces)

    __str__ = render

    def __repr__(self) -> str:
        return f"Polynomial({self.render()!r})"


def lie_derivative(V: Polynomial, field: Sequence[Polynomial]) -> Polynomial:
    """Return sum_j dV/dx_j * field_j; ``field`` must cover every variable."""
    if len(field) != len(V.varset):
        raise ValueError(
            f"vector field has {len(field)} entries, variable set has {len(V.varset)}"
        )
    out = Polynomial.zero(V.varset)
    used = V.variables()
    for j, fj in enumerate(field):
        if j in used:
            out = out + V.diff(j) * fj
    return out


class PolyVec(tuple):
    """Tuple of polynomials sharing one variable set."""

    def __new__(cls, entries: Iterable[Polynomial]):
        entries = tuple(entries)
        if entries:
            vs = entries[0].varset
            for p in entries[1:]:
                if p.varset != vs:
                    raise ValueError("PolyVec entries use different variable sets")
        return super().__new__(cls, entries)

    def __add__(self, other):
        if len(self) != len(other):
            raise ValueError("PolyVec length mismatch")
        return PolyVec(a + b for a, b in zip(self, other))

    def evaluate(self, point: Sequence[float]) -> np.ndarray:
        return np.array([p.evaluate(point) for p in self])

    def render(self) -> list[str]:
        return [p.render() for p in self]

    def variables(self) -> set[int]:
        out: set[int] = set()
        for p in self:
            out |= p.variables()
        return out

    @property
    def degree(self) -> int:
        return max((p.degree for p in self), default=-1)


class CompiledPolyVec:
    """Vectorised evaluator for a list of polynomials at many points.

    Every monomial is stored as a row of variable indices padded with a
    pointer to a constant-one column, so evaluation is a gather followed by
    a row product and a small matrix multiply.
    """

    def __init__(self, polys: Sequence[Polynomial], n_vars: int | None = None):
        if n_vars is None:
            n_vars = len(polys[0].varset) if polys else 0
        monos = sorted({m for p in polys for m in p.terms}, key=mono_key)
        self.n_vars = n_vars
        self.n_out = len(polys)
        maxdeg = max((mono_degree(m) for m in monos), default=0)
        idx = np.full((len(monos), max(maxdeg, 1)), n_vars, dtype=np.intp)
        for r, m in enumerate(monos):
            col = 0
            for i, e in m:
                idx[r, col:col + e] = i
                col += e
        self.index = idx
        coef = np.zeros((len(monos), len(polys)))
        pos = {m: r for r, m in enumerate(monos)}
        for k, p in enumerate(polys):
            for m, c in p.terms.items():
                coef[pos[m], k] = c
        self.coef = coef

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self.coef.shape[0] == 0:
            out = np.zeros((X.shape[0], self.n_out))
            return out[0] if single else out
        Xe = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
        mon = Xe[:, self.index[:, 0]]
        for col in range(1, self.index.shape[1]):
            mon = mon * Xe[:, self.index[:, col]]
        out = mon @ self.coef
        return out[0] if single else out


# -- parsing ----------------------------------------------------------------

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\*\*|[-+*^()/]))"
)


class _Parser:
    """Recursive-descent parser for sums of products with ^ powers."""

    def __init__(self, text: str, varset: VarSet):
        self.varset = varset
        self.tokens = self._tokenize(text)
        self.pos = 0

    @staticmethod
    def _tokenize(text: str) -> list[tuple[str, str]]:
        tokens = []
        pos = 0
        text = text.strip()
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if not m or m.end() == pos:
                raise ValueError(f"cannot parse polynomial near {text[pos:pos + 12]!r}")
            pos = m.end()
            kind = m.lastgroup
            tokens.append((kind, m.group(kind)))
            while pos < len(text) and text[pos].isspace():
                pos += 1
        return tokens

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def _take(self):
        tok = self._peek()
        self.pos += 1
        return tok

    def parse(self) -> Polynomial:
        if not self.tokens:
            raise ValueError("empty polynomial text")
        p = self._expr()
        if self.pos != len(self.tokens):
            raise ValueError(f"unexpected token {self._peek()[1]!r}")
        return p

    def _expr(self) -> Polynomial:
        kind, val = self._peek()
        sign = 1.0
        if kind == "op" and val in "+-":
            self._take()
            sign = -1.0 if val == "-" else 1.0
        total = self._term() * sign
        while True:
            kind, val = self._peek()
            if kind == "op" and val in ("+", "-"):
                self._take()
                t = self._term()
                total = total + t if val == "+" else total - t
            else:
                return total

    def _term(self) -> Polynomial:
        p = self._power()
        while True:
            kind, val = self._peek()
            if kind == "op" and val == "*":
                self._take()
                p = p * self._power()
            elif kind == "op" and val == "/":
                self._take()
                k2, v2 = self._take()
                if k2 != "num":
                    raise ValueError("only division by numeric constants is supported")
                p = p / float(v2)
            elif kind in ("num", "name") or (kind == "op" and val == "("):
                p = p * self._power()  # implicit multiplication, e.g. 2x
            else:
                return p

    def _power(self) -> Polynomial:
        base = self._atom()
        kind, val = self._peek()
        if kind == "op" and val in ("^", "**"):
            self._take()
            k2, v2 = self._take()
            if k2 != "num" or not float(v2).is_integer():
                raise ValueError("exponents must be non-negative integers")
            return base ** int(float(v2))
        return base

    def _atom(self) -> Polynomial:
        kind, val = self._take()
        if kind == "num":
            return Polynomial.constant(self.varset, float(val))
        if kind == "name":
            if val not in self.varset:
                raise ValueError(f"unknown variable {val!r}")
            return self.varset.var(val)
        if kind == "op" and val == "(":
            p = self._expr()
            k2, v2 = self._take()
            if v2 != ")":
                raise ValueError("unbalanced parentheses")
            return p
        if kind == "op" and val == "-":
            return -self._atom()
        raise ValueError(f"unexpected token {val!r}")


def is_finite(p: Polynomial) -> bool:
    return all(math.isfinite(c) for c in p.terms.values())
