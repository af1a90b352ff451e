"""Sum-of-squares programs compiled to block SDPs.

Unknowns are scalar *decisions*.  A :class:`DecisionPoly` is a polynomial
whose coefficients are affine in the decisions; SOS-kind unknown polynomials
are parameterised directly by the entries of their Gram matrix, free-kind
ones by their coefficients.  Every ``add_sos`` constraint introduces a fresh
Gram block and one linear equation per monomial (coefficient matching).
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .poly import (
    Monomial,
    Polynomial,
    VarSet,
    mono_degree,
    mono_key,
    mono_mul,
    mono_render,
)
from .sdp import SdpBackend, SdpProblem, SdpSolution, SolverOptions, Status, solve

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 1e-6


def monomial_basis(
    variables: Sequence[int | str],
    degree: int,
    varset: VarSet | None = None,
    min_degree: int = 0,
) -> list[Monomial]:
    """All monomials in ``variables`` of total degree in ``[min_degree/2, degree/2]``.

    Graded-lex ordered.  ``degree`` is the degree of the polynomial the basis
    is meant to represent, so it must be even.
    """
    if degree < 0 or degree % 2:
        raise ValueError(f"basis degree must be a non-negative even integer, got {degree}")
    idx = sorted(varset.position(v) if isinstance(v, str) else int(v) for v in variables)
    lo = (max(min_degree, 0) + 1) // 2
    out: list[Monomial] = []
    for d in range(lo, degree // 2 + 1):
        for combo in itertools.combinations_with_replacement(idx, d):
            exps: dict[int, int] = {}
            for i in combo:
                exps[i] = exps.get(i, 0) + 1
            out.append(tuple(sorted(exps.items())))
    return sorted(out, key=mono_key)


def margin_poly(varset: VarSet, variables: Iterable[int | str], weight: float) -> Polynomial:
    """``weight * sum_i x_i^2`` over the given variables."""
    out = Polynomial.zero(varset)
    for v in variables:
        x = varset.var(v) if isinstance(v, str) else Polynomial(varset, {((int(v), 1),): 1.0})
        out = out + x * x
    return out * weight


class DecisionPoly:
    """``const + sum_k d_k * parts[k]`` for scalar decisions ``d_k``."""

    __slots__ = ("varset", "const", "parts")

    def __init__(self, varset: VarSet, const: Polynomial | None = None,
                 parts: dict[int, Polynomial] | None = None):
        self.varset = varset
        self.const = const if const is not None else Polynomial.zero(varset)
        self.parts = {k: p for k, p in (parts or {}).items() if not p.is_zero()}

    @classmethod
    def lift(cls, p) -> "DecisionPoly":
        if isinstance(p, DecisionPoly):
            return p
        return cls(p.varset, p)

    def is_constant(self) -> bool:
        return not self.parts

    def _lift_other(self, other) -> "DecisionPoly":
        if isinstance(other, DecisionPoly):
            return other
        if isinstance(other, Polynomial):
            return DecisionPoly(self.varset, other)
        if isinstance(other, (int, float, np.floating)):
            return DecisionPoly(self.varset, Polynomial.constant(self.varset, float(other)))
        return NotImplemented

    def __add__(self, other) -> "DecisionPoly":
        other = self._lift_other(other)
        if other is NotImplemented:
            return NotImplemented
        parts = dict(self.parts)
        for k, p in other.parts.items():
            parts[k] = parts[k] + p if k in parts else p
        return DecisionPoly(self.varset, self.const + other.const, parts)

    __radd__ = __add__

    def __neg__(self) -> "DecisionPoly":
        return DecisionPoly(self.varset, -self.const, {k: -p for k, p in self.parts.items()})

    def __sub__(self, other) -> "DecisionPoly":
        other = self._lift_other(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other) -> "DecisionPoly":
        return (-self) + other

    def __mul__(self, other) -> "DecisionPoly":
        if isinstance(other, (int, float, np.floating)):
            f = float(other)
            return DecisionPoly(self.varset, self.const * f, {k: p * f for k, p in self.parts.items()})
        other = self._lift_other(other)
        if other is NotImplemented:
            return NotImplemented
        if self.parts and other.parts:
            raise ValueError("product of two unknown polynomials is not affine in the decisions")
        if other.parts:
            self, other = other, self
        q = other.const
        return DecisionPoly(self.varset, self.const * q, {k: p * q for k, p in self.parts.items()})

    __rmul__ = __mul__

    def diff(self, var: int | str) -> "DecisionPoly":
        return DecisionPoly(self.varset, self.const.diff(var),
                            {k: p.diff(var) for k, p in self.parts.items()})

    def support(self) -> set[Monomial]:
        out = set(self.const.terms)
        for p in self.parts.values():
            out.update(p.terms)
        return out

    def variables(self) -> set[int]:
        out = self.const.variables()
        for p in self.parts.values():
            out |= p.variables()
        return out

    def substitute(self, values: np.ndarray) -> Polynomial:
        out = dict(self.const.terms)
        for k, p in self.parts.items():
            v = values[k]
            for m, c in p.terms.items():
                out[m] = out.get(m, 0.0) + v * c
        return Polynomial(self.varset, out)


def lie_derivative_affine(V, field: Sequence) -> DecisionPoly:
    """``grad V . field`` where exactly one of V / field may hold decisions."""
    V = DecisionPoly.lift(V)
    if len(field) != len(V.varset):
        raise ValueError("vector field length does not match the variable set")
    out = DecisionPoly(V.varset)
    used = V.variables()
    for j, fj in enumerate(field):
        if j in used:
            out = out + V.diff(j) * fj
    return out


@dataclass
class GramCertificate:
    """``p = z^T Q z`` with ``Q`` PSD over the monomial basis ``z``."""

    varset: VarSet
    basis: list[Monomial]
    gram: np.ndarray
    eigen_floor: float
    residual: float = 0.0
    target: Polynomial | None = None

    def polynomial(self) -> Polynomial:
        out: dict[Monomial, float] = {}
        d = len(self.basis)
        for i in range(d):
            for j in range(i, d):
                c = self.gram[i, j] * (1.0 if i == j else 2.0)
                if c:
                    m = mono_mul(self.basis[i], self.basis[j])
                    out[m] = out.get(m, 0.0) + c
        return Polynomial(self.varset, out)

    def reconstruction_residual(self, p: Polynomial) -> float:
        return (p - self.polynomial()).max_abs_coefficient()

    def squares(self) -> list[Polynomial]:
        """Polynomials h_k with sum h_k^2 = z^T Q z (from an eigendecomposition)."""
        w, U = np.linalg.eigh(0.5 * (self.gram + self.gram.T))
        out = []
        for lam, u in zip(w, U.T):
            if lam <= 0:
                continue
            h = {m: math.sqrt(lam) * u[k] for k, m in enumerate(self.basis)}
            out.append(Polynomial(self.varset, h))
        return out

    def basis_text(self) -> list[str]:
        return [mono_render(m, self.varset) or "1" for m in self.basis]

    def to_json(self) -> dict:
        return {
            "basis": self.basis_text(),
            "gram": self.gram.tolist(),
            "eigen_floor": self.eigen_floor,
            "residual": self.residual,
        }


@dataclass
class NotSos:
    """Infeasibility witness: a functional on coefficients, negative on ``p``.

    ``functional`` acts as a moment sequence: its moment matrix over
    ``basis`` is positive semidefinite (so it is nonnegative on every SOS
    polynomial in that basis) while ``L(p) < 0``.
    """

    functional: dict[Monomial, float]
    residual: float | None
    basis: list[Monomial] = field(default_factory=list)

    def value(self, p: Polynomial) -> float:
        return float(sum(self.functional.get(m, 0.0) * c for m, c in p.terms.items()))

    def moment_matrix(self) -> np.ndarray:
        B = self.basis
        return np.array([[self.functional.get(mono_mul(a, b), 0.0) for b in B] for a in B])

    def verify(self, p: Polynomial, tol: float = 1e-6) -> bool:
        M = self.moment_matrix()
        scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
        floor = float(np.linalg.eigvalsh(M)[0]) if M.size else 0.0
        return self.value(p) < 0 and floor >= -tol * scale


@dataclass
class Undetermined:
    status: Status
    primal_residual: float


class SosStatus(str, enum.Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    UNDETERMINED = "undetermined"


@dataclass
class _Decision:
    name: str
    kind: str  # "gram" | "free"
    block: int = -1
    i: int = 0
    j: int = 0
    free: int = -1


@dataclass
class _SosBlock:
    name: str
    basis: list[Monomial]
    decisions: list[int]  # decision id per upper-triangle entry, row-major
    expr: DecisionPoly | None = None  # None for SOS-kind decision polynomials


class SosProgram:
    """Container of decisions and SOS / equality constraints over one VarSet."""

    def __init__(self, varset: VarSet, name: str = "", newton: bool = False):
        self.varset = varset
        self.name = name
        self.newton = newton
        self.decisions: list[_Decision] = []
        self.blocks: list[_SosBlock] = []
        self.equalities: list[DecisionPoly] = []
        self.norm_bounds: list[tuple[list[int], int]] = []
        self.objective: DecisionPoly | None = None
        self._n_free = 0

    # decisions ---------------------------------------------------------------
    def _new_free(self, name: str) -> int:
        self.decisions.append(_Decision(name, "free", free=self._n_free))
        self._n_free += 1
        return len(self.decisions) - 1

    def _gram_block(self, name: str, basis: list[Monomial], expr: DecisionPoly | None) -> tuple[int, DecisionPoly]:
        b = len(self.blocks)
        ids = []
        parts: dict[int, Polynomial] = {}
        d = len(basis)
        for i in range(d):
            for j in range(i, d):
                self.decisions.append(_Decision(f"{name}[{i},{j}]", "gram", block=b, i=i, j=j))
                k = len(self.decisions) - 1
                ids.append(k)
                parts[k] = Polynomial(self.varset, {mono_mul(basis[i], basis[j]): 1.0 if i == j else 2.0})
        self.blocks.append(_SosBlock(name, basis, ids, expr))
        return b, DecisionPoly(self.varset, None, parts)

    def sos_poly(self, variables: Sequence[int | str], degree: int, name: str = "sigma",
                 min_degree: int = 0) -> DecisionPoly:
        """Unknown SOS polynomial of the given (even) degree in ``variables``."""
        basis = monomial_basis(variables, degree, self.varset, min_degree)
        if not basis:
            return DecisionPoly(self.varset)
        _, poly = self._gram_block(name, basis, None)
        return poly

    def free_poly(self, variables: Sequence[int | str], degree: int, name: str = "rho",
                  min_degree: int = 0) -> DecisionPoly:
        """Unknown polynomial with free coefficients, degrees ``min_degree..degree``."""
        idx = sorted(self.varset.position(v) if isinstance(v, str) else int(v) for v in variables)
        parts = {}
        for d in range(min_degree, degree + 1):
            for combo in itertools.combinations_with_replacement(idx, d):
                exps: dict[int, int] = {}
                for i in combo:
                    exps[i] = exps.get(i, 0) + 1
                m = tuple(sorted(exps.items()))
                k = self._new_free(f"{name}[{mono_render(m, self.varset) or '1'}]")
                parts[k] = Polynomial(self.varset, {m: 1.0})
        return DecisionPoly(self.varset, None, parts)

    def scalar(self, name: str = "t") -> DecisionPoly:
        k = self._new_free(name)
        return DecisionPoly(self.varset, None, {k: Polynomial.constant(self.varset, 1.0)})

    # constraints ---------------------------------------------------------------
    def add_sos(self, expr, name: str | None = None, basis: list[Monomial] | None = None) -> int:
        """Require ``expr`` to be a sum of squares; returns the constraint's block id."""
        expr = DecisionPoly.lift(expr)
        name = name or f"c{len(self.blocks)}"
        if basis is None:
            basis = self._basis_for(expr)
        b, _ = self._gram_block(name, basis, expr) if basis else (None, None)
        if b is None:
            # nothing can be matched: every coefficient must vanish
            self.equalities.append(expr)
            self.blocks.append(_SosBlock(name, [], [], expr))
            return len(self.blocks) - 1
        return b

    def add_zero(self, expr) -> None:
        """Require every coefficient of ``expr`` to vanish."""
        self.equalities.append(DecisionPoly.lift(expr))

    def add_norm_bound(self, polys: Sequence[DecisionPoly], bound: DecisionPoly) -> None:
        """Require ``bound >= sum of squared free coefficients of polys``."""
        ids = sorted({k for p in polys for k in p.parts})
        for k in ids:
            if self.decisions[k].kind != "free":
                raise ValueError("norm bounds apply to free-coefficient polynomials only")
        (t_id,) = bound.parts
        self.norm_bounds.append((ids, t_id))

    def minimize(self, objective: DecisionPoly) -> None:
        if objective.const.degree > 0 or any(p.degree > 0 for p in objective.parts.values()):
            raise ValueError("objective must be a scalar (degree-0) expression")
        self.objective = objective

    def _basis_for(self, expr: DecisionPoly) -> list[Monomial]:
        supp = [m for m in expr.support()]
        if not supp:
            return []
        degs = [mono_degree(m) for m in supp]
        hi = max(degs) // 2
        lo = (min(degs) + 1) // 2
        maxexp: dict[int, int] = {}
        minexp: dict[int, int] = {}
        vars_ = sorted({i for m in supp for i, _ in m})
        for i in vars_:
            es = [dict(m).get(i, 0) for m in supp]
            maxexp[i] = max(es)
            minexp[i] = min(es)
        out = []
        for d in range(lo, hi + 1):
            for combo in itertools.combinations_with_replacement(vars_, d):
                exps: dict[int, int] = {}
                for i in combo:
                    exps[i] = exps.get(i, 0) + 1
                if any(2 * e > maxexp[i] for i, e in exps.items()):
                    continue
                if any(2 * exps.get(i, 0) < minexp[i] for i in vars_):
                    continue
                out.append(tuple(sorted(exps.items())))
        out.sort(key=mono_key)
        if self.newton and out:
            out = _newton_filter(out, supp, len(self.varset))
        return out

    # compilation -----------------------------------------------------------------
    def compile(self) -> SdpProblem:
        blocks = [len(b.basis) for b in self.blocks if b.basis]
        block_ids = {}
        for b, blk in enumerate(self.blocks):
            if blk.basis:
                block_ids[b] = len(block_ids)
        norm_sizes = [1 + len(ids) for ids, _ in self.norm_bounds]
        prob = SdpProblem(blocks + norm_sizes, self._n_free, self.name)

        def entry(k: int, coef: float):
            d = self.decisions[k]
            if d.kind == "free":
                return None, (d.free, coef)
            return (block_ids[d.block], d.i, d.j, coef), None

        def add_rows(expr: DecisionPoly, gram_block: _SosBlock | None):
            rows: dict[Monomial, tuple[list, list]] = {}
            for k, p in expr.parts.items():
                for m, c in p.terms.items():
                    e, f = entry(k, c)
                    r = rows.setdefault(m, ([], []))
                    (r[0].append(e) if e else r[1].append(f))
            if gram_block is not None:
                bid = gram_block_id[id(gram_block)]
                basis = gram_block.basis
                d = len(basis)
                for i in range(d):
                    for j in range(i, d):
                        m = mono_mul(basis[i], basis[j])
                        rows.setdefault(m, ([], []))[0].append((bid, i, j, -(1.0 if i == j else 2.0)))
            for m in set(expr.const.terms) - set(rows):
                rows[m] = ([], [])
            for m in sorted(rows, key=mono_key):
                ents, frees = rows[m]
                prob.add_constraint(ents, -expr.const.coefficient(m), frees)

        gram_block_id = {id(blk): block_ids[b] for b, blk in enumerate(self.blocks) if blk.basis}
        for blk in self.blocks:
            if blk.expr is not None and blk.basis:
                add_rows(blk.expr, blk)
        for eq in self.equalities:
            add_rows(eq, None)
        for nb, (ids, t_id) in enumerate(self.norm_bounds):
            b = len(blocks) + nb
            t = self.decisions[t_id].free
            prob.add_constraint([(b, 0, 0, 1.0)], 0.0, [(t, -1.0)])
            for r, k in enumerate(ids, start=1):
                prob.add_constraint([(b, 0, r, 1.0)], 0.0, [(self.decisions[k].free, -1.0)])
                prob.add_constraint([(b, r, r, 1.0)], 1.0)
                for s in range(r + 1, len(ids) + 1):
                    prob.add_constraint([(b, r, s, 1.0)], 0.0)
        if self.objective is not None:
            ents, frees = [], []
            for k, p in self.objective.parts.items():
                e, f = entry(k, p.constant_term())
                (ents.append(e) if e else frees.append(f))
            prob.set_objective(ents, frees)
        self._block_ids = block_ids
        return prob

    def solve(self, options: SolverOptions | None = None, backend: SdpBackend | None = None) -> "SosSolution":
        prob = self.compile()
        sol = solve(prob, options, backend)
        return SosSolution.from_sdp(self, prob, sol)


@dataclass
class SosSolution:
    status: SosStatus
    values: np.ndarray
    grams: dict[str, GramCertificate] = field(default_factory=dict)
    sdp: SdpSolution | None = None
    objective: float = math.nan

    @property
    def feasible(self) -> bool:
        return self.status is SosStatus.FEASIBLE

    def value(self, dp: DecisionPoly) -> Polynomial:
        return dp.substitute(self.values)

    def scalar(self, dp: DecisionPoly) -> float:
        return dp.substitute(self.values).constant_term()

    @classmethod
    def from_sdp(cls, prog: SosProgram, prob: SdpProblem, sol: SdpSolution) -> "SosSolution":
        if sol.status.ok:
            status = SosStatus.FEASIBLE
        elif sol.status is Status.INFEASIBLE:
            status = SosStatus.INFEASIBLE
        else:
            status = SosStatus.UNDETERMINED
        values = np.zeros(len(prog.decisions))
        for k, d in enumerate(prog.decisions):
            if d.kind == "free":
                values[k] = sol.free_values[d.free]
            else:
                values[k] = sol.block_values[prog._block_ids[d.block]][d.i, d.j]
        out = cls(status, values, sdp=sol, objective=sol.objective_value)
        if status is SosStatus.FEASIBLE:
            for b, blk in enumerate(prog.blocks):
                if not blk.basis:
                    continue
                Q = sol.block_values[prog._block_ids[b]]
                Q = 0.5 * (Q + Q.T)
                cert = GramCertificate(prog.varset, blk.basis, Q, float(np.linalg.eigvalsh(Q)[0]))
                if blk.expr is not None:
                    target = blk.expr.substitute(values)
                    cert.target = target
                    cert.residual = cert.reconstruction_residual(target)
                out.grams[blk.name] = cert
        return out


def _newton_filter(basis: list[Monomial], support: list[Monomial], n: int) -> list[Monomial]:
    """Keep basis monomials m with 2m in the convex hull of ``support``."""
    from scipy.optimize import linprog

    pts = np.array([[dict(m).get(i, 0) for i in range(n)] for m in support], dtype=float)
    keep = []
    for m in basis:
        target = 2.0 * np.array([dict(m).get(i, 0) for i in range(n)])
        k = len(pts)
        res = linprog(
            np.zeros(k),
            A_eq=np.vstack([pts.T, np.ones((1, k))]),
            b_eq=np.concatenate([target, [1.0]]),
            bounds=[(0, None)] * k,
            method="highs",
        )
        if res.status == 0:
            keep.append(m)
    return keep


# -- one-shot helpers -----------------------------------------------------------

def check_sos(p: Polynomial, options: SolverOptions | None = None,
              backend: SdpBackend | None = None,
              residual_tol: float | None = 1e-6) -> GramCertificate | NotSos | Undetermined:
    """Decide whether ``p`` is a sum of squares.

    The solver tolerance is relative to the size of p's coefficients.  When
    the Gram reconstruction misses ``residual_tol`` in absolute terms, the
    problem is solved once more at a proportionally tighter tolerance and
    the better certificate is kept.  A run that stops at the iteration cap
    within 10x of tolerance gets one retry with four times the budget.
    """
    if p.degree % 2 and not p.is_zero():
        raise ValueError(f"odd-degree polynomial (degree {p.degree}) cannot be SOS")
    if p.is_zero():
        return GramCertificate(p.varset, [], np.zeros((0, 0)), 0.0, 0.0, p)
    prog = SosProgram(p.varset, name="check_sos")
    prog.add_sos(DecisionPoly(p.varset, p), name="p")
    prob = prog.compile()
    opts = options or SolverOptions.from_env()
    sol = solve(prob, opts, backend)
    if (sol.status is Status.MAX_ITERATIONS
            and sol.primal_residual <= 10 * opts.feas_tol * (1 + p.max_abs_coefficient())):
        # near miss: typically a Gram face with no interior point, where
        # splitting converges slowly; one longer run usually settles it
        sol = solve(prob, dataclasses.replace(opts, max_iters=4 * opts.max_iters), backend)
    if sol.status.ok:
        cert = SosSolution.from_sdp(prog, prob, sol).grams["p"]
        res = cert.reconstruction_residual(p)
        if residual_tol is not None and res > residual_tol:
            tol = max(opts.feas_tol * 0.5 * residual_tol / res, 1e-12)
            fine = solve(prob, dataclasses.replace(opts, feas_tol=tol, gap_tol=min(opts.gap_tol, tol)), backend)
            if fine.status.ok:
                again = SosSolution.from_sdp(prog, prob, fine).grams["p"]
                if again.reconstruction_residual(p) < res:
                    cert = again
        cert.residual = cert.reconstruction_residual(p)
        return cert
    if sol.status is Status.INFEASIBLE:
        functional = {}
        if sol.dual_values is not None:
            rows = sorted(_row_monomials(prog), key=mono_key)
            functional = {m: -float(v) for m, v in zip(rows, sol.dual_values)}
        return NotSos(functional, sol.certificate_residual, list(prog.blocks[0].basis))
    return Undetermined(sol.status, sol.primal_residual)


def _row_monomials(prog: SosProgram) -> list[Monomial]:
    blk = prog.blocks[0]
    rows = set(blk.expr.support())
    for i, a in enumerate(blk.basis):
        for b in blk.basis[i:]:
            rows.add(mono_mul(a, b))
    return list(rows)


@dataclass
class PutinarCertificate:
    """``p - margin = sigma_0 + sum_j sigma_j g_j`` with every sigma SOS."""

    sigma0: GramCertificate
    multipliers: list[Polynomial]
    multiplier_grams: list[GramCertificate]
    region: list[Polynomial]

    def identity_residual(self, p: Polynomial, margin: Polynomial | None = None) -> float:
        rhs = self.sigma0.polynomial()
        for s, g in zip(self.multipliers, self.region):
            rhs = rhs + s * g
        lhs = p if margin is None else p - margin
        return (lhs - rhs).max_abs_coefficient()


def putinar_certificate(
    p: Polynomial,
    region: Sequence[Polynomial],
    multiplier_degree: int = 2,
    margin: Polynomial | None = None,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
) -> PutinarCertificate | None:
    """Search for SOS sigma_j with ``p - margin - sum sigma_j g_j`` SOS.

    Returns ``None`` when the SDP is infeasible or undetermined at this
    multiplier degree; callers may retry with a larger degree.
    """
    if not region:
        raise ValueError("region must contain at least one constraint g_j >= 0")
    vs = p.varset
    for g in region:
        if g.varset != vs:
            raise ValueError("region polynomials use a different variable set")
    vars_ = sorted(set().union(p.variables(), *(g.variables() for g in region)))
    prog = SosProgram(vs, name="putinar")
    expr = DecisionPoly(vs, p if margin is None else p - margin)
    sigmas = []
    for j, g in enumerate(region):
        s = prog.sos_poly(vars_, multiplier_degree, name=f"sigma{j + 1}")
        sigmas.append(s)
        expr = expr - s * g
    prog.add_sos(expr, name="sigma0")
    sol = prog.solve(options, backend)
    if not sol.feasible:
        return None
    grams = [sol.grams[f"sigma{j + 1}"] for j in range(len(region)) if f"sigma{j + 1}" in sol.grams]
    return PutinarCertificate(
        sigma0=sol.grams["sigma0"],
        multipliers=[sol.value(s) for s in sigmas],
        multiplier_grams=grams,
        region=list(region),
    )
