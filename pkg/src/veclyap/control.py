"""Decentralized polynomial state feedback on a subsystem's level set."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .lyap import LyapunovCertificate
from .model import InterconnectedSystem
from .poly import Polynomial, PolyVec, lie_derivative
from .sdp import SdpBackend, SolverOptions
from .sos import DecisionPoly, SosProgram, lie_derivative_affine, margin_poly

logger = logging.getLogger(__name__)

MARGIN = 1e-6
SYNTH_MARGIN = 1e-3


@dataclass
class ControlLaw:
    """``F`` on a subsystem's states, nonzero only on its input channels."""

    sid: int
    round: int
    F: PolyVec
    degree: int
    multipliers: dict[str, Polynomial] = field(default_factory=dict)
    objective: float | None = None

    def field(self, sys: InterconnectedSystem) -> list[Polynomial]:
        return sys.embed(self.sid, list(self.F))

    def to_json(self) -> dict:
        return {
            "subsystem": self.sid,
            "round": self.round,
            "degree": self.degree,
            "F": self.F.render(),
            "objective": self.objective,
            "note": "minimum sum of squared coefficients among feasible controllers",
        }

    @classmethod
    def from_json(cls, d: dict, varset) -> "ControlLaw":
        F = PolyVec(Polynomial.parse(t, varset) for t in d["F"])
        return cls(int(d["subsystem"]), int(d["round"]), F, int(d["degree"]),
                   objective=d.get("objective"))


def _neighbor_terms(prog: SosProgram, sys, certs, sid, levels, nb, mdeg, include_self: bool):
    """``sum_j sigma_j (eps_j - V_j)`` over the neighbor set."""
    vs = sys.varset
    total = DecisionPoly(vs)
    sigmas = {}
    for j in sorted(sys.neighbors[sid]):
        if j == sid and not include_self:
            continue
        s = prog.sos_poly(nb, mdeg, name=f"sigma_{j}")
        sigmas[f"sigma_{j}"] = s
        total = total + s * (Polynomial.constant(vs, levels[j]) - certs[j].V)
    return total, sigmas


def _multiplier_degree(Vdot_degree: int, V_degree: int) -> int:
    d = max(Vdot_degree - V_degree, 0)
    return d + (d % 2)


def needs_control(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    sid: int,
    levels: Mapping[int, float],
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    margin: float = MARGIN,
) -> bool:
    """True unless decrease of V_i is certified on its level set.

    The level set is ``V_i = eps_i`` with neighbors ``V_j <= eps_j``; an
    infeasible or undetermined certificate search counts as "needs control".
    """
    if levels[sid] <= 0:
        raise ValueError("levels must be positive")
    vs = sys.varset
    nb = sys.neighborhood_indices(sid)
    own = sys.state_indices(sid)
    V = certs[sid].V
    Vdot = lie_derivative(V, sys.local_field(sid))
    mdeg = _multiplier_degree(max(Vdot.degree, 2), V.degree)
    prog = SosProgram(vs, name=f"needs_control{sid}")
    rho = prog.free_poly(nb, mdeg, name="rho")
    nterm, _ = _neighbor_terms(prog, sys, certs, sid, levels, nb, mdeg, include_self=False)
    expr = -Vdot - margin_poly(vs, own, margin) - rho * (Polynomial.constant(vs, levels[sid]) - V) - nterm
    prog.add_sos(expr, name="level_decrease")
    return not prog.solve(options, backend).feasible


def synthesize(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    sid: int,
    levels: Mapping[int, float],
    degree: int = 1,
    max_degree: int = 3,
    round: int = 0,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    margin: float = SYNTH_MARGIN,
    full_actuation: bool = False,
) -> ControlLaw | None:
    """Feedback F_i making V_i decrease on its level set; None if none found.

    F acts on the input channels only and is polynomial in the subsystem's
    own states with no constant term.  The degree is escalated by one up to
    ``max_degree`` on failure.  Among feasible laws the one with the
    smallest sum of squared coefficients is returned.
    """
    if degree < 1:
        raise ValueError("controller degree must be >= 1")
    sub = sys.subsystem(sid)
    channels = list(range(sub.dim)) if full_actuation else list(sub.input_channels)
    if not channels:
        logger.warning("subsystem %d has no input channels", sid)
        return None
    for deg in range(degree, max(max_degree, degree) + 1):
        law = _synthesize_at(sys, certs, sid, levels, deg, channels, round, options, backend, margin)
        if law is not None:
            return law
        logger.info("subsystem %d: no degree-%d controller", sid, deg)
    return None


def _synthesize_at(sys, certs, sid, levels, deg, channels, round, options, backend, margin):
    vs = sys.varset
    sub = sys.subsystem(sid)
    nb = sys.neighborhood_indices(sid)
    own = sys.state_indices(sid)
    V = certs[sid].V
    prog = SosProgram(vs, name=f"synth{sid}")
    F = []
    unknown = []
    for c in range(sub.dim):
        if c in channels:
            p = prog.free_poly(own, deg, name=f"F{c}", min_degree=1)
            unknown.append(p)
        else:
            p = DecisionPoly(vs)
        F.append(p)
    field_fg = sys.local_field(sid)
    Vdot = lie_derivative(V, field_fg)
    VdotF = lie_derivative_affine(V, sys.embed(sid, F))
    cl_degree = max(Vdot.degree, V.degree - 1 + deg, 2)
    mdeg = _multiplier_degree(cl_degree, V.degree)
    rho = prog.free_poly(nb, mdeg, name="rho")
    nterm, sigmas = _neighbor_terms(prog, sys, certs, sid, levels, nb, mdeg, include_self=False)
    expr = (-VdotF - Vdot - margin_poly(vs, own, margin)
            - rho * (Polynomial.constant(vs, levels[sid]) - V) - nterm)
    prog.add_sos(expr, name="controlled_decrease")
    t = prog.scalar("effort")
    prog.add_norm_bound(unknown, t)
    prog.minimize(t)
    sol = prog.solve(options, backend)
    if not sol.feasible:
        return None
    Fv = PolyVec(_drop_tiny(sol.value(p)) for p in F)
    mult = {"rho": sol.value(rho)}
    mult.update({k: sol.value(s) for k, s in sigmas.items()})
    return ControlLaw(sid, round, Fv, deg, mult, float(sol.scalar(t)))


def _drop_tiny(p: Polynomial, tol: float = 1e-9) -> Polynomial:
    return Polynomial(p.varset, {m: c for m, c in p.terms.items() if abs(c) > tol})


def sample_level_set(sys, certs, sid, levels, law: ControlLaw | None, n: int = 1000,
                     seed: int = 0, tol: float = 1e-6) -> dict:
    """Sample ``V_i = eps_i`` (within tol), ``V_j <= eps_j``; count non-decrease."""
    rng = np.random.default_rng(seed)
    field_ = sys.local_field(sid)
    if law is not None:
        field_ = [a + b for a, b in zip(field_, law.field(sys))]
    Vdot = lie_derivative(certs[sid].V, field_)
    X = sample_region(sys, certs, sid, levels, levels[sid], levels[sid], n, rng, tol)
    vals = Vdot.evaluate_many(X) if len(X) else np.zeros(0)
    return {"samples": len(X), "violations": int(np.sum(vals >= 0))}


def sample_region(sys, certs, sid, levels, lo: float, hi: float, n: int, rng, tol: float = 0.0):
    """Points with ``lo <= V_i <= hi`` and ``V_j <= eps_j`` for the other neighbors.

    Own states are drawn by radial scaling onto the requested V_i band (V_i is
    positive definite, so each ray meets the band); neighbor states are
    rejection-sampled in their sublevel sets.
    """
    dim = len(sys.varset)
    own = sys.state_indices(sid)
    X = np.zeros((n, dim))
    for j in sorted(sys.neighbors[sid]):
        if j == sid:
            continue
        X[:, sys.state_indices(j)] = _sublevel_points(sys, certs[j], levels[j], n, rng)
    d = rng.normal(size=(n, len(own)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    target = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, hi)
    V = certs[sid].V
    Y = np.zeros((n, dim))
    a = np.zeros(n)
    b = np.full(n, 1.0)
    # grow b until every ray is past its target level
    for _ in range(60):
        Y[:, own] = d * b[:, None]
        low = V.evaluate_many(Y) < target
        if not low.any():
            break
        b[low] *= 2.0
    for _ in range(60):
        m = 0.5 * (a + b)
        Y[:, own] = d * m[:, None]
        above = V.evaluate_many(Y) >= target
        b = np.where(above, m, b)
        a = np.where(above, a, m)
    r = 0.5 * (a + b)
    X[:, own] = d * r[:, None]
    return X


def _sublevel_points(sys, cert, level, n, rng):
    """Uniform-in-radius-fraction points of ``{V_j <= level}`` along random rays."""
    own = sys.state_indices(cert.sid)
    dim = len(sys.varset)
    d = rng.normal(size=(n, len(own)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    target = rng.uniform(0.0, level, size=n)
    Y = np.zeros((n, dim))
    a = np.zeros(n)
    b = np.ones(n)
    for _ in range(60):
        Y[:, own] = d * b[:, None]
        low = cert.V.evaluate_many(Y) < target
        if not low.any():
            break
        b[low] *= 2.0
    for _ in range(60):
        m = 0.5 * (a + b)
        Y[:, own] = d * m[:, None]
        above = cert.V.evaluate_many(Y) >= target
        b = np.where(above, m, b)
        a = np.where(above, a, m)
    return d * a[:, None]
