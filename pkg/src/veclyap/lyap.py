"""Per-subsystem Lyapunov functions, unit-level scaling and ROA enlargement."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import InterconnectedSystem, ModelError
from .poly import Polynomial, lie_derivative
from .sdp import SdpBackend, SolverOptions
from .sos import (
    DecisionPoly,
    GramCertificate,
    SosProgram,
    check_sos,
    lie_derivative_affine,
    margin_poly,
)

logger = logging.getLogger(__name__)

MARGIN = 1e-6
DEFAULT_BETAS = (4.0, 1.0, 0.25)


class LyapunovInfeasible(RuntimeError):
    """No Lyapunov function found for the requested degree and domains."""


@dataclass
class LyapunovCertificate:
    """``V`` scaled so that the ROA estimate is ``{V <= 1}``."""

    sid: int
    V: Polynomial
    degree: int
    beta: float
    gamma_max: float = 1.0
    grams: dict[str, GramCertificate] = field(default_factory=dict)
    ball_radius: float | None = None
    radius_history: list[float] = field(default_factory=list)

    def level(self, x: np.ndarray) -> float:
        return self.V.evaluate(x)

    def to_json(self) -> dict:
        return {
            "subsystem": self.sid,
            "V": self.V.render(),
            "degree": self.degree,
            "beta": self.beta,
            "gamma_max": self.gamma_max,
            "ball_radius": self.ball_radius,
            "radius_history": list(self.radius_history),
            "grams": {k: g.to_json() for k, g in self.grams.items()},
        }

    @classmethod
    def from_json(cls, d: dict, varset) -> "LyapunovCertificate":
        try:
            return cls(
                sid=int(d["subsystem"]),
                V=Polynomial.parse(d["V"], varset),
                degree=int(d["degree"]),
                beta=float(d["beta"]),
                gamma_max=float(d.get("gamma_max", 1.0)),
                ball_radius=d.get("ball_radius"),
                radius_history=list(d.get("radius_history", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed Lyapunov certificate: {exc}") from None


def _search(options: SolverOptions | None) -> SolverOptions:
    return (options or SolverOptions.from_env()).for_search()


def _even_up(d: int) -> int:
    return max(0, d + (d % 2))


def _own(sys: InterconnectedSystem, sid: int) -> list[int]:
    return sys.state_indices(sid)


def find_initial_lyapunov(
    sys: InterconnectedSystem,
    sid: int,
    degree: int = 2,
    beta: float = 1.0,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    margin: float = MARGIN,
) -> LyapunovCertificate:
    """Solve for V of the given degree on the domain ``{|x_i|^2 <= beta}``.

    V is decreasing along the isolated dynamics ``f_i``.  The quadratic part
    is normalized to unit trace; the result is not yet scaled (see
    :func:`scale_to_unit_roa`).
    """
    if degree < 2 or degree % 2:
        raise ValueError("Lyapunov degree must be an even integer >= 2")
    if beta <= 0:
        raise ValueError("domain radius beta must be positive")
    vs = sys.varset
    own = _own(sys, sid)
    field_f = sys.embed(sid, list(sys.subsystem(sid).f))
    prog = SosProgram(vs, name=f"lyap{sid}")
    V = prog.free_poly(own, degree, name="V", min_degree=2)
    norm = margin_poly(vs, own, 1.0)
    prog.add_sos(V - norm * margin, name="positivity")
    Vdot = lie_derivative_affine(V, field_f)
    fdeg = max((p.degree for p in sys.subsystem(sid).f), default=1)
    sdeg = _even_up(degree + fdeg - 1 - 2)
    s = prog.sos_poly(own, sdeg, name="s_domain")
    prog.add_sos(-Vdot - norm * margin - s * (Polynomial.constant(vs, beta) - norm), name="decrease")
    # unit trace of the quadratic diagonal removes the scaling freedom of V
    trace = DecisionPoly(vs)
    for i in own:
        m = ((i, 2),)
        trace = trace + DecisionPoly(vs, None, {k: Polynomial.constant(vs, p.coefficient(m))
                                                 for k, p in V.parts.items() if p.coefficient(m)})
    prog.add_zero(trace - 1.0)
    sol = prog.solve(options, backend)
    if not sol.feasible:
        raise LyapunovInfeasible(f"subsystem {sid}: no degree-{degree} Lyapunov function on |x|^2 <= {beta}"
                                 f" ({sol.status.value})")
    Vp = _clean(sol.value(V), own)
    return LyapunovCertificate(sid, Vp, degree, beta, 1.0, dict(sol.grams))


def _clean(V: Polynomial, own: Sequence[int]) -> Polynomial:
    """Drop terms the SOS structure cannot produce (constant and linear)."""
    return Polynomial(V.varset, {m: c for m, c in V.terms.items() if sum(e for _, e in m) >= 2})


def _level_feasible(sys, sid, V: Polynomial, gamma: float, beta: float | None,
                    options, backend, margin=MARGIN) -> bool:
    """Decrease of V on ``{V <= gamma}`` and (optionally) inclusion in the domain."""
    vs = sys.varset
    own = _own(sys, sid)
    norm = margin_poly(vs, own, 1.0)
    prog = SosProgram(vs, name=f"level{sid}")
    gap = Polynomial.constant(vs, gamma) - V
    Vdot = lie_derivative(V, sys.embed(sid, list(sys.subsystem(sid).f)))
    s2 = prog.sos_poly(own, _even_up(Vdot.degree - V.degree), name="s_decrease")
    prog.add_sos(-Vdot - norm * margin - s2 * gap, name="decrease")
    if beta is not None:
        s1 = prog.sos_poly(own, _even_up(2 - V.degree), name="s_domain")
        prog.add_sos(Polynomial.constant(vs, beta) - norm - s1 * gap, name="inclusion")
    return prog.solve(_search(options), backend).feasible


def _sphere_min(V: Polynomial, own: Sequence[int], radius2: float, n: int, samples: int = 4000,
                seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(samples, len(own)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    X = np.zeros((samples, n))
    X[:, own] = d * math.sqrt(radius2)
    return float(np.min(V.evaluate_many(X)))


def scale_to_unit_roa(
    sys: InterconnectedSystem,
    cert: LyapunovCertificate,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    rel_tol: float = 1e-3,
) -> LyapunovCertificate:
    """Largest certified level gamma_max inside the domain; returns V / gamma_max."""
    own = _own(sys, cert.sid)
    hi = _sphere_min(cert.V, own, cert.beta, len(sys.varset))
    lo = 0.0
    if _level_feasible(sys, cert.sid, cert.V, hi * (1 - rel_tol / 2), cert.beta, options, backend):
        lo = hi * (1 - rel_tol / 2)
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if _level_feasible(sys, cert.sid, cert.V, mid, cert.beta, options, backend):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise LyapunovInfeasible(f"subsystem {cert.sid}: no positive certified level")
    V = cert.V * (1.0 / lo)
    return LyapunovCertificate(cert.sid, V, cert.degree, cert.beta, lo * cert.gamma_max, cert.grams)


def _ball_feasible(sys, sid, V, r2, options, backend):
    vs = sys.varset
    own = _own(sys, sid)
    norm = margin_poly(vs, own, 1.0)
    prog = SosProgram(vs, name=f"ball{sid}")
    s = prog.sos_poly(own, _even_up(V.degree - 2), name="s_ball")
    prog.add_sos(1.0 - V - s * (Polynomial.constant(vs, r2) - norm), name="ball")
    sol = prog.solve(_search(options), backend)
    return sol.value(s) if sol.feasible else None


def inscribed_ball(sys, sid, V: Polynomial, options=None, backend=None, rel_tol: float = 1e-3,
                   lower: float = 0.0) -> tuple[float, Polynomial | None]:
    """Largest certified r^2 with ``{|x_i|^2 <= r^2}`` inside ``{V <= 1}``."""
    own = _own(sys, sid)
    hi = _sphere_min_inverse(V, own, len(sys.varset))
    lo, s_lo = 0.0, None
    for guess in (hi * (1 - rel_tol / 2), lower):
        if guess <= 0:
            continue
        s = _ball_feasible(sys, sid, V, guess, options, backend)
        if s is not None:
            lo, s_lo = guess, s
            break
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        s = _ball_feasible(sys, sid, V, mid, options, backend)
        if s is not None:
            lo, s_lo = mid, s
        else:
            hi = mid
    return lo, s_lo


def _hit_radii(V: Polynomial, own, n, samples: int = 4000) -> np.ndarray:
    """Per random direction, the first radius where V reaches 1.

    A coarse ray march brackets the crossing, then bisection refines it.
    """
    rng = np.random.default_rng(1)
    d = rng.normal(size=(samples, len(own)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    X = np.zeros((samples, n))

    def at(t):
        X[:, own] = d * t[:, None]
        return V.evaluate_many(X)

    lo = np.zeros(samples)
    hi = np.full(samples, 400.0)
    done = np.zeros(samples, dtype=bool)
    prev = 0.0
    for t in np.geomspace(1e-3, 400.0, 300):
        hit = (at(np.full(samples, t)) >= 1.0) & ~done
        lo[hit], hi[hit] = prev, t
        done |= hit
        prev = t
        if done.all():
            break
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        up = at(mid) >= 1.0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    return hi


def _sphere_min_inverse(V: Polynomial, own, n) -> float:
    """Upper bound on the inscribed r^2."""
    return float(np.min(_hit_radii(V, own, n))) ** 2


def expand_roa(
    sys: InterconnectedSystem,
    cert: LyapunovCertificate,
    iterations: int = 20,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    rel_growth: float = 1e-3,
    margin: float = MARGIN,
    degree: int | None = None,
) -> LyapunovCertificate:
    """Expanding-interior style alternation (a simplified two-step variant).

    (a) with V fixed, rescale to the largest certified decrease level and
    find the largest inscribed ball; (b) with the multipliers of (a) fixed,
    re-solve for V containing the largest ball.  A new V is kept only if its
    certified ball is at least as large as the previous one.  ``degree``
    (default: the degree of ``cert``) may exceed the starting V's degree.
    """
    degree = cert.degree if degree is None else degree
    if degree < 2 or degree % 2:
        raise ValueError("Lyapunov degree must be an even integer >= 2")
    vs = sys.varset
    sid = cert.sid
    own = _own(sys, sid)
    norm = margin_poly(vs, own, 1.0)
    field_f = sys.embed(sid, list(sys.subsystem(sid).f))
    best = cert
    r2, _ = inscribed_ball(sys, sid, cert.V, options, backend)
    history = [math.sqrt(r2)]
    V, s_dec = _rescale_with_multiplier(sys, sid, cert.V, options, backend, margin)
    s_ball = None
    if s_dec is not None:
        _, s_ball = inscribed_ball(sys, sid, V, options, backend)
    for _ in range(iterations):
        if s_dec is None or s_ball is None:
            break
        W_val = None
        # feasibility at fixed ball targets converges far better than
        # maximizing the ball directly (the optimum is degenerate); climb a
        # growth ladder and keep the last feasible candidate
        for growth in (1.01, 1.03, 1.1, 1.3):
            prog = SosProgram(vs, name=f"expand{sid}")
            W = prog.free_poly(own, degree, name="V", min_degree=2)
            prog.add_sos(W - norm * margin, name="positivity")
            Wdot = lie_derivative_affine(W, field_f)
            prog.add_sos(-Wdot - norm * margin - (1.0 - W) * s_dec, name="decrease")
            prog.add_sos(1.0 - W - s_ball * (r2 * growth - norm), name="ball")
            sol = prog.solve(_search(options), backend)
            if not sol.feasible:
                break
            W_val = _clean(sol.value(W), own)
            target = r2 * growth
        if W_val is None:
            break
        if not isinstance(check_sos(W_val - norm * margin, options, backend), GramCertificate):
            break
        W_val, s_dec = _rescale_with_multiplier(sys, sid, W_val, options, backend, margin)
        if s_dec is None:
            break
        new_r2, new_s = inscribed_ball(sys, sid, W_val, options, backend, lower=target * (1 - 1e-4))
        if new_s is None or new_r2 < r2:
            break
        grew = new_r2 > r2 * (1 + rel_growth) ** 2
        V, r2, s_ball = W_val, new_r2, new_s
        best = LyapunovCertificate(sid, W_val, degree, cert.beta, cert.gamma_max, dict(sol.grams))
        history.append(math.sqrt(r2))
        if not grew:
            break
    best.ball_radius = history[-1]
    best.radius_history = history
    return best


def _rescale_with_multiplier(sys, sid, V, options, backend, margin):
    """Rescale V to a level with a comfortably feasible decrease certificate.

    Returns ``(V / g', s)`` with g' slightly below the largest level g of a
    coarse ladder on which decrease holds, and s certifying decrease of the
    rescaled V on its unit sublevel set.
    """
    ladder = [4.0, 2.0, 1.5, 1.2, 1.1, 1.05, 1.02, 1.0, 0.995, 0.98, 0.95, 0.9, 0.8, 0.5]
    for g in ladder:
        if not _level_feasible(sys, sid, V, g, None, options, backend, margin):
            continue
        W = V * (1.0 / (g * 0.995))
        s = _decrease_multiplier(sys, sid, W, options, backend, margin)
        if s is not None:
            return W, s
    return V, None


def _decrease_multiplier(sys, sid, V, options, backend, margin):
    vs = sys.varset
    own = _own(sys, sid)
    norm = margin_poly(vs, own, 1.0)
    Vdot = lie_derivative(V, sys.embed(sid, list(sys.subsystem(sid).f)))
    prog = SosProgram(vs, name=f"dec{sid}")
    s = prog.sos_poly(own, _even_up(Vdot.degree - V.degree), name="s_decrease")
    prog.add_sos(-Vdot - norm * margin - s * (1.0 - V), name="decrease")
    sol = prog.solve(_search(options), backend)
    return sol.value(s) if sol.feasible else None


def certify_subsystem(
    sys: InterconnectedSystem,
    sid: int,
    degree: int = 2,
    betas: Sequence[float] = DEFAULT_BETAS,
    expand_iterations: int = 0,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
) -> LyapunovCertificate:
    """Initial search over ``betas`` (largest first), scaling, optional expansion."""
    last: Exception | None = None
    for beta in sorted(betas, reverse=True):
        try:
            cert = find_initial_lyapunov(sys, sid, degree, beta, options, backend)
            cert = scale_to_unit_roa(sys, cert, options, backend)
        except LyapunovInfeasible as exc:
            last = exc
            logger.info("%s", exc)
            continue
        if expand_iterations > 0:
            cert = expand_roa(sys, cert, expand_iterations, options, backend)
        return cert
    raise LyapunovInfeasible(str(last) if last else f"subsystem {sid}: no domain sizes given")


def lyapunov_for_system(
    sys: InterconnectedSystem,
    degree: int = 2,
    betas: Sequence[float] = DEFAULT_BETAS,
    expand_iterations: int = 0,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    workers: int | None = None,
) -> dict[int, LyapunovCertificate]:
    """Certificates for every subsystem, computed concurrently."""
    def job(sid):
        return certify_subsystem(sys, sid, degree, betas, expand_iterations, options, backend)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(job, sys.ids))
    return dict(zip(sys.ids, results))


def sample_check(sys: InterconnectedSystem, cert: LyapunovCertificate, n: int = 1000,
                 seed: int = 0) -> dict:
    """Sample points with ``0 < V <= 1``; count V <= 0 and nonnegative decrease."""
    own = _own(sys, cert.sid)
    rng = np.random.default_rng(seed)
    dim = len(sys.varset)
    Vdot = lie_derivative(cert.V, sys.embed(cert.sid, list(sys.subsystem(cert.sid).f)))
    r = 1.05 * float(np.max(_hit_radii(cert.V, own, dim)))
    pts = []
    tries = 0
    while len(pts) < n and tries < 200:
        tries += 1
        X = np.zeros((4 * n, dim))
        X[:, own] = rng.uniform(-r, r, size=(4 * n, len(own)))
        v = cert.V.evaluate_many(X)
        keep = X[(v > 0) & (v <= 1.0)]
        pts.extend(keep[: n - len(pts)])
        if len(pts) < n:
            r *= 0.7 if keep.shape[0] == 0 else 1.0
    X = np.array(pts).reshape(-1, dim)
    v = cert.V.evaluate_many(X)
    vd = Vdot.evaluate_many(X)
    return {
        "samples": len(X),
        "nonpositive_V": int(np.sum(v <= 0)),
        "nonnegative_Vdot": int(np.sum(vd >= 0)),
    }


def bundle_to_json(sys: InterconnectedSystem, certs: dict[int, LyapunovCertificate]) -> dict:
    return {"system": sys.to_json(), "certificates": [certs[k].to_json() for k in sorted(certs)]}


def certificates_from_json(data, varset) -> dict[int, LyapunovCertificate]:
    if isinstance(data, dict):
        data = data.get("certificates", [])
    out = {}
    for d in data:
        c = LyapunovCertificate.from_json(d, varset)
        out[c.sid] = c
    return out
