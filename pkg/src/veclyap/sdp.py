"""Standard-form semidefinite programs and a first-order splitting solver.

A problem has one or more symmetric PSD blocks ``X_b``, optional free scalar
variables ``f``, linear equality constraints and a linear objective::

    minimize    sum_b <C_b, X_b> + c_f . f
    subject to  sum_b <A_ib, X_b> + a_if . f = rhs_i
                X_b >= 0

Linear functionals are given as triplets ``(block, i, j, value)`` with
``i <= j``; ``value`` is the coefficient of the entry ``X_b[i, j]`` itself
(so an off-diagonal triplet does not get doubled).

The default backend is a homogeneous self-dual embedding solved by ADMM
(alternating a cached linear solve with projection onto the PSD cone), with
Ruiz-style equilibration and optional Anderson acceleration.
"""
from __future__ import annotations

import dataclasses
import enum
import functools
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

MAX_ITERS_ENV = "VECLYAP_MAX_ITERS"


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"

    @property
    def ok(self) -> bool:
        return self in (Status.OPTIMAL, Status.FEASIBLE)


@dataclass
class SolverOptions:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    max_iters: int = 100_000
    alpha: float = 1.5
    check_every: int = 20
    anderson_memory: int = 8
    equilibrate: bool = True
    time_limit: float | None = None
    verbose: bool = False
    # iteration cap for probes inside bisection searches, where an
    # undetermined outcome is already treated as a failed step
    search_iters: int = 5000

    def __post_init__(self):
        if self.feas_tol <= 0 or self.gap_tol <= 0 or self.max_iters <= 0:
            raise ValueError("solver tolerances and iteration cap must be positive")

    @classmethod
    def from_env(cls, **kwargs) -> "SolverOptions":
        cap = os.environ.get(MAX_ITERS_ENV)
        if cap and "max_iters" not in kwargs:
            kwargs["max_iters"] = int(cap)
        return cls(**kwargs)

    def for_search(self) -> "SolverOptions":
        return dataclasses.replace(self, max_iters=min(self.max_iters, self.search_iters))


class SdpProblem:
    """Builder and container for a block SDP in standard form."""

    def __init__(self, blocks: Sequence[int], n_free: int = 0, name: str = ""):
        self.blocks = [int(d) for d in blocks]
        if any(d <= 0 for d in self.blocks) or n_free < 0:
            raise ValueError("block sizes must be positive")
        self.n_free = int(n_free)
        self.name = name
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self.rhs: list[float] = []
        self._obj: dict[int, float] = {}
        self.offsets = np.concatenate([[0], np.cumsum([d * (d + 1) // 2 for d in self.blocks])])
        self.n_psd = int(self.offsets[-1])

    # layout ----------------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return self.n_psd + self.n_free

    @property
    def n_constraints(self) -> int:
        return len(self.rhs)

    def entry_index(self, block: int, i: int, j: int) -> int:
        d = self.blocks[block]
        if i > j:
            i, j = j, i
        if not (0 <= i and j < d):
            raise IndexError(f"entry ({i}, {j}) outside block {block} of size {d}")
        return int(self.offsets[block] + i * d - i * (i - 1) // 2 + (j - i))

    def free_index(self, k: int) -> int:
        if not 0 <= k < self.n_free:
            raise IndexError(f"free variable {k} out of range")
        return self.n_psd + k

    def _column(self, entry) -> tuple[int, float]:
        """Map an entry triplet to (svec column, coefficient scale)."""
        block, i, j = entry[:3]
        return self.entry_index(block, i, j), (1.0 if i == j else 1.0 / SQRT2)

    def add_constraint(
        self,
        entries: Iterable[tuple[int, int, int, float]] = (),
        rhs: float = 0.0,
        free: Iterable[tuple[int, float]] = (),
    ) -> int:
        row = len(self.rhs)
        for block, i, j, v in entries:
            col, s = self._column((block, i, j))
            self._rows.append(row)
            self._cols.append(col)
            self._vals.append(float(v) * s)
        for k, v in free:
            self._rows.append(row)
            self._cols.append(self.free_index(k))
            self._vals.append(float(v))
        self.rhs.append(float(rhs))
        return row

    def set_objective(
        self,
        entries: Iterable[tuple[int, int, int, float]] = (),
        free: Iterable[tuple[int, float]] = (),
    ) -> None:
        self._obj = {}
        for block, i, j, v in entries:
            col, s = self._column((block, i, j))
            self._obj[col] = self._obj.get(col, 0.0) + float(v) * s
        for k, v in free:
            col = self.free_index(k)
            self._obj[col] = self._obj.get(col, 0.0) + float(v)

    # matrix views ----------------------------------------------------------
    def matrices(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        """Return ``(A, b, c)`` over svec-scaled variables (columns)."""
        A = sp.csr_matrix(
            (self._vals, (self._rows, self._cols)), shape=(len(self.rhs), self.n_vars)
        )
        A.sum_duplicates()
        b = np.array(self.rhs, dtype=float)
        c = np.zeros(self.n_vars)
        for col, v in self._obj.items():
            c[col] = v
        return A, b, c

    def has_objective(self) -> bool:
        return any(v != 0.0 for v in self._obj.values())

    def validate(self) -> None:
        vals = np.asarray(self._vals, dtype=float)
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(self.rhs))
                and all(math.isfinite(v) for v in self._obj.values())):
            raise ValueError(f"SDP {self.name!r} contains NaN or Inf data")

    # svec helpers ------------------------------------------------------------
    def unpack(self, xvec: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        mats = []
        for b, d in enumerate(self.blocks):
            mats.append(smat(xvec[self.offsets[b]:self.offsets[b + 1]], d))
        return mats, np.array(xvec[self.n_psd:], dtype=float)

    def pack(self, blocks: Sequence[np.ndarray], free: Sequence[float] = ()) -> np.ndarray:
        parts = [svec(np.asarray(X, dtype=float)) for X in blocks]
        return np.concatenate(parts + [np.asarray(free, dtype=float)])


@functools.lru_cache(maxsize=None)
def _tri(d: int):
    iu = np.triu_indices(d)
    diag = iu[0] == iu[1]
    return iu, np.where(diag, 1.0, SQRT2), np.where(diag, 1.0, 1.0 / SQRT2)


def svec(X: np.ndarray) -> np.ndarray:
    iu, up, _ = _tri(X.shape[0])
    return X[iu] * up


def smat(v: np.ndarray, d: int) -> np.ndarray:
    iu, _, down = _tri(d)
    X = np.zeros((d, d))
    X[iu] = v * down
    X.T[iu] = X[iu]
    return X


def project_psd(X: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh(X)
    if w[0] >= 0:
        return X
    w = np.maximum(w, 0.0)
    return (Q * w) @ Q.T


# -- solutions and independent checking -------------------------------------

@dataclass
class SdpSolution:
    status: Status
    block_values: list[np.ndarray]
    free_values: np.ndarray
    objective_value: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    solve_time: float = 0.0
    dual_values: np.ndarray | None = None
    certificate_residual: float | None = None

    def value_vector(self, prob: SdpProblem) -> np.ndarray:
        return prob.pack(self.block_values, self.free_values)


@dataclass
class ResidualReport:
    eigen_floor: float
    max_violation: float
    objective: float
    block_eigen_floors: list[float] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.eigen_floor >= -tol and self.max_violation <= tol


def check_solution(
    prob: SdpProblem,
    blocks: Sequence[np.ndarray] | SdpSolution,
    free: Sequence[float] | None = None,
) -> ResidualReport:
    """Recompute eigenvalue floor, constraint violation and objective."""
    if isinstance(blocks, SdpSolution):
        free = blocks.free_values if free is None else free
        blocks = blocks.block_values
    free = np.zeros(prob.n_free) if free is None else np.asarray(free, dtype=float)
    if len(blocks) != len(prob.blocks) or free.shape != (prob.n_free,):
        raise ValueError("solution does not match the problem layout")
    floors = []
    for X, d in zip(blocks, prob.blocks):
        X = np.asarray(X, dtype=float)
        if X.shape != (d, d):
            raise ValueError(f"block of shape {X.shape}, expected {(d, d)}")
        floors.append(float(np.linalg.eigvalsh(0.5 * (X + X.T))[0]))
    A, b, c = prob.matrices()
    xv = prob.pack([0.5 * (np.asarray(X) + np.asarray(X).T) for X in blocks], free)
    viol = float(np.max(np.abs(A @ xv - b), initial=0.0))
    return ResidualReport(
        eigen_floor=min(floors, default=0.0),
        max_violation=viol,
        objective=float(c @ xv),
        block_eigen_floors=floors,
    )


# -- backends ----------------------------------------------------------------

class SdpBackend(Protocol):
    def solve(self, prob: SdpProblem, opts: SolverOptions) -> SdpSolution: ...


def solve(
    prob: SdpProblem,
    opts: SolverOptions | None = None,
    backend: SdpBackend | None = None,
) -> SdpSolution:
    """Solve ``prob`` with the given backend (splitting solver by default)."""
    opts = opts or SolverOptions.from_env()
    prob.validate()
    return (backend or SplittingSolver()).solve(prob, opts)


class SplittingSolver:
    """ADMM on the homogeneous self-dual embedding of the block SDP.

    Iterates u = (x, y, tau), v = (r, s, kappa) with
    ``u_t = (I + Q)^-1 (u + v)``, ``u = Proj(relaxed u_t - v)``,
    ``v = v - relaxed u_t + u``.  The PSD constraint on the svec variables
    enters as rows ``-x_psd + s = 0``; equality rows have a zero cone.
    """

    def solve(self, prob: SdpProblem, opts: SolverOptions) -> SdpSolution:
        t0 = time.perf_counter()
        A0, b0, c0 = prob.matrices()
        m, n = A0.shape
        npsd = prob.n_psd
        # Ruiz equilibration on equality rows, one scalar per block / free column.
        groups = [(int(prob.offsets[k]), int(prob.offsets[k + 1])) for k in range(len(prob.blocks))]
        groups += [(npsd + k, npsd + k + 1) for k in range(prob.n_free)]
        R = np.ones(m)
        C = np.ones(n)
        A = A0.tocsc().copy()
        if opts.equilibrate and m > 0:
            for _ in range(15):
                absA = abs(A)
                rmax = np.asarray(absA.max(axis=1).todense()).ravel()
                rs = 1.0 / np.sqrt(np.where(rmax > 0, rmax, 1.0))
                A = sp.diags(rs) @ A
                R *= rs
                absA = abs(A).tocsc()
                cmax = np.asarray(absA.max(axis=0).todense()).ravel()
                cs = np.ones(n)
                for lo, hi in groups:
                    g = cmax[lo:hi].max() if hi > lo else 0.0
                    if g > 0:
                        cs[lo:hi] = 1.0 / math.sqrt(g)
                A = A @ sp.diags(cs)
                C *= cs
                if np.all(np.abs(rs - 1) < 1e-2) and np.all(np.abs(cs - 1) < 1e-2):
                    break
        A = sp.csr_matrix(A)
        b = R * b0
        c = C * c0
        nb = np.linalg.norm(b)
        nc = np.linalg.norm(c)
        sig_b = 1.0 / nb if nb > 1e-12 else 1.0
        sig_c = 1.0 / nc if nc > 1e-12 else 1.0
        b = b * sig_b
        c = c * sig_c

        # (D + A^T A)^-1 via Woodbury with a sparse factorisation of I + A D^-1 A^T.
        dinv = np.ones(n)
        dinv[:npsd] = 0.5
        AT = sp.csr_matrix(A.T)
        if m > 0:
            K = sp.identity(m, format="csc") + (A @ sp.diags(dinv) @ AT).tocsc()
            try:
                lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
                ksolve = lu.solve
            except RuntimeError:
                fac = sla.cho_factor(K.toarray())
                ksolve = lambda r: sla.cho_solve(fac, r)  # noqa: E731
        else:
            ksolve = lambda r: r  # noqa: E731

        def solve_x(rhs):
            t = dinv * rhs
            if m == 0:
                return t
            return t - dinv * (AT @ ksolve(A @ t))

        def solve_M(wx, weq, wpsd):
            # M = [[I, A^T], [-A, I]] with A = [A_eq; -P]
            rhs = wx - AT @ weq
            rhs[:npsd] += wpsd
            zx = solve_x(rhs)
            zeq = weq + A @ zx
            zpsd = wpsd - zx[:npsd]
            return zx, zeq, zpsd

        px, peq, ppsd = solve_M(c, b, np.zeros(npsd))
        denom = 1.0 + c @ px + b @ peq

        blocks = [(int(prob.offsets[k]), int(prob.offsets[k + 1]), d)
                  for k, d in enumerate(prob.blocks)]
        # blocks of equal size are projected together with one batched eigh
        groups = []
        scalar_idx = np.array([lo for lo, hi, d in blocks if d == 1], dtype=int)
        for d in sorted({d for _, _, d in blocks if d > 1}):
            idx = np.array([np.arange(lo, hi) for lo, hi, dd in blocks if dd == d])
            groups.append((d, idx) + _tri(d))

        def proj_psd_vec(v):
            out = np.empty_like(v)
            if scalar_idx.size:
                out[scalar_idx] = np.maximum(v[scalar_idx], 0.0)
            for d, idx, iu, up, down in groups:
                V = v[idx] * down
                X = np.zeros((idx.shape[0], d, d))
                X[:, iu[0], iu[1]] = V
                X[:, iu[1], iu[0]] = V
                w, Q = np.linalg.eigh(X)
                Xp = (Q * np.maximum(w, 0.0)[:, None, :]) @ np.swapaxes(Q, 1, 2)
                out[idx] = Xp[:, iu[0], iu[1]] * up
            return out

        # state: z = (x, y_eq, y_psd, tau, s_psd, kappa)
        n_state = n + m + npsd + 1 + npsd + 1
        sl_x = slice(0, n)
        sl_eq = slice(n, n + m)
        sl_yp = slice(n + m, n + m + npsd)
        i_tau = n + m + npsd
        sl_s = slice(i_tau + 1, i_tau + 1 + npsd)
        i_kap = n_state - 1

        def T(z):
            x, yeq, yp, tau, s, kap = z[sl_x], z[sl_eq], z[sl_yp], z[i_tau], z[sl_s], z[i_kap]
            wx, weq, wpsd, wtau = x, yeq, yp + s, tau + kap
            zx, zeq, zpsd = solve_M(wx, weq, wpsd)
            ttil = (wtau + c @ zx + b @ zeq) / denom
            xt = zx - ttil * px
            eqt = zeq - ttil * peq
            pst = zpsd - ttil * ppsd
            a = opts.alpha
            xr = a * xt + (1 - a) * x
            eqr = a * eqt + (1 - a) * yeq
            psr = a * pst + (1 - a) * yp
            tr = a * ttil + (1 - a) * tau
            yp_new = proj_psd_vec(psr - s)
            tau_new = max(tr - kap, 0.0)
            out = np.empty_like(z)
            out[sl_x] = xr
            out[sl_eq] = eqr
            out[sl_yp] = yp_new
            out[i_tau] = tau_new
            out[sl_s] = s - psr + yp_new
            out[i_kap] = kap - tr + tau_new
            return out

        z = np.zeros(n_state)
        z[i_tau] = 1.0
        z[i_kap] = 1.0

        norm_b0 = float(np.max(np.abs(b0), initial=0.0))
        norm_c0 = float(np.max(np.abs(c0), initial=0.0))
        has_obj = norm_c0 > 0
        A0csr = A0.tocsr()
        A0T = A0csr.T.tocsr()

        def unscale(zz):
            tau = zz[i_tau]
            x = C * zz[sl_x] / sig_b
            S = np.zeros(npsd)
            for k, (lo, hi, _) in enumerate(blocks):
                S[lo:hi] = C[lo] * zz[sl_s][lo:hi] / sig_b
            yeq = R * zz[sl_eq] / sig_c
            Z = np.zeros(npsd)
            for lo, hi, _ in blocks:
                Z[lo:hi] = zz[sl_yp][lo:hi] / (C[lo] * sig_c)
            return tau, x, S, yeq, Z

        def assess(zz, final=False):
            tau, x, S, yeq, Z = unscale(zz)
            kap = zz[i_kap]
            info = {}
            if tau > 1e-12 * max(1.0, kap):
                xs = x / tau
                Ss = S / tau
                ys = yeq / tau
                Zs = Z / tau
                xv = np.concatenate([Ss, xs[npsd:]])
                rp = A0csr @ xv - b0
                pres = float(np.max(np.abs(rp), initial=0.0))
                rd = A0T @ ys + c0
                rd[:npsd] -= Zs
                dres = float(np.max(np.abs(rd), initial=0.0))
                pobj = float(c0 @ xv)
                dobj = float(-b0 @ ys)
                gap = abs(pobj - dobj)
                info.update(xv=xv, yeq=ys, pres=pres, dres=dres, pobj=pobj, gap=gap)
                p_ok = pres <= opts.feas_tol * (1.0 + norm_b0)
                if not has_obj:
                    if p_ok:
                        return Status.FEASIBLE, info
                else:
                    d_ok = dres <= opts.feas_tol * (1.0 + norm_c0)
                    g_ok = gap <= opts.gap_tol * (1.0 + abs(pobj) + abs(dobj))
                    if p_ok and d_ok and g_ok:
                        return Status.OPTIMAL, info
                    if final and p_ok:
                        return Status.FEASIBLE, info
            # infeasibility certificate: A^T y - P^T Z = 0, Z psd, b^T y < 0
            by = float(b0 @ yeq)
            if by < 0:
                ry = A0T @ yeq
                ry[:npsd] -= Z
                cres = float(np.max(np.abs(ry), initial=0.0)) / (-by)
                info["cert"] = cres
                if cres <= opts.feas_tol:
                    info["yeq"] = yeq / (-by)
                    return Status.INFEASIBLE, info
            cx = float(c0 @ np.concatenate([S, x[npsd:]]))
            if has_obj and cx < 0:
                xv = np.concatenate([S, x[npsd:]])
                ures = float(np.max(np.abs(A0csr @ xv), initial=0.0)) / (-cx)
                if ures <= opts.feas_tol:
                    info["xv"] = xv / (-cx)
                    return Status.UNBOUNDED, info
            return None, info

        # Anderson acceleration (type II) with a residual safeguard.
        mem = opts.anderson_memory
        # ring buffers of iterate / residual differences (rows)
        dZ = np.zeros((max(mem, 1), z.size))
        dG = np.zeros((max(mem, 1), z.size))
        n_hist = 0
        head = 0
        z_prev = g_prev = None
        status = None
        info: dict = {}
        it = 0
        fz = T(z)
        res_norm = np.linalg.norm(fz - z)
        for it in range(1, opts.max_iters + 1):
            g = fz - z
            z_next = fz
            if mem > 0:
                if z_prev is not None:
                    np.subtract(z, z_prev, out=dZ[head])
                    np.subtract(g, g_prev, out=dG[head])
                    head = (head + 1) % mem
                    n_hist = min(n_hist + 1, mem)
                z_prev, g_prev = z, g
                if n_hist >= 2:
                    Gm = dG[:n_hist]
                    H = Gm @ Gm.T
                    H[np.diag_indices_from(H)] += 1e-10 * (np.trace(H) + 1e-30)
                    try:
                        gamma = np.linalg.solve(H, Gm @ g)
                        z_aa = fz - gamma @ (dZ[:n_hist] + Gm)
                        if np.all(np.isfinite(z_aa)):
                            f_aa = T(z_aa)
                            r_aa = np.linalg.norm(f_aa - z_aa)
                            if r_aa <= res_norm:
                                z, fz, res_norm = z_aa, f_aa, r_aa
                                z_next = None
                    except np.linalg.LinAlgError:
                        pass
            if z_next is not None:
                z = z_next
                fz = T(z)
                res_norm = np.linalg.norm(fz - z)
            if not np.all(np.isfinite(z)):
                status = Status.NUMERICAL_FAILURE
                break
            if it % opts.check_every == 0:
                status, info = assess(z)
                if opts.verbose:
                    logger.info("it %d tau %.3e %s", it, z[i_tau], {k: v for k, v in info.items() if isinstance(v, float)})
                if status is not None:
                    break
                if opts.time_limit and time.perf_counter() - t0 > opts.time_limit:
                    break
        if status is None:
            status, info = assess(z, final=True)
            if status is None:
                status = Status.MAX_ITERATIONS

        return self._package(prob, status, z, info, unscale, it, time.perf_counter() - t0)

    @staticmethod
    def _package(prob, status, z, info, unscale, iters, elapsed):
        npsd = prob.n_psd
        if "xv" in info and status not in (Status.INFEASIBLE,):
            xv = info["xv"]
        else:
            tau, x, S, _, _ = unscale(z)
            xv = np.concatenate([S, x[npsd:]]) / max(tau, 1e-300) if tau > 0 else np.zeros(prob.n_vars)
        mats, free = prob.unpack(xv)
        _, _, c0 = prob.matrices()
        return SdpSolution(
            status=status,
            block_values=mats,
            free_values=free,
            objective_value=float(c0 @ xv),
            primal_residual=float(info.get("pres", math.inf)),
            dual_residual=float(info.get("dres", math.inf)),
            gap=float(info.get("gap", math.inf)),
            iterations=iters,
            solve_time=elapsed,
            dual_values=info.get("yeq"),
            certificate_residual=info.get("cert"),
        )


class CvxoptBackend:
    """Interior-point backend through ``cvxopt.solvers.sdp`` (optional).

    Used as an independent cross-check of the splitting solver; free
    variables become ``G``-less linear variables of the cvxopt primal.
    """

    def solve(self, prob: SdpProblem, opts: SolverOptions) -> SdpSolution:
        import cvxopt
        from cvxopt import solvers

        t0 = time.perf_counter()
        A, b, c = prob.matrices()
        # cvxopt solves min c'x s.t. Gs x + s = hs, s psd (column-major dense
        # blocks), A x = b.  Use x = svec variables; G maps x to -X.
        Gs, hs = [], []
        for k, d in enumerate(prob.blocks):
            lo = int(prob.offsets[k])
            iu = np.triu_indices(d)
            G = np.zeros((d * d, prob.n_vars))
            for p, (i, j) in enumerate(zip(*iu)):
                s = 1.0 if i == j else 1.0 / SQRT2
                G[i * d + j, lo + p] -= s
                if i != j:
                    G[j * d + i, lo + p] -= s
            Gs.append(cvxopt.matrix(G))
            hs.append(cvxopt.matrix(np.zeros((d, d))))
        solvers.options.update(
            show_progress=opts.verbose,
            abstol=opts.gap_tol,
            reltol=opts.gap_tol,
            feastol=opts.feas_tol,
            maxiters=min(opts.max_iters, 200),
        )
        Ad = A.toarray()
        # drop linearly dependent equality rows; cvxopt requires full row rank
        keep = _independent_rows(Ad)
        res = solvers.sdp(
            cvxopt.matrix(c), Gs=Gs, hs=hs,
            A=cvxopt.matrix(Ad[keep]), b=cvxopt.matrix(b[keep]),
        )
        st = res["status"]
        if st == "optimal":
            status = Status.OPTIMAL if prob.has_objective() else Status.FEASIBLE
        elif st == "primal infeasible":
            status = Status.INFEASIBLE
        elif st == "dual infeasible":
            status = Status.UNBOUNDED
        else:
            status = Status.MAX_ITERATIONS
        xv = np.array(res["x"]).ravel() if res["x"] is not None else np.zeros(prob.n_vars)
        mats, free = prob.unpack(xv)
        rep = check_solution(prob, mats, free)
        return SdpSolution(
            status=status,
            block_values=mats,
            free_values=free,
            objective_value=float(c @ xv),
            primal_residual=rep.max_violation,
            dual_residual=float(res.get("dual infeasibility") or 0.0),
            gap=float(res.get("gap") or 0.0),
            iterations=int(res.get("iterations", 0)),
            solve_time=time.perf_counter() - t0,
        )


def _independent_rows(A: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if A.shape[0] == 0:
        return np.arange(0)
    _, r, piv = sla.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * max(diag.max(initial=0.0), 1.0)))
    return np.sort(piv[:rank])


# -- text dump ----------------------------------------------------------------

def dump_problem(prob: SdpProblem) -> str:
    """Render ``prob`` in the sparse text format read by :func:`load_problem`.

    Lines::

        name <text>
        blocks <d1> <d2> ...
        free <count>
        e <row> <block> <i> <j> <value>    # coefficient of X_block[i, j]
        f <row> <k> <value>                # coefficient of free variable k
        b <row> <rhs>
        o <block> <i> <j> <value>          # objective, same conventions
        of <k> <value>

    Rows, blocks and indices are 0-based; values use repr() for exactness.
    """
    lines = [f"name {prob.name}", "blocks " + " ".join(map(str, prob.blocks)), f"free {prob.n_free}"]
    loc = _column_locator(prob)
    A, b, c = prob.matrices()
    A = A.tocoo()
    order = np.lexsort((A.col, A.row))
    for r, col, v in zip(A.row[order], A.col[order], A.data[order]):
        kind, blk, i, j, s = loc[col]
        if kind == "e":
            lines.append(f"e {r} {blk} {i} {j} {float(v / s)!r}")
        else:
            lines.append(f"f {r} {blk} {float(v)!r}")
    for r, v in enumerate(b):
        lines.append(f"b {r} {float(v)!r}")
    for col in np.flatnonzero(c):
        kind, blk, i, j, s = loc[col]
        if kind == "e":
            lines.append(f"o {blk} {i} {j} {float(c[col] / s)!r}")
        else:
            lines.append(f"of {blk} {float(c[col])!r}")
    return "\n".join(lines) + "\n"


def _column_locator(prob: SdpProblem):
    loc = {}
    for blk, d in enumerate(prob.blocks):
        for i in range(d):
            for j in range(i, d):
                loc[prob.entry_index(blk, i, j)] = ("e", blk, i, j, 1.0 if i == j else 1.0 / SQRT2)
    for k in range(prob.n_free):
        loc[prob.n_psd + k] = ("f", k, 0, 0, 1.0)
    return loc


def load_problem(text: str) -> SdpProblem:
    name, blocks, n_free = "", [], 0
    rows: dict[int, dict] = {}
    obj_e, obj_f = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "name":
            name = " ".join(rest)
        elif tag == "blocks":
            blocks = [int(t) for t in rest]
        elif tag == "free":
            n_free = int(rest[0])
        elif tag == "e":
            r, blk, i, j, v = int(rest[0]), int(rest[1]), int(rest[2]), int(rest[3]), float(rest[4])
            rows.setdefault(r, {"e": [], "f": [], "b": 0.0})["e"].append((blk, i, j, v))
        elif tag == "f":
            r, k, v = int(rest[0]), int(rest[1]), float(rest[2])
            rows.setdefault(r, {"e": [], "f": [], "b": 0.0})["f"].append((k, v))
        elif tag == "b":
            rows.setdefault(int(rest[0]), {"e": [], "f": [], "b": 0.0})["b"] = float(rest[1])
        elif tag == "o":
            obj_e.append((int(rest[0]), int(rest[1]), int(rest[2]), float(rest[3])))
        elif tag == "of":
            obj_f.append((int(rest[0]), float(rest[1])))
        else:
            raise ValueError(f"unknown line tag {tag!r}")
    prob = SdpProblem(blocks, n_free, name)
    for r in range(max(rows, default=-1) + 1):
        row = rows.get(r, {"e": [], "f": [], "b": 0.0})
        prob.add_constraint(row["e"], row["b"], row["f"])
    prob.set_objective(obj_e, obj_f)
    return prob
