"""Fixed-step RK4 simulation of (controlled) interconnected systems."""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import InterconnectedSystem
from .poly import CompiledPolyVec, Polynomial

logger = logging.getLogger(__name__)

BLOWUP = 1e6
HYSTERESIS = 1e-9


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # steps x n
    lyapunov: np.ndarray  # steps x m (empty columns without certificates)
    active: np.ndarray  # steps x m, round index of the active controller or -1
    sids: list[int] = field(default_factory=list)
    var_names: list[str] = field(default_factory=list)
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.states[-1])) if len(self.times) else math.nan

    def control_activity(self) -> list[set[tuple[int, int]]]:
        out = []
        for row in self.active:
            out.append({(self.sids[c], int(k)) for c, k in enumerate(row) if k >= 0})
        return out

    def monotonicity_violations(self, tol: float = 1e-9) -> int:
        if len(self.times) < 2 or self.lyapunov.shape[1] == 0:
            return 0
        return int(np.sum(np.diff(self.lyapunov, axis=0) > tol))

    def summary(self, tol: float = 1e-3) -> dict:
        return {
            "converged": (not self.diverged) and self.final_norm < tol,
            "diverged": self.diverged,
            "final_norm": self.final_norm,
            "monotonicity_violations": self.monotonicity_violations(),
            "steps": len(self.times),
        }


class Gate:
    """Shell membership for controllers, with hysteresis.

    A controller of subsystem i from round k is active while
    ``eps_i^{k+1} <= V_i <= eps_i^k`` and ``V_j <= eps_j^k`` for the other
    neighbors; the deepest matching round wins.
    """

    def __init__(self, sys: InterconnectedSystem, result, hysteresis: float = HYSTERESIS):
        self.sys = sys
        self.h = hysteresis
        self.col = {sid: c for c, sid in enumerate(sys.ids)}
        self.entries: dict[int, list[tuple[int, float, float, list[tuple[int, float]], CompiledPolyVec]]] = {}
        n = len(sys.varset)
        for law in result.controllers:
            i, k = law.sid, law.round
            levels = result.levels_at(k)
            lower = result.schedule[i][k + 1] if len(result.schedule[i]) > k + 1 else 0.0
            nbs = [(self.col[j], levels[j]) for j in sorted(sys.neighbors[i]) if j != i]
            fn = CompiledPolyVec(law.field(sys), n)
            self.entries.setdefault(self.col[i], []).append((k, lower, levels[i], nbs, fn))
        for c in self.entries:
            self.entries[c].sort(key=lambda e: -e[0])

    def select(self, Vv: np.ndarray, prev: np.ndarray) -> np.ndarray:
        """Active round per (trajectory, subsystem) given V values (N x m)."""
        out = np.full(Vv.shape, -1, dtype=int)
        for c, entries in self.entries.items():
            free = np.ones(Vv.shape[0], dtype=bool)
            for k, lo, hi, nbs, _ in entries:
                h = np.where(prev[:, c] == k, self.h, 0.0)
                ok = free & (Vv[:, c] >= lo - h) & (Vv[:, c] <= hi + h)
                for cj, lj in nbs:
                    ok &= Vv[:, cj] <= lj + h
                out[ok, c] = k
                free &= ~ok
        return out

    def field(self, X: np.ndarray, active: np.ndarray) -> np.ndarray:
        out = np.zeros_like(X)
        for c, entries in self.entries.items():
            for k, _, _, _, fn in entries:
                rows = np.nonzero(active[:, c] == k)[0]
                if rows.size:
                    out[rows] += fn(X[rows])
        return out


class Simulator:
    """Vectorized RK4 over many initial states at once."""

    def __init__(self, sys: InterconnectedSystem, certs: Mapping | None = None, result=None,
                 isolated: bool = False):
        self.sys = sys
        n = len(sys.varset)
        if isolated:
            dyn = [Polynomial.zero(sys.varset)] * n
            for s in sys.subsystems:
                for k, i in enumerate(sys.state_indices(s.id)):
                    dyn[i] = s.f[k]
        else:
            dyn = list(sys.dynamics())
        self.f = CompiledPolyVec(dyn, n)
        self.sids = sys.ids
        self.V = None
        if certs:
            self.V = CompiledPolyVec([certs[i].V for i in self.sids], n)
        self.gate = None
        if result is not None and getattr(result, "controllers", None):
            if self.V is None:
                raise ValueError("controlled simulation needs Lyapunov certificates for gating")
            self.gate = Gate(sys, result)

    def lyap(self, X: np.ndarray) -> np.ndarray:
        if self.V is None:
            return np.zeros((X.shape[0], 0))
        return self.V(X)

    def run(
        self,
        X0: np.ndarray,
        T: float = 100.0,
        dt: float = 0.005,
        blowup: float = BLOWUP,
        record_every: int | None = 1,
        monitor: Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], None] | None = None,
    ) -> dict:
        """Integrate a batch; returns final states, flags and optional records.

        ``monitor(step, t, X, V, active)`` is called after every step (and at
        t=0) with the current batch; diverged rows are frozen and reported.
        """
        if dt <= 0 or T < 0:
            raise ValueError("dt must be positive and T non-negative")
        X = np.array(X0, dtype=float, ndmin=2)
        N, n = X.shape
        if n != len(self.sys.varset):
            raise ValueError(f"initial state has dimension {n}, system has {len(self.sys.varset)}")
        steps = int(round(T / dt))
        m = len(self.sids)
        alive = np.ones(N, dtype=bool)
        diverged = np.zeros(N, dtype=bool)
        div_step = np.full(N, -1)
        Vv = self.lyap(X)
        active = np.full((N, m), -1, dtype=int)
        if self.gate is not None:
            active = self.gate.select(Vv, active)
        rec_t, rec_x, rec_v, rec_a = [], [], [], []

        def record(t):
            rec_t.append(t)
            rec_x.append(X.copy())
            rec_v.append(Vv.copy())
            rec_a.append(active.copy())

        if record_every:
            record(0.0)
        if monitor:
            monitor(0, 0.0, X, Vv, active)
        for step in range(1, steps + 1):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            Xa = X[idx]
            if self.gate is not None:
                act = active[idx]
                rhs = lambda Z: self.f(Z) + self.gate.field(Z, act)  # noqa: E731
            else:
                rhs = self.f
            k1 = rhs(Xa)
            k2 = rhs(Xa + 0.5 * dt * k1)
            k3 = rhs(Xa + 0.5 * dt * k2)
            k4 = rhs(Xa + dt * k3)
            Xn = Xa + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = ~np.all(np.isfinite(Xn), axis=1) | (np.max(np.abs(Xn), axis=1) > blowup)
            if bad.any():
                b = idx[bad]
                diverged[b] = True
                div_step[b] = step
                alive[b] = False
                Xn[bad] = Xa[bad]
            X[idx] = Xn
            Vv = self.lyap(X)
            if self.gate is not None:
                active = self.gate.select(Vv, active)
            t = step * dt
            if record_every and (step % record_every == 0 or step == steps):
                record(t)
            if monitor:
                monitor(step, t, X, Vv, active)
        out = {"final": X, "diverged": diverged, "diverged_step": div_step, "T": T, "dt": dt}
        if record_every:
            out["times"] = np.array(rec_t)
            out["states"] = np.stack(rec_x, axis=1)  # N x steps x n
            out["lyapunov"] = np.stack(rec_v, axis=1)
            out["active"] = np.stack(rec_a, axis=1)
        return out


def integrate(
    sys: InterconnectedSystem,
    x0: Sequence[float],
    T: float = 100.0,
    dt: float = 0.005,
    certs: Mapping | None = None,
    result=None,
    blowup: float = BLOWUP,
    record_every: int = 1,
) -> Trajectory:
    """Single trajectory with V traces (and gated controllers if ``result`` has any)."""
    sim = Simulator(sys, certs, result)
    out = sim.run(np.asarray(x0, dtype=float)[None, :], T, dt, blowup, record_every)
    times = out["times"]
    states = out["states"][0]
    lyap = out["lyapunov"][0]
    active = out["active"][0]
    if out["diverged"][0]:
        cut = int(np.searchsorted(times, out["diverged_step"][0] * dt - 1e-12))
        times, states, lyap, active = times[:cut], states[:cut], lyap[:cut], active[:cut]
    return Trajectory(times, states, lyap, active, list(sys.ids), list(sys.varset.names),
                      bool(out["diverged"][0]))


def integrate_many(sys, X0, T=100.0, dt=0.005, certs=None, result=None, blowup=BLOWUP,
                   record_every: int = 10) -> list[Trajectory]:
    sim = Simulator(sys, certs, result)
    out = sim.run(X0, T, dt, blowup, record_every)
    trajs = []
    for r in range(out["final"].shape[0]):
        trajs.append(Trajectory(out["times"], out["states"][r], out["lyapunov"][r], out["active"][r],
                                list(sys.ids), list(sys.varset.names), bool(out["diverged"][r])))
    return trajs


@dataclass
class RoaProbe:
    xs: np.ndarray
    ys: np.ndarray
    converged: np.ndarray  # len(ys) x len(xs)
    V: np.ndarray | None = None

    def certified_outside(self) -> int:
        """Cells with V <= 1 that did not converge (must be zero)."""
        if self.V is None:
            return 0
        return int(np.sum((self.V <= 1.0) & ~self.converged))

    def converged_outside_estimate(self) -> int:
        if self.V is None:
            return 0
        return int(np.sum((self.V > 1.0) & self.converged))


def probe_roa(
    sys: InterconnectedSystem,
    sid: int,
    V: Polynomial | None = None,
    lo: float = -3.0,
    hi: float = 3.0,
    cells: int = 200,
    T: float = 60.0,
    dt: float = 0.01,
    tol: float = 1e-3,
    blowup: float = 1e3,
) -> RoaProbe:
    """Grid probe of the isolated subsystem's region of attraction.

    For a one-state subsystem the grid is 1-D (``converged`` has one row).
    """
    idx = sys.state_indices(sid)
    if len(idx) not in (1, 2):
        raise ValueError("grid probing supports subsystems with one or two states")
    n = len(sys.varset)
    f = sys.embed(sid, list(sys.subsystem(sid).f))
    field_ = CompiledPolyVec(f, n)
    xs = np.linspace(lo, hi, cells)
    ys = np.linspace(lo, hi, cells) if len(idx) == 2 else np.zeros(1)
    GX, GY = np.meshgrid(xs, ys)
    X = np.zeros((GX.size, n))
    X[:, idx[0]] = GX.ravel()
    if len(idx) == 2:
        X[:, idx[1]] = GY.ravel()
    Vgrid = V.evaluate_many(X).reshape(GX.shape) if V is not None else None
    status = np.zeros(GX.size, dtype=int)  # 0 running, 1 converged, -1 diverged
    cur = X.copy()
    for _ in range(int(round(T / dt))):
        run = np.nonzero(status == 0)[0]
        if run.size == 0:
            break
        Z = cur[run]
        k1 = field_(Z)
        k2 = field_(Z + 0.5 * dt * k1)
        k3 = field_(Z + 0.5 * dt * k2)
        k4 = field_(Z + dt * k3)
        Z = Z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        cur[run] = Z
        norm = np.max(np.abs(Z), axis=1)
        bad = ~np.isfinite(norm) | (norm > blowup)
        status[run[bad]] = -1
        status[run[~bad & (np.linalg.norm(Z, axis=1) < tol * 1e-2)]] = 1
    final = np.linalg.norm(cur, axis=1)
    conv = (status == 1) | ((status == 0) & (final < tol))
    return RoaProbe(xs, ys, conv.reshape(GX.shape), Vgrid)


def export_traces(traj: Trajectory, path) -> None:
    """Write time, states and V columns; ``path`` may be an open text stream."""
    vcols = [f"V{s}" for s in traj.sids] if traj.lyapunov.shape[1] else []
    header = ["time"] + list(traj.var_names) + vcols
    with (open(path, "w", newline="") if isinstance(path, (str, Path)) else contextlib.nullcontext(path)) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(traj.times)):
            row = [repr(float(traj.times[r]))]
            row += [repr(float(v)) for v in traj.states[r]]
            if traj.lyapunov.shape[1]:
                row += [repr(float(v)) for v in traj.lyapunov[r]]
            w.writerow(row)


def read_traces(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and data matrix of a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trace file")
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, data
