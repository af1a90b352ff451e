"""Round-synchronized epsilon-schedule certification of interconnected systems.

Each subsystem i keeps a level eps_i^k.  In round k it searches (bisection)
for the smallest eps_i^{k+1} such that V_i decreases on the shell
``eps_i^{k+1} <= V_i <= eps_i^k`` while every neighbor j stays below
eps_j^k, then sends the new level to the subsystems that listen to it.  All
levels reaching zero certifies asymptotic stability of the box
``{V_i <= eps_i^0 for all i}``.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .control import ControlLaw, needs_control, sample_region, synthesize
from .lyap import LyapunovCertificate
from .model import InterconnectedSystem
from .poly import Polynomial, lie_derivative
from .sdp import SdpBackend, SolverOptions
from .sos import GramCertificate, SosProgram, margin_poly

logger = logging.getLogger(__name__)

EPS_BAR = 1e-3
MARGIN = 1e-6
FAIL = "×"  # printed for an infeasible round-0 step


class Verdict(str, enum.Enum):
    CERTIFIED = "Certified"
    CERTIFIED_WITH_CONTROL = "CertifiedWithControl"
    NOT_CERTIFIED = "NotCertified"
    UNDETERMINED = "Undetermined"


@dataclass(frozen=True)
class EpsilonMessage:
    sender: int
    round: int
    value: float


class Mailbox:
    """In-process transport: a message from i reaches every j with i in N_j.

    Messages posted during round k become readable only after
    :meth:`barrier`, so every subsystem sees the same round-k snapshot.
    """

    def __init__(self, sys: InterconnectedSystem):
        self._listeners = {i: sorted(sys.reverse_neighbors(i)) for i in sys.ids}
        self._pending: dict[int, dict[int, EpsilonMessage]] = {i: {} for i in sys.ids}
        self._inbox: dict[int, dict[int, EpsilonMessage]] = {i: {} for i in sys.ids}

    def post(self, msg: EpsilonMessage) -> None:
        for j in self._listeners[msg.sender]:
            self._pending[j][msg.sender] = msg

    def barrier(self) -> None:
        for j, box in self._pending.items():
            self._inbox[j].update(box)
            box.clear()

    def view(self, receiver: int, round: int) -> dict[int, float]:
        box = self._inbox[receiver]
        stale = [m.sender for m in box.values() if m.round != round]
        if stale:
            raise RuntimeError(f"subsystem {receiver}: missing round-{round} messages from {stale}")
        return {s: m.value for s, m in box.items()}


@dataclass
class ShellCertificate:
    """Certified decrease of V_i on one shell of the schedule."""

    sid: int
    round: int
    lower: float
    upper: float
    levels: dict[int, float]
    grams: dict[str, GramCertificate] = field(default_factory=dict)
    multiplier_degree: int = 2
    controller: ControlLaw | None = None

    def to_json(self) -> dict:
        return {
            "subsystem": self.sid,
            "round": self.round,
            "lower": self.lower,
            "upper": self.upper,
            "neighbor_levels": {str(k): v for k, v in sorted(self.levels.items())},
            "multiplier_degree": self.multiplier_degree,
            "controlled": self.controller is not None,
            "gram_eigen_floors": {k: g.eigen_floor for k, g in sorted(self.grams.items())},
        }


@dataclass
class EpsilonStep:
    sid: int
    epsilon: float | None  # None: infeasible at the top of the range
    certificate: ShellCertificate | None
    solves: int = 0
    undetermined: int = 0

    @property
    def feasible(self) -> bool:
        return self.epsilon is not None


def shell_feasible(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    sid: int,
    eps: float,
    levels: Mapping[int, float],
    controller: ControlLaw | None = None,
    multiplier_degree: int | None = None,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    margin: float = MARGIN,
    round: int = 0,
) -> tuple[ShellCertificate | None, bool]:
    """SOS test of decrease on ``eps <= V_i <= eps_i^k`` with neighbors capped.

    Returns ``(certificate or None, undetermined)``.
    """
    vs = sys.varset
    nb = sys.neighborhood_indices(sid)
    own = sys.state_indices(sid)
    V = certs[sid].V
    field_ = sys.local_field(sid)
    if controller is not None:
        field_ = [a + b for a, b in zip(field_, controller.field(sys))]
    Vdot = lie_derivative(V, field_)
    if multiplier_degree is None:
        d = max(Vdot.degree - V.degree, 0)
        multiplier_degree = d + (d % 2)
    prog = SosProgram(vs, name=f"shell{sid}")
    s0 = prog.sos_poly(nb, multiplier_degree, name="sigma_0")
    expr = -Vdot - margin_poly(vs, own, margin) - s0 * (V - eps)
    for j in sorted(sys.neighbors[sid]):
        sj = prog.sos_poly(nb, multiplier_degree, name=f"sigma_{j}")
        expr = expr - sj * (Polynomial.constant(vs, levels[j]) - certs[j].V)
    prog.add_sos(expr, name="shell")
    sol = prog.solve(options, backend)
    if not sol.feasible:
        return None, sol.status.value == "undetermined"
    cert = ShellCertificate(sid, round, eps, levels[sid], dict(levels), dict(sol.grams),
                            multiplier_degree, controller)
    return cert, False


def min_next_epsilon(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    sid: int,
    levels: Mapping[int, float],
    controller: ControlLaw | None = None,
    eps_bar: float = EPS_BAR,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    multiplier_cap: int = 4,
    escalation_max_vars: int = 6,
    round: int = 0,
    margin: float = MARGIN,
) -> EpsilonStep:
    """Smallest certified eps_i^{k+1} in ``[0, eps_i^k]`` (resolution eps_bar/4).

    eps = 0 is tried first, then the top of the range; an infeasible top
    means the subsystem fails this round.  Undetermined solves count as
    infeasible.
    """
    top = levels[sid]
    if top <= 0:
        raise ValueError("current level must be positive")
    opts = options or SolverOptions.from_env()
    search = opts.for_search()
    step = EpsilonStep(sid, None, None)

    def probe(eps, o, mdeg=None):
        cert, und = shell_feasible(sys, certs, sid, eps, levels, controller, mdeg, o, backend, margin, round)
        step.solves += 1
        step.undetermined += int(und)
        logger.debug("S%d round %d: eps=%.6g mdeg=%s -> %s", sid, round, eps, mdeg,
                     "feasible" if cert is not None else ("undetermined" if und else "infeasible"))
        return cert

    zero = probe(0.0, search)
    if zero is not None:
        step.epsilon, step.certificate = 0.0, zero
        return step
    hi_cert = probe(top, opts)
    if hi_cert is None and len(sys.neighborhood_indices(sid)) <= escalation_max_vars:
        base = _default_mdeg(sys, certs, sid, controller)
        for mdeg in range(base + 2, multiplier_cap + 1, 2):
            hi_cert = probe(top, opts, mdeg)
            if hi_cert is not None:
                break
    if hi_cert is None:
        return step
    mdeg = hi_cert.multiplier_degree
    lo, hi = 0.0, top
    while hi - lo > eps_bar / 4:
        mid = 0.5 * (lo + hi)
        cert = probe(mid, search, mdeg)
        if cert is not None:
            hi, hi_cert = mid, cert
        else:
            lo = mid
    step.epsilon, step.certificate = hi, hi_cert
    return step


def _default_mdeg(sys, certs, sid, controller) -> int:
    field_ = sys.local_field(sid)
    if controller is not None:
        field_ = [a + b for a, b in zip(field_, controller.field(sys))]
    V = certs[sid].V
    d = max(lie_derivative(V, field_).degree - V.degree, 0)
    return d + (d % 2)


@dataclass
class CertificationResult:
    verdict: Verdict
    schedule: dict[int, list[float]]
    v0: dict[int, float]
    eps_bar: float
    failing: list[int] = field(default_factory=list)
    failed_round: int | None = None
    shells: list[ShellCertificate] = field(default_factory=list)
    controllers: list[ControlLaw] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    rounds: int = 0
    stable_only: bool = False
    wall_time: float = 0.0
    solves: int = 0

    @property
    def certified(self) -> bool:
        return self.verdict in (Verdict.CERTIFIED, Verdict.CERTIFIED_WITH_CONTROL)

    def levels_at(self, k: int) -> dict[int, float]:
        return {i: s[min(k, len(s) - 1)] for i, s in self.schedule.items()}

    def controller_for(self, sid: int, k: int) -> ControlLaw | None:
        for law in self.controllers:
            if law.sid == sid and law.round == k:
                return law
        return None

    def to_csv(self) -> str:
        ids = sorted(self.schedule)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k"] + [f"S{i}" for i in ids])
        n_rows = max(len(s) for s in self.schedule.values())
        if self.failed_round is not None:
            n_rows = max(n_rows, self.failed_round + 2)
        for k in range(n_rows):
            row = [str(k)]
            for i in ids:
                s = self.schedule[i]
                if self.failed_round is not None and k == self.failed_round + 1 and i in self.failing:
                    row.append(FAIL)
                elif k < len(s):
                    cell = f"{s[k]:.6f}"
                    if k >= 1 and self.controller_for(i, k - 1) is not None:
                        cell += "*"
                    row.append(cell)
                else:
                    row.append("")
            w.writerow(row)
        return buf.getvalue()

    def to_json(self, timestamp: str | None = None) -> dict:
        out = {
            "verdict": self.verdict.value,
            "eps_bar": self.eps_bar,
            "v0": {str(k): v for k, v in sorted(self.v0.items())},
            "schedule": {str(k): v for k, v in sorted(self.schedule.items())},
            "failing_subsystems": sorted(self.failing),
            "failed_round": self.failed_round,
            "rounds": self.rounds,
            "stable_in_the_sense_of_lyapunov_only": self.stable_only,
            "controllers": [c.to_json() for c in self.controllers],
            "shells": [s.to_json() for s in self.shells],
            "diagnostics": list(self.diagnostics),
            "solves": self.solves,
        }
        if timestamp is not None:
            out["timestamp"] = timestamp
        return out

    @classmethod
    def from_json(cls, d: dict, varset) -> "CertificationResult":
        res = cls(
            verdict=Verdict(d["verdict"]),
            schedule={int(k): [float(x) for x in v] for k, v in d["schedule"].items()},
            v0={int(k): float(v) for k, v in d["v0"].items()},
            eps_bar=float(d["eps_bar"]),
            failing=[int(i) for i in d.get("failing_subsystems", [])],
            failed_round=d.get("failed_round"),
            controllers=[ControlLaw.from_json(c, varset) for c in d.get("controllers", [])],
            diagnostics=list(d.get("diagnostics", [])),
            rounds=int(d.get("rounds", 0)),
            stable_only=bool(d.get("stable_in_the_sense_of_lyapunov_only", False)),
            solves=int(d.get("solves", 0)),
        )
        for s in d.get("shells", []):
            res.shells.append(ShellCertificate(
                int(s["subsystem"]), int(s["round"]), float(s["lower"]), float(s["upper"]),
                {int(k): float(v) for k, v in s["neighbor_levels"].items()},
                multiplier_degree=int(s.get("multiplier_degree", 2))))
        ctrl = {(c.sid, c.round): c for c in res.controllers}
        for s in res.shells:
            if (s.sid, s.round) in ctrl:
                s.controller = ctrl[s.sid, s.round]
        return res


def certify(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    v0: Mapping[int, float],
    eps_bar: float = EPS_BAR,
    max_rounds: int = 10,
    control: bool = False,
    options: SolverOptions | None = None,
    backend: SdpBackend | None = None,
    workers: int | None = None,
    controller_degree: int = 1,
    full_actuation: bool = False,
    margin: float = MARGIN,
) -> CertificationResult:
    """Run the distributed epsilon-schedule protocol."""
    t_start = time.perf_counter()
    if eps_bar <= 0:
        raise ValueError("eps_bar must be positive")
    for i in sys.ids:
        if i not in v0:
            raise ValueError(f"no initial level for subsystem {i}")
        if not 0 < v0[i] <= 1:
            raise ValueError(f"initial level of subsystem {i} must lie in (0, 1], got {v0[i]}")
        if i not in certs:
            raise ValueError(f"no Lyapunov certificate for subsystem {i}")
    opts = options or SolverOptions.from_env()
    ids = sys.ids
    schedule = {i: [float(v0[i])] for i in ids}
    res = CertificationResult(Verdict.UNDETERMINED, schedule, {i: float(v0[i]) for i in ids}, eps_bar)
    mailbox = Mailbox(sys)
    for i in ids:
        mailbox.post(EpsilonMessage(i, 0, float(v0[i])))
    mailbox.barrier()

    def run(i: int, k: int) -> tuple[EpsilonStep, ControlLaw | None]:
        levels = mailbox.view(i, k)
        step = min_next_epsilon(sys, certs, i, levels, None, eps_bar, opts, backend, round=k, margin=margin)
        if step.feasible or not control:
            return step, None
        if not needs_control(sys, certs, i, levels, opts, backend):
            logger.warning("subsystem %d: level-set decrease certified but shell search failed", i)
        law = synthesize(sys, certs, i, levels, controller_degree, round=k, options=opts,
                         backend=backend, full_actuation=full_actuation)
        if law is None:
            return step, None
        retry = min_next_epsilon(sys, certs, i, levels, law, eps_bar, opts, backend, round=k, margin=margin)
        retry.solves += step.solves
        return retry, law

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for k in range(max_rounds):
            active = [i for i in ids if schedule[i][-1] > 0]
            results = dict(zip(active, pool.map(lambda i: run(i, k), active)))
            logger.info("round %d: %s", k, {i: results[i][0].epsilon for i in active})
            res.rounds = k + 1
            failing = []
            new = {}
            for i in ids:
                if i not in results:
                    new[i] = 0.0
                    continue
                step, law = results[i]
                res.solves += step.solves
                if law is not None:
                    res.controllers.append(law)
                if step.feasible:
                    new[i] = step.epsilon
                    res.shells.append(step.certificate)
                elif k == 0:
                    failing.append(i)
                    new[i] = schedule[i][-1]
                else:
                    res.diagnostics.append(
                        f"round {k}: subsystem {i} infeasible after a successful round 0 "
                        "(solver limitation); level kept")
                    new[i] = schedule[i][-1]
            if failing:
                for i in ids:
                    if i not in failing:
                        schedule[i].append(new[i])
                res.failing = failing
                res.failed_round = k
                res.verdict = Verdict.NOT_CERTIFIED
                res.diagnostics.append(f"round {k}: no certificate for subsystems {failing}; aborted")
                break
            prev = {i: schedule[i][-1] for i in ids}
            for i in ids:
                schedule[i].append(new[i])
                mailbox.post(EpsilonMessage(i, k + 1, new[i]))
            mailbox.barrier()
            if all(v == 0.0 for v in new.values()):
                res.verdict = Verdict.CERTIFIED_WITH_CONTROL if res.controllers else Verdict.CERTIFIED
                break
            stalled = [i for i in active if prev[i] - new[i] < eps_bar]
            if stalled:
                res.verdict = Verdict.NOT_CERTIFIED
                res.stable_only = True
                res.diagnostics.append(
                    f"round {k}: limits attained for subsystems {stalled} with nonzero levels; "
                    "only stability in the sense of Lyapunov follows")
                break
    res.wall_time = time.perf_counter() - t_start
    if res.verdict is Verdict.UNDETERMINED:
        res.diagnostics.append(f"max_rounds={max_rounds} exhausted")
    return res


def levels_from_state(certs: Mapping[int, LyapunovCertificate], x0: Sequence[float]) -> dict[int, float]:
    """``v_oi = V_i(x_i(0))``."""
    x = np.asarray(x0, dtype=float)
    return {i: float(c.V.evaluate(x)) for i, c in certs.items()}


def shell_sample_check(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    shell: ShellCertificate,
    n: int = 1000,
    seed: int = 0,
) -> dict:
    """Sample the shell and count points where V_i does not decrease."""
    rng = np.random.default_rng(seed)
    field_ = sys.local_field(shell.sid)
    if shell.controller is not None:
        field_ = [a + b for a, b in zip(field_, shell.controller.field(sys))]
    Vdot = lie_derivative(certs[shell.sid].V, field_)
    lo = shell.lower
    if lo == 0.0:
        lo = 1e-6 * shell.upper
    X = sample_region(sys, certs, shell.sid, shell.levels, lo, shell.upper, n, rng)
    vals = Vdot.evaluate_many(X)
    return {"samples": len(X), "violations": int(np.sum(vals >= 0)), "max_Vdot": float(np.max(vals))}


@dataclass
class ValidationReport:
    trajectories: int
    excluded: int
    passed: int
    converged: int
    invariance_violations: int
    recrossing_violations: int
    monotonicity_violations: int
    max_final_norm: float
    crossing_fraction: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def pass_fraction(self) -> float:
        used = self.trajectories - self.excluded
        return self.passed / used if used else 0.0

    def to_json(self) -> dict:
        return {
            "trajectories": self.trajectories,
            "excluded": self.excluded,
            "passed": self.passed,
            "pass_fraction": self.pass_fraction,
            "converged": self.converged,
            "invariance_violations": self.invariance_violations,
            "recrossing_violations": self.recrossing_violations,
            "monotonicity_violations": self.monotonicity_violations,
            "max_final_norm": self.max_final_norm,
            "crossing_fraction": dict(self.crossing_fraction),
            "warnings": list(self.warnings),
        }


def sample_initial_states(sys, certs, v0: Mapping[int, float], n: int, seed: int = 0) -> np.ndarray:
    """Random states with ``V_i(x_i) <= v0_i`` for every subsystem."""
    from .control import _sublevel_points

    rng = np.random.default_rng(seed)
    X = np.zeros((n, len(sys.varset)))
    for i in sys.ids:
        X[:, sys.state_indices(i)] = _sublevel_points(sys, certs[i], v0[i], n, rng)
    return X


def validate_schedule(
    sys: InterconnectedSystem,
    certs: Mapping[int, LyapunovCertificate],
    result: CertificationResult,
    n: int = 100,
    T: float = 100.0,
    dt: float = 0.005,
    seed: int = 0,
    converge_tol: float = 1e-3,
    level_tol: float = 1e-9,
    invariance_tol: float = 1e-6,
    X0: np.ndarray | None = None,
) -> ValidationReport:
    """Monte-Carlo check of the schedule's conclusions by simulation.

    For each trajectory from the box ``{V_i <= eps_i^0}``: V_i never exceeds
    eps_i^0; once V_i <= eps_i^{k+1} while every other neighbor is below its
    round-k level, V_i stays below eps_i^{k+1}; the state converges.
    """
    from .sim import Simulator

    if X0 is None:
        X0 = sample_initial_states(sys, certs, result.v0, n, seed)
    n = X0.shape[0]
    ids = sys.ids
    col = {i: c for c, i in enumerate(ids)}
    m = len(ids)
    sched = [result.schedule[i] for i in ids]
    K = max(len(s) for s in sched) - 1
    eps = np.zeros((K + 1, m))
    for c, s in enumerate(sched):
        for k in range(K + 1):
            eps[k, c] = s[min(k, len(s) - 1)]
    nbr = [[col[j] for j in sorted(sys.neighbors[i]) if j != i] for i in ids]
    armed = np.zeros((n, K, m), dtype=bool)
    crossed = np.zeros((n, K + 1, m), dtype=bool)
    recross = np.zeros(n, dtype=int)
    vmax = np.full((n, m), -np.inf)
    mono = np.zeros(n, dtype=int)
    state = {"prev": None}

    def monitor(step, t, X, Vv, active):
        np.maximum(vmax, Vv, out=vmax)
        if state["prev"] is not None:
            mono[:] += np.sum(Vv - state["prev"] > level_tol, axis=1)
        state["prev"] = Vv.copy()
        for k in range(K + 1):
            crossed[:, k, :] |= Vv <= eps[k][None, :] + level_tol
        for k in range(K):
            viol = armed[:, k, :] & (Vv > eps[k + 1][None, :] + level_tol)
            recross[:] += np.sum(viol, axis=1)
            for c in range(m):
                ok = Vv[:, c] <= eps[k + 1, c]
                for cj in nbr[c]:
                    ok &= Vv[:, cj] <= eps[k, cj]
                armed[:, k, c] |= ok

    sim = Simulator(sys, certs, result)
    out = sim.run(X0, T, dt, record_every=None, monitor=monitor)
    final = np.linalg.norm(out["final"], axis=1)
    diverged = out["diverged"]
    inv = np.sum(vmax > eps[0][None, :] + invariance_tol, axis=1)
    conv = (final < converge_tol) & ~diverged
    ok = conv & (inv == 0) & (recross == 0)
    report = ValidationReport(
        trajectories=n,
        excluded=int(np.sum(diverged)),
        passed=int(np.sum(ok & ~diverged)),
        converged=int(np.sum(conv)),
        invariance_violations=int(np.sum(inv)),
        recrossing_violations=int(np.sum(recross)),
        monotonicity_violations=int(np.sum(mono)),
        max_final_norm=float(np.max(final[~diverged])) if (~diverged).any() else float("nan"),
    )
    if diverged.any():
        report.warnings.append(f"{int(np.sum(diverged))} trajectories left the blow-up bound and were excluded")
    for k in range(1, K + 1):
        for c, i in enumerate(ids):
            if eps[k, c] > 0 and k < len(sched[c]):
                report.crossing_fraction[f"S{i}^{k}"] = float(np.mean(crossed[:, k, c]))
    return report
