"""Command-line driver: gen | lyap | certify | simulate | validate.

Every stage reads JSON produced by the previous one (a path or ``-`` for
stdin) and writes its own artifact to ``--out`` (``-`` or omitted: stdout).

Exit codes::

    0  Certified (or success for non-certifying commands)
    1  internal error
    2  usage error or unreadable input
    3  CertifiedWithControl
    4  NotCertified
    5  Undetermined
    6  no Lyapunov function found for some subsystem
    7  Monte-Carlo validation failed
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import certifier, lyap, sim
from .model import (
    InterconnectedSystem,
    ModelError,
    build_vdp_network,
    paper_vdp_spec,
    random_vdp_spec,
)
from .sdp import SolverOptions

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONTROL = 3
EXIT_NOT_CERTIFIED = 4
EXIT_UNDETERMINED = 5
EXIT_LYAP = 6
EXIT_VALIDATION = 7

VERDICT_EXIT = {
    certifier.Verdict.CERTIFIED: EXIT_OK,
    certifier.Verdict.CERTIFIED_WITH_CONTROL: EXIT_CONTROL,
    certifier.Verdict.NOT_CERTIFIED: EXIT_NOT_CERTIFIED,
    certifier.Verdict.UNDETERMINED: EXIT_UNDETERMINED,
}

log = logging.getLogger("veclyap")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """All knobs of a pipeline run; a JSON config file overrides flags."""

    seed: int = 0
    oscillators: int = 9
    coupling_scale: float = 1.0
    edge_prob: float = 0.3
    degree: int = 2
    beta: list[float] = field(default_factory=lambda: list(lyap.DEFAULT_BETAS))
    expand: int = 0
    eps_bar: float = certifier.EPS_BAR
    multiplier_cap: int = 4
    feas_tol: float = 1e-7
    max_iters: int | None = None
    control: bool = False
    controller_degree: int = 1
    max_rounds: int = 10
    dt: float = 0.005
    horizon: float = 100.0
    trajectories: int = 100
    out: str | None = None

    def validate(self) -> None:
        if self.eps_bar <= 0 or self.feas_tol <= 0 or self.dt <= 0 or self.horizon <= 0:
            raise UsageError("tolerances, dt and horizon must be positive")
        if not self.beta or any(b <= 0 for b in self.beta):
            raise UsageError("beta values must be positive")
        if self.degree < 2 or self.degree % 2:
            raise UsageError("Lyapunov degree must be even and >= 2")
        if self.max_rounds < 1 or self.trajectories < 1 or self.oscillators < 1:
            raise UsageError("max-rounds, trajectories and oscillators must be >= 1")
        if self.max_iters is not None and self.max_iters < 1:
            raise UsageError("max-iters must be >= 1")

    def solver_options(self) -> SolverOptions:
        kw = {"feas_tol": self.feas_tol, "gap_tol": self.feas_tol}
        if self.max_iters is not None:
            kw["max_iters"] = self.max_iters
        return SolverOptions.from_env(**kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# -- I/O helpers -------------------------------------------------------------

def _read_json(path: str | None) -> dict:
    try:
        if path in (None, "-"):
            text = sys.stdin.read()
            where = "stdin"
        else:
            with open(path) as fh:
                text = fh.read()
            where = path
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{where}: invalid JSON ({exc})") from None


def _write(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{what}: expected a comma-separated list of numbers") from None


def _load_bundle(path: str | None):
    data = _read_json(path)
    if not isinstance(data, dict):
        raise UsageError("input must be a JSON object")
    sysdata = data.get("system", data)
    system = InterconnectedSystem.from_json(sysdata)
    certs = lyap.certificates_from_json(data.get("certificates", []), system.varset)
    result = None
    if "result" in data:
        result = certifier.CertificationResult.from_json(data["result"], system.varset)
    return system, certs, result


def _need_certs(system, certs):
    missing = [i for i in system.ids if i not in certs]
    if missing:
        raise UsageError(f"no Lyapunov certificate for subsystem(s) {missing}; run `lyap` first")


# -- commands ----------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    if cfg.oscillators == 9:
        spec = paper_vdp_spec(cfg.seed, cfg.coupling_scale)
    else:
        spec = random_vdp_spec(cfg.oscillators, cfg.seed, cfg.edge_prob)
        if cfg.coupling_scale != 1.0:
            spec = dataclasses.replace(
                spec, zeta=(np.asarray(spec.zeta) * cfg.coupling_scale).tolist())
    system = build_vdp_network(spec)
    _write(cfg.out, _dump({"generator": spec.to_json(), "system": system.to_json()}))
    return EXIT_OK


def cmd_lyap(args, cfg: RunConfig) -> int:
    system, _, _ = _load_bundle(args.input)
    opts = cfg.solver_options()
    certs = {}
    failed = []
    for sid in system.ids:
        try:
            certs[sid] = lyap.certify_subsystem(system, sid, cfg.degree, cfg.beta, cfg.expand, opts)
        except lyap.LyapunovInfeasible as exc:
            failed.append(sid)
            print(f"error: subsystem S{sid}: {exc}", file=sys.stderr)
    if failed:
        return EXIT_LYAP
    _write(cfg.out, _dump(lyap.bundle_to_json(system, certs)))
    return EXIT_OK


def _levels(args, system, certs) -> dict[int, float]:
    if args.levels and args.levels_from_x0:
        raise UsageError("give either --levels or --levels-from-x0, not both")
    if args.levels_from_x0:
        x0 = np.array(_floats(args.levels_from_x0, "--levels-from-x0"))
        if x0.size != len(system.varset):
            raise UsageError(f"--levels-from-x0 needs {len(system.varset)} values, got {x0.size}")
        lv = certifier.levels_from_state(certs, x0)
        bad = [i for i, v in lv.items() if not 0 < v <= 1]
        if bad:
            raise UsageError(f"x0 lies outside the certified region of subsystem(s) {bad}")
        return lv
    vals = _floats(args.levels, "--levels") if args.levels else [1.0]
    if len(vals) == 1:
        vals = vals * len(system.ids)
    if len(vals) != len(system.ids):
        raise UsageError(f"--levels needs 1 or {len(system.ids)} values, got {len(vals)}")
    return dict(zip(system.ids, vals))


def cmd_certify(args, cfg: RunConfig) -> int:
    system, certs, _ = _load_bundle(args.input)
    _need_certs(system, certs)
    v0 = _levels(args, system, certs)
    try:
        res = certifier.certify(
            system, certs, v0, eps_bar=cfg.eps_bar, max_rounds=cfg.max_rounds,
            control=cfg.control, options=cfg.solver_options(),
            controller_degree=cfg.controller_degree,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    csv_text = res.to_csv()
    stamp = None if args.no_timestamp else _dt.datetime.now(_dt.timezone.utc).isoformat()
    bundle = lyap.bundle_to_json(system, certs)
    bundle["result"] = res.to_json()
    if stamp is not None:
        bundle["timestamp"] = stamp
    if args.csv:
        _write(args.csv, csv_text)
    if cfg.out not in (None, "-"):
        _write(cfg.out, _dump(bundle))
        if not args.csv:
            _write("-", csv_text)
    elif args.json:
        _write("-", _dump(bundle))
    else:
        _write("-", csv_text)
    if res.failing:
        print(f"{res.verdict.value}: round-{res.failed_round} infeasible for "
              + ", ".join(f"S{i}" for i in res.failing), file=sys.stderr)
    for d in res.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    return VERDICT_EXIT[res.verdict]


def cmd_simulate(args, cfg: RunConfig) -> int:
    system, certs, result = _load_bundle(args.input)
    x0 = np.array(_floats(args.x0, "--x0"))
    if x0.size != len(system.varset):
        raise UsageError(f"--x0 needs {len(system.varset)} values, got {x0.size}")
    if args.open_loop:
        result = None
    traj = sim.integrate(system, x0, T=cfg.horizon, dt=cfg.dt, certs=certs or None,
                         result=result, record_every=args.record_every)
    if cfg.out in (None, "-"):
        import io

        buf = io.StringIO()
        sim.export_traces(traj, buf)
        _write("-", buf.getvalue())
    else:
        sim.export_traces(traj, cfg.out)
    if traj.diverged:
        print("warning: trajectory left the blow-up bound", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args, cfg: RunConfig) -> int:
    system, certs, result = _load_bundle(args.input)
    _need_certs(system, certs)
    if result is None:
        raise UsageError("input carries no certification result; pass the JSON written by `certify --out`")
    if not result.certified:
        raise UsageError(f"nothing to validate: verdict is {result.verdict.value}")
    rep = certifier.validate_schedule(system, certs, result, n=cfg.trajectories,
                                      T=cfg.horizon, dt=cfg.dt, seed=cfg.seed)
    _write(cfg.out, _dump(rep.to_json()))
    if rep.pass_fraction < 1.0:
        print(f"validation failed: {rep.passed}/{rep.trajectories - rep.excluded} trajectories passed",
              file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; its keys override flags")
    common.add_argument("--out", help="output path ('-' for stdout)")
    common.add_argument("--seed", type=int)
    common.add_argument("--max-iters", type=int, help="solver iteration cap (also VECLYAP_MAX_ITERS)")
    common.add_argument("--feas-tol", type=float)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="veclyap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a Van der Pol network")
    g.add_argument("--oscillators", type=int)
    g.add_argument("--coupling-scale", type=float)
    g.add_argument("--edge-prob", type=float)

    ly = sub.add_parser("lyap", parents=[common], help="subsystem Lyapunov functions")
    ly.add_argument("input", nargs="?", default="-")
    ly.add_argument("--degree", type=int)
    ly.add_argument("--beta", type=lambda s: _floats(s, "--beta"))
    ly.add_argument("--expand", type=int, help="expanding-interior iterations")

    c = sub.add_parser("certify", parents=[common], help="run the epsilon-schedule protocol")
    c.add_argument("input", nargs="?", default="-")
    c.add_argument("--levels", help="v_o per subsystem (one value applies to all)")
    c.add_argument("--levels-from-x0", "--from-x0", dest="levels_from_x0",
                   help="initial state; v_oi = V_i(x_i(0))")
    c.add_argument("--eps-bar", type=float)
    c.add_argument("--max-rounds", type=int)
    c.add_argument("--control", action="store_true", default=None)
    c.add_argument("--controller-degree", type=int)
    c.add_argument("--csv", help="also write the schedule CSV here")
    c.add_argument("--json", action="store_true", help="print result JSON instead of CSV")
    c.add_argument("--no-timestamp", action="store_true")

    s = sub.add_parser("simulate", parents=[common], help="integrate one trajectory")
    s.add_argument("input", nargs="?", default="-")
    s.add_argument("--x0", required=True)
    s.add_argument("--dt", type=float)
    s.add_argument("--horizon", type=float)
    s.add_argument("--record-every", type=int, default=1)
    s.add_argument("--open-loop", action="store_true", help="ignore controllers in the input")

    v = sub.add_parser("validate", parents=[common], help="Monte-Carlo check of a certified schedule")
    v.add_argument("input", nargs="?", default="-")
    v.add_argument("--trajectories", type=int)
    v.add_argument("--dt", type=float)
    v.add_argument("--horizon", type=float)
    return p


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    for f in dataclasses.fields(cfg):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    if args.config:
        data = _read_json(args.config)
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        try:
            over = RunConfig.from_json({**cfg.to_json(), **data})
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from None
        cfg = over
    cfg.validate()
    return cfg


COMMANDS = {
    "gen": cmd_gen,
    "lyap": cmd_lyap,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # pragma: no cover - reported, not hidden
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
