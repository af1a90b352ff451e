"""Interconnected polynomial systems and the Van der Pol network generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .poly import Polynomial, PolyVec, VarSet


class ModelError(ValueError):
    """Raised for malformed systems and system files."""


@dataclass(frozen=True)
class Subsystem:
    id: int
    states: tuple[str, ...]
    f: PolyVec
    g: PolyVec
    input_channels: tuple[int, ...] = ()  # local indices into ``states``

    @property
    def dim(self) -> int:
        return len(self.states)

    def channel_names(self) -> list[str]:
        return [self.states[c] for c in self.input_channels]


class InterconnectedSystem:
    """Subsystems ``dx_i = f_i(x_i) + g_i(x)`` over one global VarSet."""

    def __init__(self, varset: VarSet, subsystems: Sequence[Subsystem]):
        self.varset = varset
        self.subsystems = tuple(subsystems)
        self._by_id = {s.id: s for s in self.subsystems}
        self._validate()
        self._owner = {v: s.id for s in self.subsystems for v in s.states}
        self.neighbors = neighbor_closure(self)

    def _validate(self) -> None:
        if len(self._by_id) != len(self.subsystems):
            raise ModelError("duplicate subsystem ids")
        seen: dict[str, int] = {}
        for s in self.subsystems:
            if not s.states:
                raise ModelError(f"subsystem {s.id} has no states")
            for v in s.states:
                if v not in self.varset:
                    raise ModelError(f"subsystem {s.id}: unknown variable {v!r}")
                if v in seen:
                    raise ModelError(
                        f"overlapping decomposition: {v} belongs to subsystems {seen[v]} and {s.id}")
                seen[v] = s.id
            if len(s.f) != s.dim or len(s.g) != s.dim:
                raise ModelError(f"subsystem {s.id}: f and g need one entry per state")
            own = {self.varset.position(v) for v in s.states}
            for name, vec in (("f", s.f), ("g", s.g)):
                for p in vec:
                    if p.varset != self.varset:
                        raise ModelError(f"subsystem {s.id}: {name} uses a foreign variable set")
                    if p.constant_term() != 0.0:
                        raise ModelError(
                            f"subsystem {s.id}: {name} has a constant term (equilibrium not at origin)")
            for p in s.f:
                extra = p.variables() - own
                if extra:
                    names = sorted(self.varset.names[i] for i in extra)
                    raise ModelError(f"subsystem {s.id}: f depends on non-local variables {names}")
            for c in s.input_channels:
                if not 0 <= c < s.dim:
                    raise ModelError(f"subsystem {s.id}: input channel {c} out of range")
        missing = [v for v in self.varset if v not in seen]
        if missing:
            raise ModelError(f"variables not assigned to any subsystem: {missing}")

    # lookup ------------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.subsystems)

    def __iter__(self):
        return iter(self.subsystems)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.subsystems]

    def subsystem(self, sid: int) -> Subsystem:
        try:
            return self._by_id[sid]
        except KeyError:
            raise ModelError(f"no subsystem with id {sid}") from None

    def owner(self, var: str) -> int:
        return self._owner[var]

    def state_indices(self, sid: int) -> list[int]:
        return [self.varset.position(v) for v in self.subsystem(sid).states]

    def neighborhood_indices(self, sid: int) -> list[int]:
        out = []
        for j in sorted(self.neighbors[sid]):
            out.extend(self.state_indices(j))
        return sorted(out)

    def reverse_neighbors(self, sid: int) -> set[int]:
        """Subsystems whose neighbor set contains ``sid``."""
        return {j for j, nb in self.neighbors.items() if sid in nb}

    # dynamics -------------------------------------------------------------------
    def embed(self, sid: int, vec: Sequence[Polynomial]) -> list[Polynomial]:
        """Full-length field that is ``vec`` on subsystem ``sid`` and zero elsewhere."""
        out = [Polynomial.zero(self.varset)] * len(self.varset)
        for k, i in enumerate(self.state_indices(sid)):
            out[i] = vec[k]
        return out

    def local_field(self, sid: int, with_interaction: bool = True) -> list[Polynomial]:
        s = self.subsystem(sid)
        vec = [a + b for a, b in zip(s.f, s.g)] if with_interaction else list(s.f)
        return self.embed(sid, vec)

    def dynamics(self) -> PolyVec:
        out = [Polynomial.zero(self.varset)] * len(self.varset)
        for s in self.subsystems:
            for k, i in enumerate(self.state_indices(s.id)):
                out[i] = s.f[k] + s.g[k]
        return PolyVec(out)

    def restrict(self, sid: int) -> "InterconnectedSystem":
        """Isolated subsystem ``dx = f_i(x_i)`` over its own variables."""
        s = self.subsystem(sid)
        vs = VarSet(s.states)
        f = PolyVec(Polynomial.parse(p.render(), vs) for p in s.f)
        z = PolyVec(Polynomial.zero(vs) for _ in s.states)
        return InterconnectedSystem(vs, [Subsystem(s.id, s.states, f, z, s.input_channels)])

    # serialization ----------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "variables": list(self.varset.names),
            "subsystems": [
                {
                    "id": s.id,
                    "states": list(s.states),
                    "f": s.f.render(),
                    "g": s.g.render(),
                    "input_channels": s.channel_names(),
                }
                for s in self.subsystems
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "InterconnectedSystem":
        try:
            vs = VarSet(data["variables"])
            subs = []
            for d in data["subsystems"]:
                states = tuple(d["states"])
                f = PolyVec(Polynomial.parse(t, vs) for t in d["f"])
                g = PolyVec(Polynomial.parse(t, vs) for t in d.get("g", ["0"] * len(states)))
                chans = []
                for c in d.get("input_channels", []):
                    if isinstance(c, str):
                        if c not in states:
                            raise ModelError(f"subsystem {d['id']}: input channel {c!r} is not a state")
                        chans.append(states.index(c))
                    else:
                        chans.append(int(c))
                subs.append(Subsystem(int(d["id"]), states, f, g, tuple(chans)))
        except ModelError:
            raise
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed system description: missing or bad field {exc}") from None
        except ValueError as exc:
            raise ModelError(f"malformed system description: {exc}") from None
        return cls(vs, subs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InterconnectedSystem):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None


def neighbor_closure(sys: InterconnectedSystem) -> dict[int, frozenset[int]]:
    """``N_i``: i itself plus every subsystem whose variables occur in ``g_i``."""
    owner = {v: s.id for s in sys.subsystems for v in s.states}
    out = {}
    for s in sys.subsystems:
        nb = {s.id}
        for p in s.g:
            for i in p.variables():
                nb.add(owner[sys.varset.names[i]])
        out[s.id] = frozenset(nb)
    return out


def save_system(sys: InterconnectedSystem, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sys.to_json(), indent=2) + "\n")


def load_system(path: str | Path) -> InterconnectedSystem:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and "system" in data and "subsystems" not in data:
        data = data["system"]
    return InterconnectedSystem.from_json(data)


# -- Van der Pol networks ----------------------------------------------------------

# Directed coupling structure of the nine-oscillator benchmark: oscillator j is
# driven by the listed oscillators k (zeta_jk != 0).  Chosen to be consistent
# with the published neighbor table of the seven-subsystem grouping.
PAPER_EDGES: dict[int, tuple[int, ...]] = {
    1: (2, 7, 9),
    2: (1, 3),
    3: (1, 2, 4, 8),
    4: (3, 5),
    5: (4,),
    6: (9,),
    7: (1, 8, 9),
    8: (3, 7),
    9: (1, 6, 7),
}
PAPER_GROUPING: tuple[tuple[int, ...], ...] = ((1,), (2, 3), (4,), (5, 6), (7,), (8,), (9,))
# Values readable from the printed dynamics of the second subsystem.
PAPER_MU = {2: -0.41, 3: -1.44}
PAPER_ZETA = {(2, 3): 0.12, (3, 2): 0.04, (2, 1): -0.07, (3, 1): 0.01, (3, 4): 0.06, (3, 8): 0.1}


@dataclass
class VdpNetworkSpec:
    """Oscillator count, damping, directed couplings and grouping (1-based)."""

    n: int
    mu: list[float]
    zeta: list[list[float]]
    grouping: list[list[int]]
    seed: int | None = None
    input_channels: str = "second"  # "second" | "all"

    def validate(self) -> None:
        if len(self.mu) != self.n:
            raise ModelError("mu needs one entry per oscillator")
        for j, m in enumerate(self.mu, 1):
            if not -2.0 < m < 0.0:
                raise ModelError(f"mu_{j} = {m} outside (-2, 0)")
        Z = np.asarray(self.zeta, dtype=float)
        if Z.shape != (self.n, self.n):
            raise ModelError("zeta must be n x n")
        if np.any(np.diag(Z) != 0):
            raise ModelError("zeta diagonal must be zero")
        if np.any(np.abs(Z) >= 0.2):
            raise ModelError("coupling strengths must lie in (-0.2, 0.2)")
        flat = sorted(j for grp in self.grouping for j in grp)
        if flat != list(range(1, self.n + 1)):
            raise ModelError("grouping is not a partition of the oscillators")
        if self.input_channels not in ("second", "all"):
            raise ModelError("input_channels must be 'second' or 'all'")

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "mu": list(self.mu),
            "zeta": [list(r) for r in self.zeta],
            "grouping": [list(g) for g in self.grouping],
            "seed": self.seed,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VdpNetworkSpec":
        return cls(int(d["n"]), [float(m) for m in d["mu"]], [[float(z) for z in r] for r in d["zeta"]],
                   [[int(j) for j in g] for g in d["grouping"]], d.get("seed"),
                   d.get("input_channels", "second"))


def state_name(j: int, k: int, n: int) -> str:
    return f"x{j}{k}" if n < 10 else f"x{j}_{k}"


def paper_vdp_spec(seed: int = 0, coupling_scale: float = 1.0) -> VdpNetworkSpec:
    """The nine-oscillator, seven-subsystem benchmark.

    Damping and couplings of oscillators 2 and 3 are the published ones; the
    remaining values are drawn from ``seed``.  ``coupling_scale`` multiplies
    every drawn coupling (handy for building hard instances) and is clipped so
    the strengths stay inside (-0.2, 0.2).
    """
    rng = np.random.default_rng(seed)
    n = 9
    mu = [float(rng.uniform(-2.0, 0.0)) for _ in range(n)]
    mu = [m if m < 0 else -1e-3 for m in mu]
    Z = np.zeros((n, n))
    for j in range(1, n + 1):
        for k in PAPER_EDGES[j]:
            Z[j - 1, k - 1] = rng.uniform(-0.2, 0.2)
    for j, m in PAPER_MU.items():
        mu[j - 1] = m
    for (j, k), z in PAPER_ZETA.items():
        Z[j - 1, k - 1] = z
    Z = np.clip(Z * coupling_scale, -0.199, 0.199)
    return VdpNetworkSpec(n, mu, Z.tolist(), [list(g) for g in PAPER_GROUPING], seed)


def random_vdp_spec(n: int, seed: int = 0, edge_prob: float = 0.3,
                    grouping: Sequence[Sequence[int]] | None = None) -> VdpNetworkSpec:
    """Random directed network; singleton grouping unless one is given."""
    if n == 9 and grouping is None:
        return paper_vdp_spec(seed)
    rng = np.random.default_rng(seed)
    mu = [float(rng.uniform(-2.0, 0.0)) for _ in range(n)]
    mu = [m if m < 0 else -1e-3 for m in mu]
    Z = np.zeros((n, n))
    for j in range(n):
        for k in range(n):
            if j != k and rng.random() < edge_prob:
                Z[j, k] = rng.uniform(-0.2, 0.2)
    grp = [list(g) for g in grouping] if grouping else [[j] for j in range(1, n + 1)]
    return VdpNetworkSpec(n, mu, Z.tolist(), grp, seed)


def build_vdp_network(spec: VdpNetworkSpec) -> InterconnectedSystem:
    """``dx_j1 = x_j2``, ``dx_j2 = mu_j x_j2 (1 - x_j1^2) - x_j1 + x_j1 sum_k zeta_jk x_k2``.

    Couplings between oscillators of the same subsystem belong to f, the rest
    to g.
    """
    spec.validate()
    n = spec.n
    names = [state_name(j, k, n) for j in range(1, n + 1) for k in (1, 2)]
    vs = VarSet(names)
    X = {(j, k): vs.var(state_name(j, k, n)) for j in range(1, n + 1) for k in (1, 2)}
    group_of = {j: gi for gi, grp in enumerate(spec.grouping) for j in grp}
    subs = []
    for gi, grp in enumerate(spec.grouping):
        states, f, g, chans = [], [], [], []
        for j in grp:
            x1, x2 = X[j, 1], X[j, 2]
            inner = Polynomial.zero(vs)
            outer = Polynomial.zero(vs)
            for k in range(1, n + 1):
                z = spec.zeta[j - 1][k - 1]
                if z == 0.0:
                    continue
                term = x1 * X[k, 2] * z
                if group_of[k] == gi:
                    inner = inner + term
                else:
                    outer = outer + term
            mu = spec.mu[j - 1]
            states += [state_name(j, 1, n), state_name(j, 2, n)]
            f += [x2, inner - x1 + x2 * (1 - x1 * x1) * mu]
            g += [Polynomial.zero(vs), outer]
            base = len(states) - 2
            chans += [base + 1] if spec.input_channels == "second" else [base, base + 1]
        subs.append(Subsystem(gi + 1, tuple(states), PolyVec(f), PolyVec(g), tuple(chans)))
    return InterconnectedSystem(vs, subs)


def decoupled_linear_system(rates: Iterable[float] = (1.0, 1.0)) -> InterconnectedSystem:
    """Scalar subsystems ``dx_i = -a_i x_i`` with no interaction."""
    rates = list(rates)
    names = [f"x{i}" for i in range(1, len(rates) + 1)]
    vs = VarSet(names)
    subs = []
    for i, a in enumerate(rates, 1):
        x = vs.var(f"x{i}")
        subs.append(Subsystem(i, (f"x{i}",), PolyVec([x * (-a)]), PolyVec([Polynomial.zero(vs)]), (0,)))
    return InterconnectedSystem(vs, subs)


def system_from_strings(variables: Sequence[str], subsystems: Sequence[dict]) -> InterconnectedSystem:
    """Convenience wrapper around :meth:`InterconnectedSystem.from_json`."""
    return InterconnectedSystem.from_json({"variables": list(variables), "subsystems": list(subsystems)})
