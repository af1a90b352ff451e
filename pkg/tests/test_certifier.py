import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veclyap import certifier
from veclyap.certifier import (
    CertificationResult,
    EpsilonMessage,
    Mailbox,
    Verdict,
    certify,
    levels_from_state,
    min_next_epsilon,
    shell_sample_check,
    validate_schedule,
)
from veclyap.lyap import LyapunovCertificate
from veclyap.model import decoupled_linear_system, system_from_strings
from veclyap.poly import Polynomial

EPS_BAR = 1e-3


def squares(sys):
    """V_i = sum of own squares, exact for the linear examples below."""
    out = {}
    for i in sys.ids:
        V = Polynomial.zero(sys.varset)
        for name in sys.subsystem(i).states:
            V = V + Polynomial.parse(f"{name}^2", sys.varset)
        out[i] = LyapunovCertificate(i, V, 2, 1.0)
    return out


def pair(c=0.5):
    # x1' = -x1 + c x2, x2' = -x2 + c x1 with V_i = x_i^2
    return system_from_strings(["x1", "x2"], [
        {"id": 1, "states": ["x1"], "f": ["-x1"], "g": [f"{c!r}*x2"]},
        {"id": 2, "states": ["x2"], "f": ["-x2"], "g": [f"{c!r}*x1"]},
    ])


@pytest.fixture(scope="module")
def decoupled():
    sys = decoupled_linear_system((1.0, 2.0))
    certs = squares(sys)
    return sys, certs, certify(sys, certs, {1: 1.0, 2: 1.0})


@pytest.fixture(scope="module")
def pair_run():
    sys = pair()
    certs = squares(sys)
    return sys, certs, certify(sys, certs, {1: 1.0, 2: 1.0}, max_rounds=3)


class TestDecoupled:
    def test_certified_in_one_round(self, decoupled):
        _, _, res = decoupled
        assert res.verdict is Verdict.CERTIFIED
        assert res.schedule == {1: [1.0, 0.0], 2: [1.0, 0.0]}
        assert res.rounds == 1

    def test_csv(self, decoupled):
        _, _, res = decoupled
        assert res.to_csv() == "k,S1,S2\n0,1.000000,1.000000\n1,0.000000,0.000000\n"

    def test_simulations_converge(self, decoupled):
        sys, certs, res = decoupled
        rep = validate_schedule(sys, certs, res, n=100, T=20.0, dt=0.01)
        assert rep.pass_fraction == 1.0 and rep.excluded == 0
        assert rep.invariance_violations == 0 and rep.recrossing_violations == 0

    def test_shells_sample_clean(self, decoupled):
        sys, certs, res = decoupled
        for sh in res.shells:
            assert shell_sample_check(sys, certs, sh)["violations"] == 0


class TestPairSchedule:
    """Analytic oracle: on x1^2 >= eps with x2^2 <= e, -2 x1^2 + 2 c x1 x2 < 0
    exactly when eps > c^2 e; with c = 1/2 each round divides the level by four."""

    def test_quartering(self, pair_run):
        _, _, res = pair_run
        for i in (1, 2):
            s = res.schedule[i]
            assert len(s) == 4
            for k in range(1, 4):
                expect = 0.25 ** k
                # bisection resolution eps_bar / 4 plus margin-scale slack
                assert expect - 1e-6 <= s[k] <= expect + EPS_BAR / 4 + 1e-6

    def test_round_cap_is_undetermined(self, pair_run):
        _, _, res = pair_run
        assert res.verdict is Verdict.UNDETERMINED
        assert any("max_rounds" in d for d in res.diagnostics)

    def test_shells_sample_clean(self, pair_run):
        sys, certs, res = pair_run
        assert res.shells
        for sh in res.shells:
            assert shell_sample_check(sys, certs, sh)["violations"] == 0

    def test_schedule_validated_by_simulation(self, pair_run):
        sys, certs, res = pair_run
        rep = validate_schedule(sys, certs, res, n=50, T=20.0, dt=0.01)
        assert rep.recrossing_violations == 0 and rep.invariance_violations == 0
        assert rep.pass_fraction == 1.0


def test_weak_coupling_certifies_at_once():
    sys = pair(0.02)
    res = certify(sys, squares(sys), {1: 1.0, 2: 1.0})
    # eps_i^1 > 0.02^2 is required, within one bisection cell of zero
    assert 4e-4 - 1e-6 <= res.schedule[1][1] <= 4e-4 + EPS_BAR / 4 + 1e-6


def test_unstable_subsystem_fails_round_zero():
    sys = system_from_strings(["x1", "x2"], [
        {"id": 1, "states": ["x1"], "f": ["x1"], "g": ["0"]},
        {"id": 2, "states": ["x2"], "f": ["-x2"], "g": ["0"]},
    ])
    res = certify(sys, squares(sys), {1: 1.0, 2: 1.0})
    assert res.verdict is Verdict.NOT_CERTIFIED
    assert res.failing == [1] and res.failed_round == 0
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[2] == ["1", certifier.FAIL, "0.000000"]


def test_unstable_subsystem_recovered_with_control():
    sys = system_from_strings(["x1", "x2"], [
        {"id": 1, "states": ["x1"], "f": ["x1"], "g": ["0"], "input_channels": ["x1"]},
        {"id": 2, "states": ["x2"], "f": ["-x2"], "g": ["0"]},
    ])
    res = certify(sys, squares(sys), {1: 1.0, 2: 1.0}, control=True)
    assert res.verdict is Verdict.CERTIFIED_WITH_CONTROL
    assert [c.sid for c in res.controllers] == [1]
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[2][1].endswith("*") and not rows[2][2].endswith("*")


def test_min_next_epsilon_zero_first():
    sys = decoupled_linear_system((1.0,))
    step = min_next_epsilon(sys, squares(sys), 1, {1: 1.0})
    assert step.epsilon == 0.0 and step.solves == 1


def test_bad_levels_rejected(decoupled):
    sys, certs, _ = decoupled
    with pytest.raises(ValueError):
        certify(sys, certs, {1: 1.5, 2: 1.0})
    with pytest.raises(ValueError):
        certify(sys, certs, {1: 1.0})
    with pytest.raises(ValueError):
        certify(sys, certs, {1: 1.0, 2: 1.0}, eps_bar=0)


def test_levels_from_state():
    sys = pair()
    assert levels_from_state(squares(sys), [0.5, -0.2]) == pytest.approx({1: 0.25, 2: 0.04})


def test_json_round_trip(pair_run):
    sys, _, res = pair_run
    data = json.loads(json.dumps(res.to_json(timestamp="t")))
    back = CertificationResult.from_json(data, sys.varset)
    assert back.schedule == res.schedule and back.verdict is res.verdict
    assert back.to_csv() == res.to_csv()
    assert len(back.shells) == len(res.shells)


def test_repeat_runs_identical(pair_run):
    sys, certs, res = pair_run
    again = certify(sys, certs, {1: 1.0, 2: 1.0}, max_rounds=3)
    assert again.to_csv() == res.to_csv()


def test_validation_of_a_wrong_schedule_reports_recrossings(pair_run):
    # claim a level far below what the coupling allows
    sys, certs, res = pair_run
    fake = CertificationResult(Verdict.CERTIFIED, {1: [1.0, 1e-3, 0.0], 2: [1.0, 1e-3, 0.0]},
                               {1: 1.0, 2: 1.0}, EPS_BAR)
    X0 = np.array([[0.01, 0.9]])  # V1 below the claimed level, then pushed out
    rep = validate_schedule(sys, certs, fake, X0=X0, T=5.0, dt=0.01)
    assert rep.recrossing_violations > 0 and rep.pass_fraction == 0.0


class TestMailbox:
    def chain(self):
        return system_from_strings(["a", "b", "c"], [
            {"id": 1, "states": ["a"], "f": ["-a"], "g": ["0"]},
            {"id": 2, "states": ["b"], "f": ["-b"], "g": ["0.1*a"]},
            {"id": 3, "states": ["c"], "f": ["-c"], "g": ["0.1*b"]},
        ])

    def test_delivery_follows_neighbor_sets(self):
        box = Mailbox(self.chain())
        for i, v in [(1, 0.5), (2, 0.6), (3, 0.7)]:
            box.post(EpsilonMessage(i, 0, v))
        assert box.view(2, 0) == {}  # nothing readable before the barrier
        box.barrier()
        assert box.view(1, 0) == {1: 0.5}
        assert box.view(2, 0) == {1: 0.5, 2: 0.6}
        assert box.view(3, 0) == {2: 0.6, 3: 0.7}

    def test_stale_round_detected(self):
        box = Mailbox(self.chain())
        for i in (1, 2, 3):
            box.post(EpsilonMessage(i, 0, 1.0))
        box.barrier()
        box.post(EpsilonMessage(2, 1, 0.1))
        box.post(EpsilonMessage(3, 1, 0.1))
        box.barrier()
        with pytest.raises(RuntimeError, match="missing round-1"):
            box.view(2, 1)


# -- properties ---------------------------------------------------------------

@settings(max_examples=6, deadline=None)
@given(st.floats(0.05, 0.95))
def test_pair_first_step_matches_oracle(c):
    # first level must exceed c^2 times the neighbor level 1
    sys = pair(c)
    step = min_next_epsilon(sys, squares(sys), 1, {1: 1.0, 2: 1.0})
    bound = c * c
    assert step.feasible
    assert bound - 1e-6 <= step.epsilon <= bound + EPS_BAR / 4 + 1e-6
    assert shell_sample_check(sys, squares(sys), step.certificate)["violations"] == 0


@settings(max_examples=5, deadline=None)
@given(st.lists(st.floats(0.5, 3.0), min_size=1, max_size=4), st.floats(0.1, 1.0))
def test_decoupled_always_certified(rates, v):
    sys = decoupled_linear_system(tuple(rates))
    res = certify(sys, squares(sys), {i: v for i in sys.ids})
    assert res.verdict is Verdict.CERTIFIED
    assert all(s == [v, 0.0] for s in res.schedule.values())
