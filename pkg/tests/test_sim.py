import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veclyap.certifier import CertificationResult, Verdict
from veclyap.control import ControlLaw
from veclyap.lyap import LyapunovCertificate
from veclyap.model import system_from_strings
from veclyap.poly import Polynomial, PolyVec
from veclyap.sim import Gate, Simulator, export_traces, integrate, integrate_many, probe_roa, read_traces


def one(f, name="x"):
    return system_from_strings([name], [{"id": 1, "states": [name], "f": [f], "g": ["0"]}])


def rotation():
    return system_from_strings(["p", "q"], [
        {"id": 1, "states": ["p", "q"], "f": ["q", "-p"], "g": ["0", "0"]}])


def vdp(mu=-1.0):
    return system_from_strings(["a", "b"], [
        {"id": 1, "states": ["a", "b"], "f": ["b", f"-a + {mu}*b*(1 - a^2)"], "g": ["0", "0"]}])


def cert(sys, text, sid=1):
    return LyapunovCertificate(sid, Polynomial.parse(text, sys.varset), 2, 1.0)


def test_harmonic_energy_conserved():
    sys = rotation()
    tr = integrate(sys, [1.0, 0.0], T=2 * np.pi, dt=2 * np.pi / 600, certs={1: cert(sys, "p^2 + q^2")})
    assert np.max(np.abs(tr.lyapunov[:, 0] - 1.0)) < 1e-8
    assert np.allclose(tr.states[-1], [1.0, 0.0], atol=1e-6)


def test_zero_stays_zero():
    tr = integrate(vdp(), [0.0, 0.0], T=5.0, dt=0.01)
    assert np.all(tr.states == 0.0) and tr.final_norm == 0.0


def test_exponential_decay_matches_closed_form():
    tr = integrate(one("-x"), [1.0], T=3.0, dt=0.01)
    assert tr.states[-1, 0] == pytest.approx(np.exp(-3.0), rel=1e-9)


def test_rk4_fourth_order():
    # error ratio for halved step tends to 2^4 = 16
    sys = one("-x + x^2")
    exact = 0.5 / (0.5 + (1 - 0.5) * np.exp(2.0))  # logistic-type closed form for x0 = 0.5
    errs = [abs(integrate(sys, [0.5], T=2.0, dt=dt).states[-1, 0] - exact) for dt in (0.1, 0.05)]
    assert 14 < errs[0] / errs[1] < 18


def test_vdp_converges_from_inside():
    tr = integrate(vdp(), [0.5, -0.5], T=30.0, dt=0.01)
    assert tr.final_norm < 1e-3 and not tr.diverged


def test_blowup_flag_and_truncation():
    tr = integrate(one("x^2"), [1.0], T=5.0, dt=0.01, blowup=1e3)
    assert tr.diverged
    assert np.all(np.abs(tr.states) <= 1e3)
    assert tr.times[-1] < 1.1  # the exact solution explodes at t = 1


def test_dimension_checked():
    with pytest.raises(ValueError):
        Simulator(vdp()).run(np.zeros((1, 3)), T=1.0)


def test_bad_step():
    with pytest.raises(ValueError):
        Simulator(vdp()).run(np.zeros((1, 2)), T=1.0, dt=0.0)


def test_batch_matches_single():
    sys = vdp()
    X0 = np.array([[0.3, 0.1], [-0.2, 0.4]])
    many = integrate_many(sys, X0, T=2.0, dt=0.01, record_every=1)
    for x0, tr in zip(X0, many):
        single = integrate(sys, x0, T=2.0, dt=0.01)
        assert np.array_equal(tr.states, single.states)


def test_monotonicity_counter():
    sys = rotation()
    tr = integrate(sys, [0.0, 1.0], T=1.0, dt=0.1, certs={1: cert(sys, "p^2")})
    assert tr.monotonicity_violations() > 0
    tr = integrate(vdp(), [0.5, 0.0], T=1.0, dt=0.1, certs={1: cert(vdp(), "a^2 + b^2")})
    assert tr.monotonicity_violations() == 0


class TestGating:
    def system(self):
        return system_from_strings(["x"], [
            {"id": 1, "states": ["x"], "f": ["x"], "g": ["0"], "input_channels": ["x"]}])

    def result(self, sys):
        law = ControlLaw(1, 0, PolyVec([Polynomial.parse("-2*x", sys.varset)]), 1)
        return CertificationResult(Verdict.CERTIFIED_WITH_CONTROL, {1: [1.0, 0.0]}, {1: 1.0}, 1e-3,
                                   controllers=[law])

    def test_controller_active_inside_shell(self):
        sys = self.system()
        certs = {1: cert(sys, "x^2")}
        tr = integrate(sys, [0.8], T=10.0, dt=0.01, certs=certs, result=self.result(sys))
        assert tr.final_norm < 1e-3
        assert tr.monotonicity_violations() == 0
        assert all(a == {(1, 0)} for a in tr.control_activity()[:-1])

    def test_no_control_outside_shell(self):
        sys = self.system()
        certs = {1: cert(sys, "x^2")}
        tr = integrate(sys, [1.2], T=0.5, dt=0.01, certs=certs, result=self.result(sys))
        assert tr.active.max() == -1
        assert tr.states[-1, 0] > 1.2

    def test_gate_needs_certificates(self):
        sys = self.system()
        with pytest.raises(ValueError):
            Simulator(sys, None, self.result(sys))

    def test_hysteresis_keeps_current_round(self):
        sys = self.system()
        g = Gate(sys, self.result(sys), hysteresis=1e-3)
        V = np.array([[1.0005]])
        assert g.select(V, np.array([[-1]]))[0, 0] == -1
        assert g.select(V, np.array([[0]]))[0, 0] == 0


class TestProbe:
    def test_one_dimensional(self):
        sys = one("-x + x^3")
        probe = probe_roa(sys, 1, lo=-2, hi=2, cells=41, T=20.0, dt=0.01)
        conv = probe.converged[0]
        # region of attraction is (-1, 1)
        assert np.all(conv[np.abs(probe.xs) < 0.95])
        assert not np.any(conv[np.abs(probe.xs) > 1.05])

    def test_vdp_stable_core(self):
        probe = probe_roa(vdp(), 1, lo=-3, hi=3, cells=31, T=40.0, dt=0.02)
        X, Y = np.meshgrid(probe.xs, probe.ys)
        assert np.all(probe.converged[X ** 2 + Y ** 2 < 1.0])
        assert not probe.converged.all()

    def test_three_states_rejected(self):
        sys = system_from_strings(["a", "b", "c"], [
            {"id": 1, "states": ["a", "b", "c"], "f": ["-a", "-b", "-c"], "g": ["0", "0", "0"]}])
        with pytest.raises(ValueError):
            probe_roa(sys, 1)


class TestTraces:
    def test_round_trip(self, tmp_path):
        sys = vdp()
        tr = integrate(sys, [0.3, 0.2], T=0.1, dt=0.01, certs={1: cert(sys, "a^2 + b^2")})
        path = tmp_path / "t.csv"
        export_traces(tr, path)
        header, data = read_traces(path)
        assert header == ["time", "a", "b", "V1"]
        assert np.array_equal(data[:, 1:3], tr.states)
        assert np.array_equal(data[:, 0], tr.times)

    def test_stream_output(self):
        tr = integrate(one("-x"), [1.0], T=0.02, dt=0.01)
        buf = io.StringIO()
        export_traces(tr, buf)
        assert buf.getvalue().splitlines()[0] == "time,x"
        assert len(buf.getvalue().splitlines()) == 4

    def test_header_only(self, tmp_path):
        tr = integrate(one("-x"), [1.0], T=0.0, dt=0.01)
        path = tmp_path / "t.csv"
        export_traces(tr, path)
        _, data = read_traces(path)
        assert data.shape == (1, 2)
        path.write_text("time,x\n")
        header, data = read_traces(path)
        assert header == ["time", "x"] and data.shape == (0, 2)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(ValueError):
            read_traces(path)


# -- properties ---------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0))
def test_linear_decay_property(a, x0):
    tr = integrate(one(f"{-a!r}*x"), [x0], T=1.0, dt=0.01)
    assert tr.states[-1, 0] == pytest.approx(x0 * np.exp(-a), rel=1e-7, abs=1e-12)
    assert np.all(np.diff(np.abs(tr.states[:, 0])) <= 0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_energy_never_increases_for_damped_vdp(a, b):
    # V' = -2 b^2 (1 - a^2) <= 0 while |a| < 1; trajectories from the disk stay there
    sys = vdp()
    tr = integrate(sys, [a, b], T=5.0, dt=0.01, certs={1: cert(sys, "a^2 + b^2")})
    assert tr.monotonicity_violations(1e-12) == 0
