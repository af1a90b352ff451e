import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veclyap import sdp
from veclyap.sdp import SdpProblem, SolverOptions, Status, check_solution, solve

OPTS = SolverOptions()


def trace_one():
    p = SdpProblem([1])
    p.add_constraint([(0, 0, 0, 1.0)], 1.0)
    p.set_objective([(0, 0, 0, 1.0)])
    return p


def schur_2x2(p11=1.0, p12=2.0):
    # min X22 s.t. X11 = p11, X12 = p12  ->  X22 = p12^2 / p11
    p = SdpProblem([2])
    p.add_constraint([(0, 0, 0, 1.0)], p11)
    p.add_constraint([(0, 0, 1, 1.0)], p12)
    p.set_objective([(0, 1, 1, 1.0)])
    return p


class TestExamples:
    def test_scalar_trace(self):
        sol = solve(trace_one(), OPTS)
        assert sol.status is Status.OPTIMAL
        assert abs(sol.objective_value - 1) < 1e-6
        assert abs(sol.block_values[0][0, 0] - 1) < 1e-6

    def test_negative_scalar_infeasible(self):
        p = SdpProblem([1])
        p.add_constraint([(0, 0, 0, 1.0)], -1.0)
        assert solve(p, OPTS).status is Status.INFEASIBLE

    def test_schur_forced(self):
        sol = solve(schur_2x2(), OPTS)
        assert sol.status is Status.OPTIMAL
        assert abs(sol.block_values[0][1, 1] - 4.0) < 1e-5

    def test_nan_rejected(self):
        p = SdpProblem([1])
        p.add_constraint([(0, 0, 0, float("nan"))], 1.0)
        with pytest.raises(ValueError):
            solve(p, OPTS)

    def test_free_variable(self):
        # X11 - y = 0, y = 3, min X11
        p = SdpProblem([1], n_free=1)
        p.add_constraint([(0, 0, 0, 1.0)], 0.0, free=[(0, -1.0)])
        p.add_constraint([], 3.0, free=[(0, 1.0)])
        p.set_objective([(0, 0, 0, 1.0)])
        sol = solve(p, OPTS)
        assert sol.status.ok
        assert abs(sol.free_values[0] - 3) < 1e-5

    def test_iteration_cap_is_undetermined(self):
        sol = solve(schur_2x2(1.0, 7.0), SolverOptions(max_iters=3, check_every=1))
        assert sol.status is Status.MAX_ITERATIONS

    def test_search_options_cap(self):
        o = SolverOptions(max_iters=100_000, search_iters=500)
        assert o.for_search().max_iters == 500
        assert SolverOptions(max_iters=100).for_search().max_iters == 100

    def test_env_iteration_cap(self, monkeypatch):
        monkeypatch.setenv(sdp.MAX_ITERS_ENV, "1234")
        assert SolverOptions.from_env().max_iters == 1234

    def test_bad_options(self):
        with pytest.raises(ValueError):
            SolverOptions(feas_tol=0)


class TestCheckSolution:
    def test_hand_built_feasible(self):
        rep = check_solution(schur_2x2(), [np.array([[1.0, 2.0], [2.0, 4.0]])])
        assert rep.max_violation <= 1e-12
        assert rep.eigen_floor >= -1e-12
        assert rep.objective == pytest.approx(4.0)

    def test_reports_violation(self):
        rep = check_solution(trace_one(), [np.array([[1.001]])])
        assert rep.max_violation == pytest.approx(1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            check_solution(trace_one(), [np.eye(2)])

    def test_random_feasible_instance(self):
        rng = np.random.default_rng(5)
        p, X0 = _random_feasible(rng, [3, 2], 6)
        sol = solve(p, OPTS)
        assert sol.status.ok
        rep = check_solution(p, sol)
        scale = 1 + max(abs(v) for v in p.rhs)
        assert rep.max_violation <= OPTS.feas_tol * scale
        assert rep.eigen_floor >= -OPTS.feas_tol * scale


def _random_feasible(rng, blocks, m):
    """Constraints from a sampled PSD point, so the problem is feasible."""
    p = SdpProblem(blocks)
    X0 = []
    for d in blocks:
        G = rng.normal(size=(d, d))
        X0.append(G @ G.T)
    for _ in range(m):
        entries, rhs = [], 0.0
        for b, d in enumerate(blocks):
            for i in range(d):
                for j in range(i, d):
                    if rng.random() < 0.5:
                        v = float(rng.normal())
                        entries.append((b, i, j, v))
                        rhs += v * X0[b][i, j]
        p.add_constraint(entries, rhs)
    return p, X0


def test_dump_load_round_trip():
    p = schur_2x2(2.0, -1.5)
    q = sdp.load_problem(sdp.dump_problem(p))
    A1, b1, c1 = p.matrices()
    A2, b2, c2 = q.matrices()
    assert q.blocks == p.blocks
    assert np.allclose(A1.toarray(), A2.toarray()) and np.allclose(b1, b2) and np.allclose(c1, c2)


def test_cvxopt_backend_agrees():
    pytest.importorskip("cvxopt")
    p = schur_2x2(2.0, 3.0)
    a = solve(p, OPTS)
    b = solve(p, OPTS, sdp.CvxoptBackend())
    assert b.status.ok
    assert abs(a.objective_value - b.objective_value) < 1e-5


# -- analytic oracle instances -----------------------------------------------

def analytic_instances(n=50, seed=20240):
    """1x1 and 2x2 problems whose optimum follows from the Schur complement."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        kind = k % 4
        if kind == 0:
            # min c x, a x = b, x >= 0
            a, b, c = rng.uniform(0.5, 3), rng.uniform(0.1, 3), rng.uniform(-2, 2)
            p = SdpProblem([1])
            p.add_constraint([(0, 0, 0, a)], b)
            p.set_objective([(0, 0, 0, c)])
            out.append((p, c * b / a))
        elif kind == 1:
            # min w X22, X11 = p, X12 = q  ->  w q^2 / p
            p11, q, w = rng.uniform(0.5, 3), rng.uniform(-2, 2), rng.uniform(0.5, 2)
            p = SdpProblem([2])
            p.add_constraint([(0, 0, 0, 1.0)], p11)
            p.add_constraint([(0, 0, 1, 1.0)], q)
            p.set_objective([(0, 1, 1, w)])
            out.append((p, w * q * q / p11))
        elif kind == 2:
            # min 2c X12 with unit diagonal  ->  -2|c|
            c = rng.uniform(-2, 2)
            p = SdpProblem([2])
            p.add_constraint([(0, 0, 0, 1.0)], 1.0)
            p.add_constraint([(0, 1, 1, 1.0)], 1.0)
            p.set_objective([(0, 0, 1, 2 * c)])
            out.append((p, -2 * abs(c)))
        else:
            # min a X11 + b X22, X12 = q  ->  2 sqrt(ab) |q|
            a, b, q = rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(-2, 2)
            p = SdpProblem([2])
            p.add_constraint([(0, 0, 1, 1.0)], q)
            p.set_objective([(0, 0, 0, a), (0, 1, 1, b)])
            out.append((p, 2 * math.sqrt(a * b) * abs(q)))
    return out


@pytest.mark.parametrize("k", range(50))
def test_analytic_oracle(k):
    p, expect = analytic_instances()[k]
    sol = solve(p, OPTS)
    assert sol.status is Status.OPTIMAL
    assert abs(sol.objective_value - expect) <= 1e-5


# -- properties ---------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 8))
def test_sampled_feasible_never_infeasible(seed, blocks, m):
    p, _ = _random_feasible(np.random.default_rng(seed), blocks, m)
    assert solve(p, OPTS).status is not Status.INFEASIBLE


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 10))
def test_negative_trace_never_feasible(d, t):
    p = SdpProblem([d])
    p.add_constraint([(0, i, i, 1.0) for i in range(d)], -t)
    assert not solve(p, OPTS).status.ok
