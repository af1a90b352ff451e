from math import comb

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from veclyap import sos
from veclyap.poly import Polynomial, VarSet
from veclyap.sos import DecisionPoly, GramCertificate, NotSos, SosProgram, check_sos, monomial_basis

XY = VarSet(["x", "y"])
X = VarSet(["x"])
XYZ = VarSet(["x", "y", "z"])


def P(text, vs=XY):
    return Polynomial.parse(text, vs)


def rel_residual(cert, p):
    return cert.reconstruction_residual(p) / (1 + p.max_abs_coefficient())


class TestBasis:
    def test_univariate(self):
        assert monomial_basis(["x"], 2, X) == [(), ((0, 1),)]

    def test_bivariate_degree4(self):
        b = monomial_basis(["x", "y"], 4, XY)
        assert len(b) == 6
        assert b[0] == () and {len(m) for m in b[1:3]} == {1}

    def test_four_vars(self):
        vs = VarSet(["a", "b", "c", "d"])
        assert len(monomial_basis(list(vs), 2, vs)) == 5

    def test_odd_degree(self):
        with pytest.raises(ValueError):
            monomial_basis(["x"], 3, X)

    @given(st.integers(1, 4), st.integers(0, 3))
    def test_size_formula(self, k, h):
        vs = VarSet([f"v{i}" for i in range(k)])
        assert len(monomial_basis(list(vs), 2 * h, vs)) == comb(k + h, h)


class TestCheckSos:
    def test_perfect_square(self):
        cert = check_sos(P("x^2 + 2*x*y + y^2"))
        assert isinstance(cert, GramCertificate)
        assert cert.basis_text() == ["x", "y"]
        assert np.allclose(cert.gram, [[1, 1], [1, 1]], atol=1e-5)

    def test_shifted_parabola_rejected(self):
        p = P("x^2 - 1", X)
        out = check_sos(p)
        assert isinstance(out, NotSos)
        assert out.verify(p)

    def test_motzkin_rejected(self):
        p = P("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1")
        # nonnegative (AM-GM), checked on a grid
        g = np.linspace(-2, 2, 81)
        G = np.array([[a, b] for a in g for b in g])
        assert p.evaluate_many(G).min() >= -1e-12
        out = check_sos(p)
        assert isinstance(out, NotSos)
        assert out.verify(p)

    def test_odd_degree(self):
        with pytest.raises(ValueError):
            check_sos(P("x^3"))

    def test_zero(self):
        assert isinstance(check_sos(Polynomial.zero(XY)), GramCertificate)

    def test_squares_reconstruct(self):
        p = P("(x^2 + y*z - 1)^2 + (x*y - z)^2", XYZ)
        cert = check_sos(p)
        total = Polynomial.zero(XYZ)
        for h in cert.squares():
            total = total + h * h
        assert (total - p).max_abs_coefficient() <= 1e-5 * (1 + p.max_abs_coefficient())


class TestPrograms:
    def test_constant_multiplier(self):
        prog = SosProgram(X)
        s = prog.sos_poly(["x"], 0, name="s")
        prog.add_sos(P("-2*x^2", X) - s * P("-x^2", X))
        sol = prog.solve()
        assert sol.feasible
        assert sol.value(s).constant_term() >= 2 - 1e-6

    def test_lyapunov_for_stable_scalar(self):
        prog = SosProgram(X)
        V = prog.free_poly(["x"], 2, min_degree=2, name="V")
        x2 = P("x^2", X)
        prog.add_sos(V - 1e-6 * x2)
        prog.add_sos(-(V.diff("x") * P("-x", X)) - 1e-6 * x2)
        sol = prog.solve()
        assert sol.feasible
        assert sol.value(V).coefficient(((0, 2),)) > 0

    def test_product_of_unknowns_rejected(self):
        prog = SosProgram(X)
        a = prog.sos_poly(["x"], 2)
        b = prog.sos_poly(["x"], 2)
        with pytest.raises(ValueError):
            a * b

    def test_infeasible_program(self):
        prog = SosProgram(X)
        t = prog.scalar("t")
        prog.add_zero(t - 1.0)
        prog.add_sos(P("-x^2", X) * t)
        assert not prog.solve().feasible

    def test_minimize_scalar(self):
        # min t s.t. t - x^2 + 2x - 1 + ... : t + (x^2 - 2x) SOS -> t >= 1
        prog = SosProgram(X)
        t = prog.scalar("t")
        prog.add_sos(P("x^2 - 2*x", X) + t)
        prog.minimize(t)
        sol = prog.solve()
        assert abs(sol.scalar(t) - 1.0) < 1e-5

    def test_newton_filter_same_verdict(self):
        p = P("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1")
        prog = SosProgram(XY, newton=True)
        prog.add_sos(DecisionPoly(XY, p))
        assert not prog.solve().feasible
        q = P("(x^2*y - 1)^2 + (x - y)^2")
        prog = SosProgram(XY, newton=True)
        prog.add_sos(DecisionPoly(XY, q))
        assert prog.solve().feasible


class TestPutinar:
    def test_linear_on_halfline(self):
        p, g = P("x", X), P("x - 1", X)
        cert = sos.putinar_certificate(p, [g], multiplier_degree=0)
        assert cert is not None
        assert cert.identity_residual(p) <= 1e-6
        assert cert.multipliers[0].constant_term() == pytest.approx(1.0, abs=1e-5)

    def test_already_sos(self):
        p = P("1 + x^2", X)
        cert = sos.putinar_certificate(p, [P("1 - x^2", X)], multiplier_degree=0)
        assert cert is not None and cert.identity_residual(p) <= 1e-6

    def test_interval(self):
        p = P("2 - x^2", X)
        cert = sos.putinar_certificate(p, [P("1 - x^2", X)], multiplier_degree=0)
        assert cert is not None
        assert cert.identity_residual(p) <= 1e-6
        assert cert.sigma0.polynomial().evaluate([0.0]) > 0

    def test_negative_somewhere_fails(self):
        assert sos.putinar_certificate(P("x^2 - 0.5", X), [P("1 - x^2", X)]) is None

    def test_empty_region(self):
        with pytest.raises(ValueError):
            sos.putinar_certificate(P("x", X), [])


# -- properties ---------------------------------------------------------------

coeffs = st.floats(-2, 2, allow_nan=False).filter(lambda c: abs(c) > 1e-3)
cubic_terms = st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
                              .filter(lambda e: sum(e) <= 3), coeffs, min_size=1, max_size=5)


def _poly(d):
    return Polynomial(XYZ, {tuple((i, e) for i, e in enumerate(k) if e): c for k, c in d.items()})


@settings(max_examples=30, deadline=None)
@given(cubic_terms)
def test_square_is_certified(d):
    q = _poly(d)
    p = q * q
    cert = check_sos(p)
    assert isinstance(cert, GramCertificate)
    assert rel_residual(cert, p) <= 1e-6
    assert cert.eigen_floor >= -1e-7


@settings(max_examples=15, deadline=None)
@given(st.lists(cubic_terms, min_size=1, max_size=3), st.integers(0, 1000))
# no interior Gram point here; once stalled at the iteration cap
@example([{(0, 3, 0): 0.3820277527824092},
          {(2, 1, 0): 1.8861747413349113, (0, 0, 0): 0.87160337522926, (0, 0, 2): 0.4557380946733942}], 141)
def test_certified_polynomials_sample_nonnegative(parts, seed):
    p = Polynomial.zero(XYZ)
    for d in parts:
        q = _poly(d)
        p = p + q * q
    cert = check_sos(p)
    assert isinstance(cert, GramCertificate)
    V = np.random.default_rng(seed).uniform(-2, 2, size=(1000, 3))
    vals = cert.polynomial().evaluate_many(V)
    bound = 1e-6 * (1 + np.linalg.norm(V, axis=1) ** p.degree)
    assert np.all(p.evaluate_many(V) >= -bound)
    assert np.all(vals >= -bound * (1 + p.max_abs_coefficient()))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 3), st.floats(0.1, 3))
def test_putinar_identity_holds(a, b):
    # a + b*x^2 >= a > 0 on the unit interval
    p = Polynomial.parse(f"{a!r} + {b!r}*x^2 - 0.5*{a!r}*x^4", X)
    cert = sos.putinar_certificate(p, [P("1 - x^2", X)], multiplier_degree=2)
    assert cert is not None
    assert cert.identity_residual(p) <= 1e-6 * (1 + p.max_abs_coefficient())
