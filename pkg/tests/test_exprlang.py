"""Tests for the expression language: grammar, printer, evaluation and errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_gradient_hessian, random_expression, relative_error
from walkerlab import exprlang as el
from walkerlab.exprlang import Add, Call, Mul, Neg, Num, Pow, Sub, Var
from walkerlab.jets import Jet, seeds


def _env(u, v, w=0.0, order=2):
    jets = seeds(np.array([u, v, w]), order)
    return dict(zip("uvw", jets))


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------


class TestParse:
    def test_sum_of_squares(self):
        assert el.parse("u^2+v^2") == Add(Pow(Var("u"), 2.0), Pow(Var("v"), 2.0))

    def test_function_product(self):
        assert el.parse("exp(u)*cos(v)") == Mul(Call("exp", Var("u")), Call("cos", Var("v")))

    def test_power_binds_tighter_than_unary_minus(self):
        assert el.parse("-u^2") == Neg(Pow(Var("u"), 2.0))

    def test_negative_exponent(self):
        assert el.parse("u^-2") == Pow(Var("u"), -2.0)

    def test_left_associative_subtraction(self):
        assert el.parse("a-b-c") == Sub(Sub(Var("a"), Var("b")), Var("c"))

    def test_whitespace_insignificant(self):
        assert el.parse(" u *\tv ") == el.parse("u*v")

    def test_identifiers(self):
        assert el.parse("_x1 + Lambda") == Add(Var("_x1"), Var("Lambda"))

    def test_scientific_literal(self):
        assert el.parse("1.5e-3") == Num(1.5e-3)

    @pytest.mark.parametrize(
        "src, offset",
        [("1+*2", 2), ("2u", 1), ("u^v", 2), ("(u", 2), ("", 0), ("sin u", 4), ("foo(u)", 0), ("u)", 1)],
    )
    def test_syntax_error_offsets(self, src, offset):
        with pytest.raises(el.ParseError) as info:
            el.parse(src)
        assert info.value.offset == offset
        assert "expected" in str(info.value)


# ---------------------------------------------------------------------------
# Canonical printer
# ---------------------------------------------------------------------------


class TestPrinter:
    @pytest.mark.parametrize("src", ["u^2+v^2", "-u^2", "2^-1", "a-(b-c)", "sqrt(1-u)/(v*-3)", "-0.0", "1e-300"])
    def test_round_trip(self, src):
        e = el.parse(src)
        assert el.parse(el.to_string(e)) == e

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_random(self, seed):
        e = el.parse(random_expression(np.random.default_rng(seed), 4))
        text = el.to_string(e)
        assert el.parse(text) == e
        assert el.to_string(el.parse(text)) == text


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class TestEvaluate:
    def test_polynomial_jet(self):
        f = el.parse("u^2+v^2").evaluate(_env(1.0, 2.0))
        assert f.value == pytest.approx(5.0)
        np.testing.assert_allclose(f.grad, [2.0, 4.0, 0.0])
        np.testing.assert_allclose(f.hess, np.diag([2.0, 2.0, 0.0]))

    def test_inactive_coordinate_is_constant(self):
        env = {"xm": Jet.constant(0.7, 2, 2)}
        f = el.parse("xm").evaluate(env)
        assert f.value == pytest.approx(0.7)
        np.testing.assert_array_equal(f.grad, [0.0, 0.0])

    def test_hyperbolic_factor_against_fd(self):
        e = el.parse("4/(-L*(1-u^2-v^2)^2)")
        p = np.array([0.3, 0.1])
        x, y = seeds(p, 2)
        f = e.evaluate({"u": x, "v": y, "L": -2.0})

        def plain(q):
            return float(e.evaluate({"u": q[0], "v": q[1], "L": -2.0}))

        g, H = fd_gradient_hessian(plain, p)
        assert f.value == pytest.approx(plain(p), rel=1e-14)
        np.testing.assert_allclose(f.grad, g, rtol=1e-6)
        np.testing.assert_allclose(f.hess, H, rtol=1e-6)

    def test_float_arrays(self):
        out = el.parse("u*v+1").evaluate({"u": np.array([1.0, 2.0]), "v": np.array([3.0, 4.0])})
        np.testing.assert_allclose(out, [4.0, 9.0])

    def test_unbound_variable_named(self):
        with pytest.raises(el.UnboundVariableError) as info:
            el.parse("u + q").evaluate({"u": 1.0})
        assert info.value.name == "q"

    def test_domain_error_reports_location(self):
        with pytest.raises(el.ExprDomainError) as info:
            el.parse("1 + ln(u)").evaluate({"u": -1.0})
        assert info.value.offset == 4

    def test_operator_overloads_build_trees(self):
        u = Var("u")
        e = (u * 2.0 + 1.0) / u - u**2
        assert float(e.evaluate({"u": 2.0})) == pytest.approx(2.5 - 4.0)

    def test_free_vars(self):
        assert el.parse("sin(u)*xm + L").free_vars == {"u", "xm", "L"}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_jets_match_fd_on_random_expressions(self, seed, a, b, c):
        e = el.parse(random_expression(np.random.default_rng(seed), 3))
        p = np.array([a, b, c])
        f = e.evaluate(_env(*p))

        def plain(q):
            return float(np.asarray(e.evaluate(dict(zip("uvw", q)))))

        g, H = fd_gradient_hessian(plain, p)
        val = f.value if isinstance(f, Jet) else f
        assert relative_error(val, plain(p)) < 1e-12
        if isinstance(f, Jet):
            assert relative_error(f.grad, g) <= 1e-5
            assert relative_error(f.hess, H) <= 1e-5


# ---------------------------------------------------------------------------
# Tooling: simplify, substitute, diff
# ---------------------------------------------------------------------------


class TestTooling:
    def test_simplify_folds_constants(self):
        assert el.simplify(el.parse("0*u + 1*v + (2+3)")) == el.parse("v+5")

    def test_is_zero(self):
        assert el.is_zero(el.simplify(el.parse("0*v + 0")))
        assert not el.is_zero(el.parse("u"))

    def test_substitute(self):
        e = el.substitute("u^2 + v", {"u": "v+1", "v": 2.0})
        assert float(e.evaluate({"v": 3.0})) == pytest.approx(18.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_symbolic_diff_matches_jet(self, seed, a, b):
        e = el.parse(random_expression(np.random.default_rng(seed), 3))
        env = _env(a, b, 0.2)
        f = e.evaluate(env)
        plain = {"u": a, "v": b, "w": 0.2}
        for k, name in enumerate("uvw"):
            d = float(np.asarray(el.diff(e, name).evaluate(plain)))
            expect = f.grad[k] if isinstance(f, Jet) else 0.0
            assert d == pytest.approx(expect, rel=1e-10, abs=1e-10)
