"""Expression mini-language: parsing, evaluation, symbolic differentiation."""
from __future__ import annotations

import math

import numpy as np
import pytest

from noc.expr import ExprError, parse_expr


def test_basic_arithmetic():
    e = parse_expr("2 + 3*4 - 10/5")
    assert e.eval({}) == 12.0


def test_power_right_associative():
    # 2^3^2 = 2^(3^2) = 512
    assert parse_expr("2^3^2").eval({}) == 512.0


def test_unary_minus_and_precedence():
    assert parse_expr("-3^2").eval({}) == -9.0
    assert parse_expr("(-3)^2").eval({}) == 9.0
    assert parse_expr("2 - -3").eval({}) == 5.0


def test_variables_and_functions():
    e = parse_expr("sin(a)^2 + cos(a)^2")
    assert abs(e.eval({"a": 0.7312}) - 1.0) < 1e-14
    e2 = parse_expr("exp(log(x))")
    assert abs(e2.eval({"x": 4.25}) - 4.25) < 1e-14


def test_pi_constant():
    assert abs(parse_expr("cos(pi)").eval({}) + 1.0) < 1e-15


def test_vectorized_eval():
    e = parse_expr("t^2 - 2*t")
    t = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(e.eval({"t": t}), t * t - 2 * t)


def test_allowed_vars_rejection():
    with pytest.raises(ExprError):
        parse_expr("y1 + q7", allowed_vars={"y1"})


def test_syntax_errors():
    for bad in ["", "1 +", "frob(2)", "2 *", "(1+2", "1 2"]:
        with pytest.raises(ExprError):
            parse_expr(bad)


# ----------------------------------------------------------------------------
# symbolic differentiation against central finite differences
# ----------------------------------------------------------------------------

def _fd(e, env, var, h=1e-6):
    up = dict(env)
    dn = dict(env)
    up[var] = env[var] + h
    dn[var] = env[var] - h
    return (e.eval(up) - e.eval(dn)) / (2 * h)


def test_diff_matches_fd_on_random_expressions():
    exprs = [
        "x*y + x^3 - 2/y",
        "sin(x*y) * exp(-x)",
        "sqrt(x^2 + y^2 + 1)",
        "log(1 + x^2) / (2 + cos(y))",
        "tan(x/3) + y^x",
        "abs(x - 2) * y",
    ]
    rng = np.random.default_rng(20240817)
    for text in exprs:
        e = parse_expr(text)
        for _ in range(8):
            env = {"x": float(rng.uniform(0.3, 1.8)), "y": float(rng.uniform(0.4, 1.9))}
            for var in ("x", "y"):
                got = e.diff(var).eval(env)
                ref = _fd(e, env, var)
                assert abs(got - ref) <= 1e-6 * (1 + abs(ref)), (text, var, env)


def test_second_derivative():
    e = parse_expr("x^4")
    d2 = e.diff("x").diff("x")
    assert abs(d2.eval({"x": 2.0}) - 48.0) < 1e-12


def test_diff_constant_is_zero():
    e = parse_expr("3.5 * pi")
    assert e.diff("x").eval({}) == 0.0


def test_diff_free_vars_shrink():
    e = parse_expr("x + y")
    assert e.diff("x").free_vars() == frozenset()


def test_str_roundtrip_evaluates_identically():
    text = "sin(x)^2 + 3*x/(1 + x^2)"
    e = parse_expr(text)
    e2 = parse_expr(str(e))
    for x in [0.0, 0.5, 2.5, -1.25]:
        assert abs(e.eval({"x": x}) - e2.eval({"x": x})) < 1e-14


def test_exprs_are_picklable():
    import pickle

    e = parse_expr("sin(x) * y^2")
    e2 = pickle.loads(pickle.dumps(e))
    env = {"x": 0.3, "y": 1.7}
    assert e.eval(env) == e2.eval(env)


def test_compiled_callable_matches_eval():
    from noc.expr import compile_expr

    e = parse_expr("sin(x)*y^2 - exp(-x)/(1 + y^2) + abs(x - 2)")
    fn = compile_expr(e, ("x", "y"))
    rng = np.random.default_rng(3)
    for _ in range(25):
        x, y = rng.normal(size=2)
        assert abs(fn(x, y) - e.eval({"x": x, "y": y})) < 1e-14


def test_compiled_callable_broadcasts():
    from noc.expr import compile_expr

    fn = compile_expr(parse_expr("t^3 - t"), ("t",))
    t = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(fn(t), t**3 - t, rtol=0, atol=1e-15)


def test_compile_rejects_unbound_variables():
    from noc.expr import compile_expr

    with pytest.raises(ExprError):
        compile_expr(parse_expr("x + z"), ("x", "y"))
