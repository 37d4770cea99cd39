import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffexpand import symexpr as sx
from diffexpand.symexpr import DELTA, DELTA0, Y0, Y1, beta, parse

from exprgen import anything, bindings, positive

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def close(a, b, rel):
    return abs(a - b) <= rel * (1 + abs(b))


def test_power_rule():
    assert sx.simplify(sx.differentiate(Y1**2, Y1)) == sx.simplify(2 * Y1)


def test_absent_symbol_derivative_is_zero():
    assert sx.differentiate(Y0, "eps") == sx.ZERO


def test_gaussian_bump_derivative_matches_central_difference():
    f = sx.exp(-beta(0) * Y1**2)
    df = sx.differentiate(f, Y1)
    b = {"y1": 0.7, "beta[0]": 1.3}
    h = 1e-5
    fd = (sx.evaluate(f, {**b, "y1": 0.7 + h}) - sx.evaluate(f, {**b, "y1": 0.7 - h})) / (2 * h)
    assert math.isclose(sx.evaluate(df, b), fd, rel_tol=1e-8)


def test_evaluate_arithmetic():
    assert sx.evaluate(2 * Y1 + DELTA, {"y1": 1, "delta": 0.5}) == 2.5


def test_division_by_zero_reported():
    with pytest.raises(sx.DivisionByZeroError):
        sx.evaluate(Y1 / DELTA, {"y1": 1, "delta": 0})


def test_log_of_negative_reported():
    with pytest.raises(sx.DomainError):
        sx.evaluate(sx.log(Y1), {"y1": -1.0})


def test_fractional_power_of_negative_reported():
    with pytest.raises(sx.DomainError):
        sx.evaluate(sx.sqrt(Y1), {"y1": -1.0})


def test_unbound_symbol_reported():
    with pytest.raises(sx.UnboundSymbolError):
        sx.evaluate(Y1 + Y0, {"y1": 1.0})


def test_euler_drift_row_by_hand():
    # mu(y0) = -theta*y0 with theta = beta[0], sigma^2 = beta[1]
    mu = -beta(0) * Y0
    h = mu * (Y1 - Y0 - mu * DELTA) / beta(1)
    val = sx.evaluate(h, {"y1": 1.1, "y0": 1.0, "delta": 0.1, "beta[0]": 1.0, "beta[1]": 1.0})
    assert math.isclose(val, -0.2, rel_tol=1e-12)


def test_evaluate_vectorised():
    x = np.linspace(0.5, 2.0, 5)
    out = sx.evaluate(sx.log(Y1) * Y1, {"y1": x})
    np.testing.assert_allclose(out, np.log(x) * x)


def test_substitute_simple():
    assert sx.substitute(Y1 * DELTA, Y1, Y0) == Y0 * DELTA


def test_substitute_exp_at_zero_simplifies_to_one():
    assert sx.simplify(sx.substitute(sx.exp(Y1), Y1, 0)) == sx.ONE


def test_simplify_drops_zero_and_one_factors():
    assert sx.simplify(parse("0*y1 + 1*delta")) == DELTA


def test_simplify_cancels_like_terms():
    assert sx.simplify(Y1 - Y1) == sx.ZERO


def test_simplify_merges_powers():
    assert sx.simplify(Y1 * Y1 * Y1 / Y1) == sx.simplify(Y1**2)


def test_delta0_polynomial_basic():
    terms = sx.extract_delta0_polynomial(DELTA0**2 * Y1 + 3)
    assert terms == [(2, Y1), (0, sx.Const(3))]


def test_delta0_polynomial_absent():
    e = Y1 * Y0
    assert sx.extract_delta0_polynomial(e) == [(0, e)]


def test_delta0_polynomial_rejects_exp():
    with pytest.raises(sx.NotPolynomialError):
        sx.extract_delta0_polynomial(sx.exp(DELTA0) + Y1)


def test_delta0_polynomial_negative_powers():
    terms = sx.extract_delta0_polynomial(Y1 / DELTA0 + DELTA0 * (Y0 + Y1 / DELTA0**2))
    assert min(q for q, _ in terms) == -1


def test_size_cap():
    e = Y1
    for _ in range(12):
        e = sx.Add((e, e * Y0))
    with pytest.raises(sx.ExpressionTooLargeError, match="order 3"):
        sx.check_size(e, cap=1000, context="order 3")


def test_render_is_stable_and_parses_back():
    e = sx.simplify(parse("y1^(1/2) * -2.0 - (y0 + delta) / -eps + exp(beta[3]) * Delta0^(-2)"))
    text = sx.render(e)
    assert text == sx.render(sx.simplify(parse(text)))
    assert parse(text) == e


@pytest.mark.parametrize(
    "text,column",
    [("y1 + ", 6), ("y1 * (y0", 9), ("foo + y1", 1), ("y1 $ 2", 4), ("y1^y0", 3)],
)
def test_parse_errors_report_column(text, column):
    with pytest.raises(sx.ParseError) as info:
        parse(text)
    assert info.value.position + 1 == column


def test_symbol_roles():
    assert Y1.role == "state"
    assert DELTA0.role == "interval-shape"
    assert beta(4).role == "parameter"
    with pytest.raises(ValueError):
        sx.Sym("zeta")


def test_nodes_are_immutable():
    with pytest.raises(AttributeError):
        Y1.name = "y0"


@settings(max_examples=1000, deadline=None)
@given(seeds)
def test_derivative_matches_central_difference(seed):
    rng = random.Random(seed)
    e = anything(rng, 3)
    b = bindings(rng)
    name = rng.choice(["y1", "y0", "delta", "beta[0]"])
    d = sx.evaluate(sx.differentiate(e, name), b)
    h = 1e-5
    up = sx.evaluate(e, {**b, name: b[name] + h})
    dn = sx.evaluate(e, {**b, name: b[name] - h})
    assert abs(d - (up - dn) / (2 * h)) <= 1e-6 * (1 + abs(d))


@settings(max_examples=1000, deadline=None)
@given(seeds)
def test_simplify_preserves_value(seed):
    rng = random.Random(seed)
    e = anything(rng, 4)
    b = bindings(rng)
    v = sx.evaluate(e, b)
    assert abs(sx.evaluate(sx.simplify(e), b) - v) <= 1e-12 * (1 + abs(v))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_substitute_then_evaluate_equals_combined_binding(seed):
    rng = random.Random(seed)
    e = anything(rng, 3)
    r = positive(rng, 2)
    b = bindings(rng)
    direct = sx.evaluate(sx.substitute(e, "y1", r), b)
    combined = sx.evaluate(e, {**b, "y1": sx.evaluate(r, b)})
    assert close(direct, combined, 1e-12)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_sum_and_product_rules(seed):
    rng = random.Random(seed)
    f, g = anything(rng, 2), anything(rng, 2)
    b = bindings(rng)
    d = lambda e: sx.evaluate(sx.differentiate(e, "y1"), b)  # noqa: E731
    fv, gv = sx.evaluate(f, b), sx.evaluate(g, b)
    assert close(d(f + g), d(f) + d(g), 1e-10)
    assert close(d(f * g), d(f) * gv + fv * d(g), 1e-10)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_delta0_decomposition_reassembles(seed):
    rng = random.Random(seed)
    e = sx.ZERO
    for q in range(-2, 3):
        e = e + anything(rng, 2) * sx.DELTA0**q
    e = e * (sx.DELTA0 + anything(rng, 1))
    b = bindings(rng)
    terms = sx.extract_delta0_polynomial(e)
    assert all("Delta0" not in c.symbols for _, c in terms)
    back = sum(sx.evaluate(c, b) * b["Delta0"] ** q for q, c in terms)
    v = sx.evaluate(e, b)
    assert close(back, v, 1e-12)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_render_parse_round_trip(seed):
    rng = random.Random(seed)
    e = anything(rng, 4)
    assert parse(sx.render(e)) == e
    s = sx.simplify(e)
    assert parse(sx.render(s)) == s


def test_expand_cancels_polynomial_identity():
    e = (Y1 + Y0) ** 2 - (Y1 - Y0) ** 2 - 4 * Y1 * Y0
    assert sx.expand(e) == sx.ZERO


@settings(max_examples=500, deadline=None)
@given(seeds)
def test_expand_preserves_value(seed):
    rng = random.Random(seed)
    e = anything(rng, 4)
    b = bindings(rng)
    v = sx.evaluate(e, b)
    assert abs(sx.evaluate(sx.expand(e), b) - v) <= 1e-10 * (1 + abs(v))
