import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffexpand import symexpr as sx
from diffexpand.generator import (GeneratorContext, apply_A, apply_Gamma, base_point,
                                  conditional_moment_expansion, iterate_Gamma)
from diffexpand.model import get_model
from diffexpand.symexpr import DELTA0, EPS, Y0, Y1


@pytest.fixture(scope="module")
def ou():
    return get_model("ou", [0.8, 1.3])


def test_A_of_identity_is_drift(ou):
    out = apply_A(GeneratorContext(ou), Y1)
    assert sx.evaluate(out, {"y1": 2.0}) == pytest.approx(-0.8 * 2.0)


def test_A_of_square(ou):
    out = apply_A(GeneratorContext(ou), Y1**2)
    assert sx.evaluate(out, {"y1": 0.5}) == pytest.approx(2 * 0.5 * (-0.8 * 0.5) + 1.3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.floats(-1.5, 1.5))
def test_A_matches_finite_differences(coefs, x):
    m = get_model("cubic", [0.7, 1.1])
    f = sx.add(*[sx.const(c) * Y1**k for k, c in enumerate(coefs)]) + sx.exp(0.3 * Y1)
    out = float(sx.evaluate(apply_A(GeneratorContext(m), f), {"y1": x}))

    def F(v):
        return float(sx.evaluate(f, {"y1": v}))

    h = 1e-3
    d1 = (F(x + h) - F(x - h)) / (2 * h)
    d2 = (F(x + h) - 2 * F(x) + F(x - h)) / h**2
    assert out == pytest.approx(-0.7 * x**3 * d1 + 0.5 * 1.1 * d2, rel=1e-5, abs=1e-5)


def test_gamma_carries_bias_path(ou):
    ctx = GeneratorContext(ou, ((0.25, 0.0), (0.5, 0.0)))
    out = apply_Gamma(ctx, sx.beta(0))
    assert sx.evaluate(out, {"eps": 0.1}) == pytest.approx(0.25 + 2 * 0.5 * 0.1)


def test_gamma_differentiates_eps(ou):
    out = apply_Gamma(GeneratorContext(ou), EPS**2 * Y0)
    assert sx.evaluate(out, {"eps": 0.3, "y0": 2.0}) == pytest.approx(1.2)


def test_iterate_gamma_zero_is_identity(ou):
    assert iterate_Gamma(GeneratorContext(ou), Y1, 0) == Y1


def test_iterate_gamma_rejects_negative(ou):
    with pytest.raises(ValueError):
        iterate_Gamma(GeneratorContext(ou), Y1, -1)


def test_base_point_binds_everything_but_y0(ou):
    e = base_point(Y1 * sx.beta(0) + sx.DELTA + EPS, ou)
    assert e.symbols <= {"y0"}
    assert sx.evaluate(e, {"y0": 2.0}) == pytest.approx(1.6)


def test_conditional_mean_matches_exact_ou(ou):
    theta = 0.8
    coefs = conditional_moment_expansion(GeneratorContext(ou), Y1 - Y0, 4)
    for j, c in enumerate(coefs):
        got = sx.evaluate(c, {"y0": 1.7, "Delta0": 1.5})
        assert got == pytest.approx(1.7 * (-theta * 1.5) ** j / math.factorial(j) if j else 0.0, abs=1e-12)


@pytest.mark.parametrize("y0", [-1.0, 0.3, 2.0])
def test_conditional_second_moment_truncation_error(ou, y0):
    theta, s2, d0 = 0.8, 1.3, 1.2
    coefs = [float(sx.evaluate(c, {"y0": y0, "Delta0": d0}))
             for c in conditional_moment_expansion(GeneratorContext(ou), (Y1 - Y0) ** 2, 4)]
    errs = []
    grid = [0.2, 0.1, 0.05]
    for eps in grid:
        dt = eps * d0
        exact = y0**2 * math.expm1(-theta * dt) ** 2 - s2 * math.expm1(-2 * theta * dt) / (2 * theta)
        errs.append(abs(sum(c * eps**j for j, c in enumerate(coefs)) - exact))
    slope = np.polyfit(np.log(grid), np.log(errs), 1)[0]
    assert slope > 4.7


def test_expansion_order_capped(ou):
    with pytest.raises(ValueError):
        conditional_moment_expansion(GeneratorContext(ou), Y1, 5)


def test_bias_rows_checked(ou):
    with pytest.raises(ValueError):
        GeneratorContext(ou, ((1.0,),))


def test_from_derivatives_divides_by_factorial(ou):
    ctx = GeneratorContext.from_derivatives(ou, [[1.0, 0.0], [4.0, 0.0]])
    assert sx.evaluate(ctx.bias_rates[0], {"eps": 1.0}) == pytest.approx(1.0 + 2 * 2.0)


def test_delta0_enters_linearly(ou):
    out = apply_Gamma(GeneratorContext(ou), Y1)
    assert DELTA0.name in out.symbols
