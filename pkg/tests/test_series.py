import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffexpand.series import ExpansionSeries

coef = st.floats(-3, 3, allow_nan=False)


def test_scalar_value_and_coefficients():
    s = ExpansionSeries.scalar(1, [2.0, -4.0], 3)
    assert s.value(0.1) == pytest.approx(0.2 - 0.04)
    assert s.coefficient(0) == 0.0
    assert s.coefficient(2) == -4.0
    with pytest.raises(ValueError):
        s.coefficient(3)


def test_excess_coefficients_are_truncated():
    s = ExpansionSeries.scalar(0, [1.0, 2.0, 3.0], 2)
    assert s.truncation_order == 1


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        ExpansionSeries.scalar(0, [np.nan])


def test_addition_keeps_smaller_error_order():
    a = ExpansionSeries.scalar(0, [1.0, 1.0, 1.0], 3)
    b = ExpansionSeries.scalar(1, [2.0], 2)
    c = a + b
    assert c.error_order == 2
    assert [c.coefficient(p) for p in c.powers()] == [1.0, 3.0]


def test_product_of_shifted_series():
    a = ExpansionSeries.scalar(1, [1.0, 2.0], 3)
    b = ExpansionSeries.scalar(-1, [3.0, 1.0], 1)
    c = a @ b
    assert c.base_power == 0
    assert c.error_order == 2
    assert [c.coefficient(0), c.coefficient(1)] == [3.0, 7.0]


def test_leading_drops_negligible_terms():
    s = ExpansionSeries.scalar(0, [1e-15, 2.0, 1.0], 3).leading(1e-12)
    assert s.base_power == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(coef, min_size=4, max_size=4), st.integers(-1, 2))
def test_scalar_inverse_round_trip(cs, base):
    cs[0] = cs[0] + (4.0 if cs[0] >= 0 else -4.0)
    s = ExpansionSeries.scalar(base, cs, base + 4)
    prod = s @ s.inverse()
    assert prod.base_power == 0
    assert prod.coefficient(0) == pytest.approx(1.0)
    for p in range(1, prod.error_order):
        assert prod.coefficient(p) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(coef, min_size=4, max_size=4), min_size=3, max_size=3))
def test_matrix_inverse_round_trip(blocks):
    mats = [np.array(b).reshape(2, 2) for b in blocks]
    mats[0] = mats[0] + 8 * np.eye(2)
    s = ExpansionSeries(0, tuple(mats), 3)
    prod = s.inverse() @ s
    assert np.allclose(prod.coefficient(0), np.eye(2))
    for p in (1, 2):
        assert np.allclose(prod.coefficient(p), 0.0, atol=1e-9)


def test_geometric_series_inverse():
    inv = ExpansionSeries.scalar(0, [1.0, -1.0], 5).inverse()
    assert [inv.coefficient(p) for p in inv.powers()] == [1.0] * 5


def test_singular_leading_term_rejected():
    s = ExpansionSeries(0, (np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2)), 2)
    with pytest.raises(np.linalg.LinAlgError):
        s.inverse()


def test_entry_shift():
    s = ExpansionSeries(0, (np.ones((2, 2)), 2 * np.ones((2, 2))), 2)
    t = s.entry_shift([0, 1], [0, 1])
    assert t.coefficient(0)[0, 0] == 1.0
    assert t.coefficient(1)[0, 1] == 1.0
    assert t.coefficient(1)[0, 0] == 2.0
    assert t.error_order == 2


@given(st.lists(coef, min_size=3, max_size=3), st.floats(0.01, 0.5))
def test_value_matches_polynomial(cs, eps):
    s = ExpansionSeries.scalar(-1, cs, 2)
    assert s.value(eps) == pytest.approx(cs[0] / eps + cs[1] + cs[2] * eps)


def test_rows_flatten_matrix_coefficients():
    s = ExpansionSeries(1, (np.arange(4.0).reshape(2, 2),), 2)
    rows = s.to_rows("D")
    assert len(rows) == 4
    assert rows[3] == {"quantity": "D", "i": 1, "j": 1, "power": 1, "coefficient": 3.0}
