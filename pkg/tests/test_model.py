import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffexpand import model as M
from diffexpand import symexpr as sx
from diffexpand.symexpr import Y0, Y1


@pytest.fixture(scope="module")
def ou():
    return M.ornstein_uhlenbeck(1.0, 2.0)


@pytest.fixture(scope="module")
def ou_law(ou):
    return M.StationaryLaw(ou)


@pytest.fixture(scope="module")
def ou_generic(ou):
    return M.StationaryLaw(ou, force_generic=True)


def test_ou_scale_density_value(ou):
    assert M.scale_density(ou, 1.0) == pytest.approx(math.exp(0.5), rel=1e-14)
    assert M.scale_density(ou, 0.0) == 1.0


def test_scale_density_quadrature_matches_closed_form(ou):
    generic_ou = M.DiffusionModel("ou-generic", ou.drift, ou.sigma, 1, 1, ou.beta0)
    for x in np.linspace(-3, 3, 13):
        closed = M.scale_density(ou, x)
        assert M.scale_density(ou, x, method="quad") == pytest.approx(closed, rel=1e-8)
        assert math.exp(float(generic_ou.log_scale(x))) == pytest.approx(closed, rel=1e-8)


def test_scale_density_outside_domain_rejected():
    m = M.model_from_mapping({"drift_expr": "theta*(1 - x)", "diffusion_expr": "gamma^(1/2)*x^(1/2)",
                              "theta_dim": 1, "gamma_dim": 1, "domain": [0, "inf"], "beta0": [1, 0.5]})
    with pytest.raises(ValueError):
        M.scale_density(m, -1.0)


def test_ou_speed_density_at_zero(ou):
    assert M.speed_density(ou, 0.0) == pytest.approx(0.5)


def test_speed_scale_identity():
    m = M.soft_linear_drift(1.3, 0.8)
    for x in np.linspace(-2.5, 2.5, 50):
        prod = M.speed_density(m, x) * m.sigma2_at(x) * M.scale_density(m, x)
        assert abs(prod - 1.0) <= 1e-12


def test_ou_speed_mass_converges(ou):
    report = M.check_stationarity_diagnostics(ou)
    masses = report["speed_masses"]
    assert all(b >= a for a, b in zip(masses, masses[1:]))
    assert masses[-1] == pytest.approx(math.sqrt(2 * math.pi) * 0.5, rel=1e-10)


def test_ou_stationary_density_is_standard_normal(ou_law):
    assert M.stationary_density(ou_law, 0.0) == pytest.approx(0.3989422804, abs=1e-10)


def test_generic_law_matches_fast_path(ou_law, ou_generic):
    x = np.linspace(-4, 4, 81)
    assert np.max(np.abs(ou_law.density(x) - ou_generic.density(x))) <= 1e-8
    assert ou_generic.weights.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.all(ou_generic.weights >= 0)


def test_ou_stationary_moments(ou_law, ou_generic):
    for law in (ou_law, ou_generic):
        assert law.expect(Y0**2) == pytest.approx(1.0, abs=1e-10)
        assert law.expect(Y0**4) == pytest.approx(3.0, abs=1e-10)
        assert law.expect(sx.const(2.5)) == pytest.approx(2.5, abs=1e-14)


def test_adaptive_path_agrees_with_rule():
    law = M.StationaryLaw(M.cubic_drift(1.0, 1.0))
    f = sx.exp(-Y0**2) * Y0**2 + sx.const(0.3)
    assert law.expect(f) == pytest.approx(law.expect(f, method="adaptive"), abs=1e-10)


def test_reference_point_does_not_change_stationary_law():
    base = M.cubic_drift(0.7, 1.1)
    shifted = M.model_from_mapping({"drift_expr": "-theta*x^3", "diffusion_expr": "gamma^(1/2)",
                                    "theta_dim": 1, "gamma_dim": 1, "domain": [-50, 60],
                                    "beta0": [0.7, 1.1]})
    assert shifted.reference_point == 5.0
    a, b = M.StationaryLaw(base), M.StationaryLaw(shifted)
    x = np.linspace(-2, 2, 21)
    assert np.max(np.abs(a.density(x) - b.density(x))) <= 1e-9


@pytest.mark.parametrize("k", [2, 3, 4])
def test_generator_has_zero_stationary_mean(ou_law, ou_generic, k):
    theta, s2 = 1.0, 2.0
    f = -theta * Y0 * k * Y0 ** (k - 1) + 0.5 * s2 * k * (k - 1) * Y0 ** (k - 2)
    for law in (ou_law, ou_generic):
        assert abs(law.expect(sx.simplify(f))) <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 4), st.integers(0, 4))
def test_expectation_is_linear(a, b, i, j):
    law = M.StationaryLaw(M.soft_linear_drift())
    f, g = sx.exp(-Y0**2 * 0.5) * Y0**i, Y0**j + sx.const(1.0)
    lhs = law.expect(sx.simplify(a * f + b * g))
    assert lhs == pytest.approx(a * law.expect(f) + b * law.expect(g), abs=1e-12)


def test_ou_transition_moments():
    assert M.ou_transition_moments(1.3, 0.0, 1.0, 2.0) == (1.3, 0.0)
    m, v = M.ou_transition_moments(1.0, 0.5, 1.0, 2.0)
    assert m == pytest.approx(0.60653, abs=1e-5)
    assert v == pytest.approx(0.63212, abs=1e-5)
    m, v = M.ou_transition_moments(1.0, 200.0, 1.0, 2.0)
    assert (m, v) == pytest.approx((0.0, 1.0))
    with pytest.raises(ValueError):
        M.ou_transition_moments(1.0, 0.5, -1.0, 2.0)


def test_diagnostics_pass_for_ou(ou):
    report = M.check_stationarity_diagnostics(ou)
    assert report["ok"] and report["sigma2_positive"]


def test_diagnostics_flag_explosive_ou():
    report = M.check_stationarity_diagnostics(M.ornstein_uhlenbeck(-1.0, 2.0))
    assert report["drift_direction"] is False
    assert report["ok"] is False


def test_explosive_ou_has_no_stationary_law():
    explosive = M.model_from_mapping({"drift_expr": "theta*x", "diffusion_expr": "gamma^(1/2)",
                                      "theta_dim": 1, "gamma_dim": 1, "beta0": [1.0, 2.0]})
    with pytest.raises(M.ModelAssumptionError):
        M.StationaryLaw(explosive)


def test_nonpositive_diffusion_rejected():
    with pytest.raises(M.ModelAssumptionError):
        M.model_from_mapping({"drift_expr": "-theta*x", "diffusion_expr": "gamma*x",
                              "theta_dim": 1, "gamma_dim": 1, "beta0": [1.0, 1.0]})


def test_model_file_round_trip(tmp_path):
    path = tmp_path / "m.yaml"
    path.write_text("name: cubic2\ndrift_expr: -theta*x^3\ndiffusion_expr: gamma^(1/2)\n"
                    "theta_dim: 1\ngamma_dim: 1\ndomain: [-inf, inf]\nbeta0: [1.0, 1.0]\n")
    m = M.load_model(path)
    assert sx.simplify(m.drift) == sx.simplify(M.cubic_drift().drift)
    assert m.sigma2 == sx.beta(1)
    bad = tmp_path / "bad.json"
    bad.write_text('{"drift_expr": "-x", "diffusion_expr": "1", "theta_dim": 0, '
                   '"gamma_dim": 0, "beta0": [], "colour": 1}')
    with pytest.raises(ValueError, match="colour"):
        M.load_model(bad)


def test_registry():
    assert M.get_model("ou", [2.0, 3.0]).beta0 == (2.0, 3.0)
    with pytest.raises(ValueError):
        M.get_model("heston")
    assert M.ornstein_uhlenbeck().drift == sx.simplify(-sx.beta(0) * Y1)
