"""Acceptance criteria, one pass/fail line each.

Each test records its outcome in ``RESULTS``; the terminal summary (see
conftest.py) prints one line per criterion.  Criteria 2, 3 and the Monte
Carlo half of 6 carry the ``montecarlo`` marker; deselecting them leaves
those lines reported as not run.

    pytest tests/test_acceptance.py -v              # everything
    pytest tests/test_acceptance.py -m "not montecarlo"
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from cases import LAWS, analysis, omega, score, table_one
from diffexpand import symexpr as sx
from diffexpand.asymptotics import (Analysis, mle_sigma2_third_order, ou_exact_bias, ou_exact_omega,
                                    ou_exact_T, ou_mle_theta_exact_omega)
from diffexpand.cli import main as cli_main
from diffexpand.model import StationaryLaw, get_model
from diffexpand.sampling import law_from_spec, replication_rng
from diffexpand.simlab import (StudyConfig, fit, monte_carlo_study, serial_covariance_sum,
                               simulate_general_paths, simulate_ou_path)

TITLES = {
    1: "OU table cells for three sampling laws",
    2: "Monte Carlo bias",
    3: "Monte Carlo variance bands",
    4: "order of accuracy against exact OU",
    5: "martingale detection and vanishing T",
    6: "r-function residual and T against long-run variance",
    7: "sampling-law sign claims",
    8: "oracle equivalences and fast-suite runtime",
}
PARTS = {6: ("r-function", "monte-carlo")}
RESULTS: dict[int, dict[str, tuple[bool, str]]] = {}
FAST_BUDGET = 120.0
GOLDEN = Path(__file__).parent / "golden"


def record(n: int, ok: bool, detail: str, part: str = "all") -> None:
    RESULTS.setdefault(n, {})[part] = (bool(ok), detail)
    print(f"criterion {n} [{part}]: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def summary_lines(fast_seconds: float) -> list[str]:
    lines = []
    for n, title in TITLES.items():
        got = RESULTS.get(n, {})
        parts = PARTS.get(n, ("all",))
        missing = [p for p in parts if p not in got]
        details = "; ".join(d for _, d in got.values())
        if n == 8 and got:
            fast_ok = fast_seconds < FAST_BUDGET
            details += f"; non-Monte-Carlo tests took {fast_seconds:.1f} s (budget {FAST_BUDGET:.0f} s)"
            ok = all(o for o, _ in got.values()) and fast_ok
        else:
            ok = all(o for o, _ in got.values())
        if not got:
            status = "NOT RUN"
        elif not ok:
            status = "FAIL"
        elif missing:
            status = "PARTIAL (not run: " + ", ".join(missing) + ")"
        else:
            status = "PASS"
        lines.append(f"{status:<8} criterion {n}: {title}" + (f" | {details}" if details else ""))
    return lines


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


# --------------------------------------------------------------------- 1


def test_criterion_1_table_cells():
    beta = (0.7, 1.3)
    worst, checked, bad = 0.0, 0, []
    for law in LAWS:
        for (est, tgt), (bias, base, om) in table_one(*beta, law).items():
            a = analysis("ou", est, tgt, law, beta)
            got_b = [float(v[0]) for v in a.bias(len(bias))]
            w = omega("ou", est, tgt, law, beta)
            got_o = [float(np.atleast_2d(w.coefficient(p))[0, 0]) for p in range(base, base + len(om))]
            for g, e in zip(got_b + got_o, bias + om):
                err = abs(g - e) if e == 0 else _rel(g, e)
                checked += 1
                worst = max(worst, err)
                if err > 1e-6 and not (e == 0 and abs(g) <= 1e-9):
                    bad.append(f"{law} {est} {tgt}: {g} vs {e}")
    record(1, not bad, f"{checked} coefficients, worst deviation {worst:.1e}" + (f", off: {bad}" if bad else ""))


# --------------------------------------------------------------------- 2 and 3


@pytest.fixture(scope="module")
def ou_studies():
    ou = get_model("ou")
    law = law_from_spec("dirac:1", 0.1)
    out = {}
    for est, tgt in [("euler", "theta"), ("euler", "sigma2"), ("mle", "theta"), ("mle", "sigma2")]:
        cfg = StudyConfig(ou, score("ou", est, tgt), law, 2000.0, 400, 20240601)
        out[est, tgt] = monte_carlo_study(cfg)
    return out


@pytest.mark.montecarlo
def test_criterion_2_monte_carlo_bias(ou_studies):
    targets = {("euler", "theta"): -0.05, ("euler", "sigma2"): -0.1 + 0.1**2 * 2 / 3,
               ("mle", "theta"): 0.0, ("mle", "sigma2"): 0.0}
    ok, parts = True, []
    for key, target in targets.items():
        res = ou_studies[key]
        z = (float(res.mean_bias[0]) - target) / float(res.bias_se[0])
        ok &= abs(z) <= 3 and not res.failures
        parts.append(f"{key[0]} {key[1]} bias {res.mean_bias[0]:+.4f} vs {target:+.4f} (z={z:+.2f})")
    record(2, ok, ", ".join(parts))


@pytest.mark.montecarlo
def test_criterion_3_monte_carlo_variance(ou_studies):
    targets = {("euler", "theta"): 1.8, ("mle", "theta"): 2.0, ("mle", "sigma2"): 0.2}
    ok, parts = True, []
    for key, target in targets.items():
        res = ou_studies[key]
        R = len(res.estimates)
        lo, hi = stats.chi2.ppf([0.025, 0.975], R) / R * target
        v = float(res.variance[0, 0])
        ok &= lo <= v <= hi
        parts.append(f"{key[0]} {key[1]} variance {v:.3f} in [{lo:.3f}, {hi:.3f}]")
    record(3, ok, ", ".join(parts))


# --------------------------------------------------------------------- 4


def test_criterion_4_order_of_accuracy():
    grid = [0.4, 0.2, 0.1, 0.05]
    ok, parts = True, []
    for law in LAWS:
        for est, tgt in [("euler", "sigma2"), ("mle", "theta")]:
            w = omega("ou", est, tgt, law)
            k = w.truncation_order
            mf = score("ou", est, tgt)
            res = []
            for e in grid:
                L = law_from_spec(law, e)
                exact = float(ou_exact_omega(mf, L)[0, 0])
                if est == "mle":
                    # second exact route: inverse Fisher information
                    assert _rel(exact, ou_mle_theta_exact_omega(1.0, 1.0, L)) < 1e-6
                res.append(abs(float(np.atleast_2d(w.value(e))[0, 0]) - exact))
            slope = float(np.polyfit(np.log(grid), np.log(res), 1)[0])
            ok &= slope >= k + 0.7
            parts.append(f"{law} {est} {tgt} slope {slope:.2f} (k={k})")
    record(4, ok, ", ".join(parts))


# --------------------------------------------------------------------- 5


def test_criterion_5_martingales():
    parts, ok = [], True
    qt = analysis("ou", "euler", "theta").qalpha()
    ok &= qt.is_martingale(0) and max(qt.norms[0]) < 1e-9
    parts.append(f"euler theta alpha={qt.alpha[0]}")
    qs = analysis("ou", "euler", "sigma2").qalpha()
    ok &= qs.alpha[0] == 3 and qs.norms[0][1] < 1e-9 and qs.norms[0][2] < 1e-9
    parts.append(f"euler sigma2 alpha={qs.alpha[0]} (c1, c2 norms {qs.norms[0][1]:.1e}, {qs.norms[0][2]:.1e})")
    for tgt in ("theta", "sigma2"):
        mf = score("ou", "mle", tgt)
        ok &= mf.martingale and analysis("ou", "mle", tgt).qalpha().is_martingale(0)
    parts.append("exact likelihood scores flagged martingale")
    worst = 0.0
    for est, tgt in [("euler", "theta"), ("euler", "sigma2"), ("mle", "theta"), ("mle", "sigma2")]:
        T = analysis("ou", est, tgt).T(1)
        worst = max(worst, max(float(np.max(np.abs(c))) for c in T.coeffs))
    ok &= worst <= 1e-12
    # independent check: exact lag sums vanish for the two pure martingales at the pseudo-true value
    law = law_from_spec("exponential:1", 0.1)
    exact = []
    for est, tgt in [("euler", "theta"), ("mle", "theta"), ("mle", "sigma2")]:
        mf = score("ou", est, tgt)
        exact.append(abs(float(ou_exact_T(mf, law, ou_exact_bias(mf, law))[0, 0])))
    ok &= max(exact) < 1e-8
    parts.append(f"expanded T max {worst:.1e}, exact T max {max(exact):.1e}")
    record(5, ok, ", ".join(parts))


# --------------------------------------------------------------------- 6


def test_criterion_6_r_function_residual():
    a = analysis("cubic", "euler", "sigma2")
    r, _ = a.rfunctions(0, with_next=False)
    x = np.linspace(-1.5, 1.5, 301)
    res = float(np.max(np.abs(r.generator_residual(x))))
    record(6, res <= 1e-6, f"max |A r + q| = {res:.1e} on [-1.5, 1.5]", part="r-function")


@pytest.mark.montecarlo
def test_criterion_6_T_against_long_run_variance():
    eps, n_obs, n_paths, batches, chunk = 0.05, 2000, 5000, 4, 500
    a = analysis("cubic", "euler", "sigma2")
    b = a.bias(2)
    s2bar = 1.0 + eps * float(b[0][0]) + eps**2 * float(b[1][0])
    T = a.T(2)
    alpha = int(a.qalpha().alpha[0])
    lead = eps ** alpha * float(np.atleast_2d(T.coefficient(alpha))[0, 0])
    mf = score("cubic", "euler", "sigma2")
    model = get_model("cubic")
    law = law_from_spec("dirac:1", eps)
    slaw = StationaryLaw(model)
    series = []
    for k in range(batches):
        dt, y = simulate_general_paths(model, law, n_obs, replication_rng(777, k), n_paths,
                                       substeps=32, slaw=slaw)
        for c in range(0, n_paths, chunk):
            h = mf.evaluate(y[c:c + chunk, 1:], y[c:c + chunk, :-1], dt[c:c + chunk], [s2bar], eps)[0]
            series.extend(h)
    center = float(np.mean(series))
    mc = float(serial_covariance_sum(series, 160, center=center)[0, 0])
    ok = abs(mc - lead) <= 0.15 * abs(lead)
    record(6, ok, f"T leading {lead:.5f} vs Monte Carlo {mc:.5f} ({100 * _rel(mc, lead):.1f}% off)",
           part="monte-carlo")


# --------------------------------------------------------------------- 7


def test_criterion_7_sign_claims():
    golden = json.loads((GOLDEN / "sign_claims.json").read_text())
    law = law_from_spec(golden["law"], 1.0)
    soft = mle_sigma2_third_order(get_model("soft_linear"), law)
    cubic = mle_sigma2_third_order(get_model("cubic"), law)
    ok = soft < 0 < cubic and _rel(soft, golden["soft_linear"]) < 1e-6 and _rel(cubic, golden["cubic"]) < 1e-8
    record(7, ok, f"soft_linear {soft:+.6f} (< 0), cubic {cubic:+.6f} (> 0), golden values reproduced")


# --------------------------------------------------------------------- 8


def test_criterion_8_oracles(tmp_path):
    parts, ok = [], True
    # finite-difference derivatives
    e = sx.parse("exp(-0.3*y1^2)*y1^3 + log(1 + y1^2)")
    d = sx.differentiate(e, "y1")
    x, h = 0.7, 1e-5
    fd = (sx.evaluate(e, {"y1": x + h}) - sx.evaluate(e, {"y1": x - h})) / (2 * h)
    ok &= _rel(float(sx.evaluate(d, {"y1": x})), float(fd)) < 1e-8
    parts.append("finite differences")
    # closed-form fit roots
    path = simulate_ou_path(1.0, 1.0, law_from_spec("exponential:1", 0.1), 300.0, replication_rng(5, 0))
    y0, y1, dt = path.y[:-1], path.y[1:], path.intervals
    th = fit(score("ou", "euler", "theta"), path, eps=0.1).beta[0]
    s2 = fit(score("ou", "euler", "sigma2"), path, eps=0.1).beta[0]
    ok &= _rel(th, -np.sum(y0 * (y1 - y0)) / np.sum(y0**2 * dt)) < 1e-9
    ok &= _rel(s2, np.mean((y1 - y0 + y0 * dt) ** 2 / dt)) < 1e-9
    parts.append("closed-form fit roots")
    # exact versus generic stationary-density paths through the whole expansion
    ou = get_model("ou")
    generic = Analysis(score("ou", "euler", "sigma2"), law_from_spec("uniform:0,2", 1.0),
                       StationaryLaw(ou, force_generic=True)).omega()
    fast = omega("ou", "euler", "sigma2", "uniform:0,2")
    diff = max(float(np.max(np.abs(np.atleast_2d(generic.coefficient(p)) - np.atleast_2d(fast.coefficient(p)))))
               for p in fast.powers())
    ok &= diff < 1e-7
    parts.append(f"generic density path agrees to {diff:.1e}")
    # geometric-sum T against the truncated lag sum
    mf = score("ou", "euler", "sigma2")
    for law in LAWS:
        L = law_from_spec(law, 0.5)
        ok &= _rel(float(ou_exact_T(mf, L, [0.9])[0, 0]), float(ou_exact_T(mf, L, [0.9], K_cap=5000)[0, 0])) < 1e-9
    parts.append("geometric T")
    # byte-deterministic outputs
    for sub in ("a", "b"):
        assert cli_main(["simulate", "--model", "cubic", "--eps", "0.1", "--T", "20", "--seed", "9",
                         "--out", str(tmp_path / sub)]) == 0
        assert cli_main(["expand", "--target", "sigma2", "--eps", "0.1,0.05", "--out", str(tmp_path / sub)]) == 0
    for name in ("observations.csv", "expansion_values.csv", "expansion_coefficients.csv"):
        ok &= (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    parts.append("byte-identical reruns")
    record(8, ok, ", ".join(parts))


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-q"]))
