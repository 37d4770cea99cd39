"""Cached analyses shared by several test modules (building one costs seconds)."""

from __future__ import annotations

import functools

from diffexpand.asymptotics import Analysis
from diffexpand.model import get_model
from diffexpand.moments import euler_score, ou_mle_score
from diffexpand.sampling import law_from_spec

LAWS = ("dirac:1", "exponential:1", "uniform:0,2")


@functools.lru_cache(maxsize=None)
def score(model: str, estimator: str, target: str, beta0: tuple = (1.0, 1.0)):
    m = get_model(model, list(beta0))
    return euler_score(m, target) if estimator == "euler" else ou_mle_score(m, target)


@functools.lru_cache(maxsize=None)
def analysis(model: str, estimator: str, target: str, law: str = "dirac:1", beta0: tuple = (1.0, 1.0)):
    return Analysis(score(model, estimator, target, beta0), law_from_spec(law, 1.0))


@functools.lru_cache(maxsize=None)
def omega(model: str, estimator: str, target: str, law: str = "dirac:1", beta0: tuple = (1.0, 1.0)):
    return analysis(model, estimator, target, law, beta0).omega()


def table_one(theta: float, s2: float, law: str) -> dict:
    """Closed-form OU cells: (bias coefficients, Omega coefficients from its base power)."""
    L = law_from_spec(law, 1.0)
    E1, E2, E3 = (L.moment(q) for q in (1, 2, 3))
    return {
        ("euler", "theta"): ([-theta**2 * E2 / (2 * E1)], 0, [2 * theta, -2 * theta**2 * E2 / E1]),
        ("euler", "sigma2"): ([-theta * s2 * E1, 2 / 3 * theta**2 * s2 * E2], 1,
                              [2 * s2**2 * E1, -4 * theta * s2**2 * E1**2]),
        ("mle", "theta"): ([0.0, 0.0], 0, [2 * theta, 0.0, 2 * theta**3 * E3 / (3 * E1)]),
        ("mle", "sigma2"): ([0.0, 0.0], 1, [2 * s2**2 * E1, 0.0]),
    }
