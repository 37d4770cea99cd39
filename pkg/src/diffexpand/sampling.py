"""Laws of the base sampling interval ``Delta0`` and the ``Delta = eps * Delta0`` scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SamplingLaw",
    "SingularityError",
    "dirac",
    "exponential",
    "uniform",
    "law_from_spec",
    "replication_rng",
]


class SingularityError(ArithmeticError):
    """A negative power of Delta0 survived to the law expectation."""


@dataclass(frozen=True)
class SamplingLaw:
    """Distribution of ``Delta0`` together with the scale ``epsilon``.

    ``kind`` is one of ``"dirac"`` (``params=(value,)``), ``"exponential"``
    (``params=(rate,)``) or ``"uniform"`` (``params=(a, b)``).
    """

    kind: str
    params: tuple[float, ...]
    epsilon: float = 1.0

    def __post_init__(self):
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if self.kind not in ("dirac", "exponential", "uniform"):
            raise ValueError(f"unknown sampling law {self.kind!r}")
        expected = 2 if self.kind == "uniform" else 1
        if len(params) != expected:
            raise ValueError(f"{self.kind} law takes {expected} parameter(s), got {len(params)}")
        if self.kind == "uniform":
            a, b = params
            if not (0 <= a < b):
                raise ValueError(f"uniform law needs 0 <= a < b, got a={a}, b={b}")
        elif params[0] <= 0:
            raise ValueError(f"{self.kind} parameter must be positive, got {params[0]}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def with_epsilon(self, epsilon: float) -> "SamplingLaw":
        return SamplingLaw(self.kind, self.params, float(epsilon))

    def moment(self, q: int) -> float:
        """Exact ``E[Delta0**q]`` for integer ``q >= 0``."""
        if int(q) != q or q < 0:
            raise ValueError(f"moment order must be a non-negative integer, got {q}")
        q = int(q)
        if self.kind == "dirac":
            return self.params[0] ** q
        if self.kind == "exponential":
            return math.factorial(q) / self.params[0] ** q
        a, b = self.params
        return (b ** (q + 1) - a ** (q + 1)) / ((q + 1) * (b - a))

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def variance(self) -> float:
        return self.moment(2) - self.moment(1) ** 2

    def draw_shape(self, rng: np.random.Generator, size=None):
        """Draws of ``Delta0`` (no ``epsilon`` scaling)."""
        if self.kind == "dirac":
            return self.params[0] if size is None else np.full(size, self.params[0])
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.params[0], size)
        return rng.uniform(self.params[0], self.params[1], size)

    def draw_interval(self, rng: np.random.Generator, size=None):
        """Draws of ``Delta = epsilon * Delta0``."""
        return self.epsilon * self.draw_shape(rng, size)

    def expect_delta0_laurent(self, terms: Iterable[tuple[int, float]]) -> float:
        """``sum value * E[Delta0**q]`` over ``(q, value)`` pairs.

        A term with ``q < 0`` and a non-zero value raises
        :class:`SingularityError`: it means a ``1/delta`` singularity was not
        cancelled by the moment function.
        """
        total = 0.0
        for q, value in terms:
            if q < 0:
                if value != 0:
                    raise SingularityError(
                        f"residual Delta0^{q} term with coefficient {value!r}"
                    )
                continue
            total += value * self.moment(q)
        return total

    def exp_moment(self, rate: float) -> float:
        """``E[exp(-rate * Delta)]`` with ``Delta = epsilon * Delta0``."""
        t = rate * self.epsilon
        if self.kind == "dirac":
            return math.exp(-t * self.params[0])
        if self.kind == "exponential":
            lam = self.params[0]
            return lam / (lam + t)
        a, b = self.params
        if t == 0:
            return 1.0
        return (math.exp(-t * a) - math.exp(-t * b)) / (t * (b - a))

    def expect(self, func, *, points: int = 64) -> float:
        """``E[func(Delta0)]`` by Gauss quadrature against the law (exact for Dirac)."""
        if self.kind == "dirac":
            return float(func(self.params[0]))
        if self.kind == "exponential":
            x, w = np.polynomial.laguerre.laggauss(points)
            lam = self.params[0]
            return float(np.sum(w * func(x / lam)))
        a, b = self.params
        x, w = np.polynomial.legendre.leggauss(points)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return float(0.5 * np.sum(w * func(mid + half * x)))

    def spec(self) -> str:
        return f"{self.kind}:" + ",".join(f"{p:g}" for p in self.params)


def dirac(value: float = 1.0, epsilon: float = 1.0) -> SamplingLaw:
    return SamplingLaw("dirac", (value,), epsilon)


def exponential(rate: float = 1.0, epsilon: float = 1.0) -> SamplingLaw:
    return SamplingLaw("exponential", (rate,), epsilon)


def uniform(a: float = 0.0, b: float = 2.0, epsilon: float = 1.0) -> SamplingLaw:
    return SamplingLaw("uniform", (a, b), epsilon)


_ALIASES = {"exp": "exponential", "expo": "exponential", "unif": "uniform", "fixed": "dirac"}


def law_from_spec(spec, epsilon: float = 1.0) -> SamplingLaw:
    """Build a law from ``"dirac:1"``, ``"exponential:1"``, ``"uniform:0,2"``
    or a mapping ``{kind, params, epsilon}``."""
    if isinstance(spec, SamplingLaw):
        return spec.with_epsilon(epsilon)
    if isinstance(spec, dict):
        kind = _ALIASES.get(spec["kind"], spec["kind"])
        params = spec.get("params", [])
        if not isinstance(params, Sequence) or isinstance(params, str):
            params = [params]
        return SamplingLaw(kind, tuple(params), float(spec.get("epsilon", epsilon)))
    text = str(spec).strip()
    kind, _, rest = text.partition(":")
    kind = _ALIASES.get(kind.strip().lower(), kind.strip().lower())
    try:
        params = tuple(float(p) for p in rest.split(",")) if rest.strip() else ()
    except ValueError:
        raise ValueError(f"bad sampling-law parameters in {text!r}") from None
    if not params:
        params = {"dirac": (1.0,), "exponential": (1.0,), "uniform": (0.0, 2.0)}.get(kind, ())
    return SamplingLaw(kind, params, epsilon)


def replication_rng(master_seed: int, replication: int) -> np.random.Generator:
    """Independent generator for one replication, derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(replication)]))
