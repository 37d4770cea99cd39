"""Infinitesimal generator ``A``, the generalized generator ``Gamma`` and
conditional-moment expansions in the sampling scale ``eps``.

``A f = df/ddelta + mu(y1) df/dy1 + sigma^2(y1)/2 d2f/dy1^2`` with the drift
and diffusion bound at the true parameters.  ``Gamma f = Delta0 A f +
df/deps + sum_i df/dbeta_i * dbetabar_i/deps`` where the bias path
``betabar(eps) = beta0 + sum_k b_k eps^k`` is supplied by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from . import symexpr as sx
from .model import DiffusionModel
from .symexpr import DELTA, DELTA0, EPS, Y0, Y1, Expr

__all__ = [
    "GeneratorContext",
    "apply_A",
    "apply_Gamma",
    "iterate_Gamma",
    "conditional_moment_expansion",
    "base_point",
]


def _normalise(e) -> Expr:
    return sx.expand(sx.as_expr(e))


@dataclass(frozen=True)
class GeneratorContext:
    """Model plus the bias path of the estimated parameters.

    ``bias[k-1][i]`` is the coefficient of ``eps^k`` in ``betabar_i - beta0_i``;
    entries may be numbers or expressions (the bias solver uses placeholder
    symbols for the unknown order).
    """

    model: DiffusionModel
    bias: tuple[tuple[Expr, ...], ...] = ()
    size_cap: int = sx.DEFAULT_SIZE_CAP
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        d = self.model.dim
        rows = []
        for k, row in enumerate(self.bias, start=1):
            row = tuple(sx.as_expr(v) for v in row)
            if len(row) != d:
                raise ValueError(f"bias order {k} has {len(row)} entries, expected {d}")
            rows.append(row)
        object.__setattr__(self, "bias", tuple(rows))
        mu = self.model.at_true(self.model.drift)
        s2 = self.model.at_true(self.model.sigma2)
        object.__setattr__(self, "_mu", mu)
        object.__setattr__(self, "_half_s2", sx.simplify(0.5 * s2))
        rates = []
        for i in range(d):
            terms = [k * row[i] * EPS ** (k - 1) for k, row in enumerate(self.bias, start=1)]
            rates.append(_normalise(sx.add(*terms)) if terms else sx.ZERO)
        object.__setattr__(self, "_rates", tuple(rates))

    @classmethod
    def from_derivatives(cls, model: DiffusionModel, derivatives: Sequence[Sequence[float]], **kw):
        """Build from ``d^k betabar / deps^k`` at ``eps = 0`` for ``k = 1, 2, ...``."""
        bias = [[v / math.factorial(k) for v in row] for k, row in enumerate(derivatives, start=1)]
        return cls(model, tuple(tuple(r) for r in bias), **kw)

    def with_bias(self, bias) -> "GeneratorContext":
        return GeneratorContext(self.model, tuple(tuple(r) for r in bias), self.size_cap)

    @property
    def bias_rates(self) -> tuple[Expr, ...]:
        """``dbetabar_i/deps`` as expressions in ``eps``."""
        return self._rates

    def base(self, e: Expr) -> Expr:
        return base_point(e, self.model)


def base_point(e: Expr, model: DiffusionModel) -> Expr:
    """Evaluate at ``(y1, y0, delta, beta, eps) = (y0, y0, 0, beta0, 0)``."""
    mapping = {"y1": Y0, "delta": sx.ZERO, "eps": sx.ZERO}
    mapping.update(model.param_bindings())
    return _normalise(sx.substitute_many(e, mapping))


def apply_A(ctx: GeneratorContext, f) -> Expr:
    f = sx.as_expr(f)
    d1 = sx.differentiate(f, Y1)
    out = sx.differentiate(f, DELTA) + ctx._mu * d1 + ctx._half_s2 * sx.differentiate(d1, Y1)
    return sx.check_size(_normalise(out), ctx.size_cap, "generator A")


def apply_Gamma(ctx: GeneratorContext, f) -> Expr:
    f = sx.as_expr(f)
    terms = [DELTA0 * apply_A(ctx, f), sx.differentiate(f, EPS)]
    for i, rate in enumerate(ctx.bias_rates):
        if rate == sx.ZERO:
            continue
        name = f"beta[{i}]"
        if name in f.symbols:
            terms.append(sx.differentiate(f, name) * rate)
    return sx.check_size(_normalise(sx.add(*terms)), ctx.size_cap, "generator Gamma")


def iterate_Gamma(ctx: GeneratorContext, f, j: int) -> Expr:
    """``Gamma^j f``; intermediate iterates are cached on the context."""
    if j < 0:
        raise ValueError("iteration order must be non-negative")
    f = sx.as_expr(f)
    if j == 0:
        return f
    key = (f, j)
    hit = ctx._cache.get(key)
    if hit is not None:
        return hit
    prev = iterate_Gamma(ctx, f, j - 1)
    try:
        out = apply_Gamma(ctx, prev)
    except sx.ExpressionTooLargeError as exc:
        raise sx.ExpressionTooLargeError(f"{exc} at iteration order {j}") from None
    ctx._cache[key] = out
    return out


def conditional_moment_expansion(ctx: GeneratorContext, f, J: int) -> list[Expr]:
    """Coefficients ``c_0..c_J`` (expressions in ``y0`` and ``Delta0``) with
    ``E[f | Y0, Delta = eps Delta0] = sum_j eps^j c_j + O(eps^(J+1))``."""
    if J > 4:
        raise ValueError("conditional-moment expansions are limited to J <= 4")
    return [
        _normalise(ctx.base(iterate_Gamma(ctx, f, j)) * (1.0 / math.factorial(j)))
        for j in range(J + 1)
    ]
