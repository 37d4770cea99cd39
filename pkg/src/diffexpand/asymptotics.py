"""Expansions in the sampling scale ``eps`` of the bias, the Jacobian ``D``,
the contemporaneous covariance ``S0``, the serial-covariance sum ``T`` and
the asymptotic variance ``Omega`` of estimators of a scalar diffusion.

Every expectation of a function of ``(Y1, Y0, Delta)`` is computed from

    E[F / delta^k | Y0, Delta0] = sum_j eps^(j-k) / j! * Delta0^(-k) (Gamma^j F)(base)

followed by the ``Delta0`` moments of the sampling law and a quadrature over
the stationary law of ``Y0``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import interpolate, optimize

from . import symexpr as sx
from .generator import GeneratorContext, base_point, iterate_Gamma
from .model import DiffusionModel, StationaryLaw
from .moments import MomentFunction
from .sampling import SamplingLaw, SingularityError
from .series import ExpansionSeries
from .symexpr import DELTA0, Y0, Y1, Expr

__all__ = [
    "DegenerateEstimatingEquationError",
    "ExpansionSeries",
    "QAlpha",
    "RFunction",
    "Analysis",
    "bias_expansion",
    "q_alpha",
    "r_function",
    "D_expansion",
    "S0_expansion",
    "T_expansion",
    "omega_expansion",
    "omega_closed_form",
    "mle_sigma2_third_order",
    "ou_exact_moments",
    "ou_exact_T",
    "ou_exact_bias",
    "ou_exact_omega",
    "ou_mle_theta_exact_omega",
    "ExpansionReport",
    "expansion_report",
]


class DegenerateEstimatingEquationError(ArithmeticError):
    """The bias equations are singular at the leading and the next order."""


# --------------------------------------------------------------------- expectations


class _Expectations:
    """``E_{Delta0, Y0}`` of expressions in ``y0`` and ``Delta0``."""

    def __init__(self, model: DiffusionModel, law: SamplingLaw, slaw: StationaryLaw, tol: float):
        self.model = model
        self.law = law
        self.slaw = slaw
        self.tol = tol

    def y0(self, e: Expr) -> float:
        return self.slaw.expect(e)

    def y0_values(self, e: Expr) -> np.ndarray:
        return _on_grid(e, self.slaw.nodes)

    def laurent(self, e: Expr) -> list[tuple[int, Expr]]:
        return sx.laurent_coefficients(sx.expand(e), DELTA0.name)

    def full(self, e: Expr, what: str = "") -> float:
        terms = [(q, self.y0(c)) for q, c in self.laurent(e)]
        return self._resolve(terms, what)

    def _resolve(self, terms, what: str) -> float:
        scale = max([1.0] + [abs(v) for _, v in terms])
        clean = []
        for q, v in terms:
            if q < 0:
                if abs(v) > self.tol * scale:
                    raise SingularityError(
                        f"residual Delta0^{q} term with coefficient {v:.3e}{' in ' + what if what else ''}"
                    )
                continue
            clean.append((q, v))
        return self.law.expect_delta0_laurent(clean)

    def polynomial(self, e: Expr, names: Sequence[str], what: str = "") -> dict[tuple[int, ...], float]:
        """Expectation of ``e`` as a polynomial in the placeholder symbols ``names``."""
        out: dict[tuple[int, ...], list] = {}
        for q, c in self.laurent(e):
            for mono, coef in _split_monomials(c, names):
                out.setdefault(mono, []).append((q, self.y0(coef)))
        return {mono: self._resolve(terms, what) for mono, terms in out.items()}

    def conditional(self, e: Expr, what: str = "") -> tuple[Expr, float]:
        """``E_{Delta0}[e]`` as an expression in ``y0``, and an L2 scale."""
        parts, scale = [], 0.0
        for q, c in self.laurent(e):
            norm = self.slaw.l2_norm(c)
            if q < 0:
                if norm > self.tol * max(1.0, scale + norm):
                    raise SingularityError(f"residual Delta0^{q} term{' in ' + what if what else ''}")
                continue
            mq = self.law.moment(q)
            scale += abs(mq) * norm
            parts.append(c * mq)
        return sx.expand(sx.add(*parts)) if parts else sx.ZERO, scale


def _on_grid(e: Expr, x: np.ndarray) -> np.ndarray:
    """Values of an expression in ``y0`` at ``x`` (constants broadcast)."""
    return np.broadcast_to(np.asarray(sx.evaluate(e, {"y0": x}), dtype=float), np.shape(x))


def _split_monomials(e: Expr, names: Sequence[str]) -> list[tuple[tuple[int, ...], Expr]]:
    items = [((), e)]
    for name in names:
        nxt = []
        for mono, c in items:
            for p, cc in sx.laurent_coefficients(c, name):
                if p < 0:
                    raise sx.NotPolynomialError(f"negative power of {name}")
                nxt.append((mono + (p,), cc))
        items = nxt
    return items


# --------------------------------------------------------------------- result types


@dataclass
class QAlpha:
    """Martingale-deviation order ``alpha_i`` and coefficients per component.

    ``coefficients[i][j]`` is the ``eps^j`` coefficient of ``E[h_i | Y0]``
    (an expression in ``y0``) for ``j <= scan``; ``alpha[i]`` is the first
    non-vanishing index (``math.inf`` for a martingale through the scan).
    """

    alpha: list[float]
    q0: list[Expr]
    q1: list[Expr]
    coefficients: list[list[Expr]]
    norms: list[list[float]]

    def is_martingale(self, i: int) -> bool:
        return math.isinf(self.alpha[i])


@dataclass
class RFunction:
    """Solution of ``A r = -q`` centred so that ``E[r(Y0)] = 0``.

    ``closed`` holds a polynomial expression when one exists; otherwise the
    first derivative ``u = r'`` is tabulated and higher derivatives follow
    from ``r^(m) = a_m + b_m u`` with ``a_m, b_m`` obtained symbolically from
    the differential equation.
    """

    q: Expr
    model: DiffusionModel
    closed: Expr | None = None
    grid: np.ndarray | None = None
    _u: object = None
    _r: object = None
    _ab: list = field(default_factory=list)
    zero: bool = False

    def derivatives(self, x: np.ndarray, order: int) -> np.ndarray:
        """Values of ``r, r', ..., r^(order)`` at ``x``; shape ``(order+1, len(x))``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros((order + 1, x.size))
        if self.zero:
            return out
        if self.closed is not None:
            e = self.closed
            for m in range(order + 1):
                out[m] = _on_grid(e, x)
                e = sx.expand(sx.differentiate(e, Y0))
            return out
        inside = (x >= self.grid[0]) & (x <= self.grid[-1])
        xi = x[inside]
        u = self._u(xi)
        out[0, inside] = self._r(xi)
        if order >= 1:
            out[1, inside] = u
        self._extend(order)
        for m in range(2, order + 1):
            a, b = self._ab[m]
            out[m, inside] = _on_grid(a, xi) + _on_grid(b, xi) * u
        return out

    def _extend(self, order: int) -> None:
        if not self._ab:
            mu = sx.substitute(self.model.at_true(self.model.drift), Y1, Y0)
            s2 = sx.substitute(self.model.at_true(self.model.sigma2), Y1, Y0)
            a2 = sx.expand(-2 * self.q / s2)
            b2 = sx.expand(-2 * mu / s2)
            self._ab = [None, (sx.ZERO, sx.ONE), (a2, b2)]
        a2, b2 = self._ab[2]
        while len(self._ab) <= order:
            a, b = self._ab[-1]
            na = sx.expand(sx.differentiate(a, Y0) + b * a2)
            nb = sx.expand(sx.differentiate(b, Y0) + b * b2)
            self._ab.append((na, nb))

    def __call__(self, x) -> np.ndarray:
        return self.derivatives(np.atleast_1d(x), 0)[0]

    def generator_residual(self, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
        """``A r + q`` at ``x`` with ``r''`` from a five-point difference of ``r'``."""
        x = np.asarray(x, dtype=float)
        d1 = lambda z: self.derivatives(z, 1)[1]  # noqa: E731
        du = (-d1(x + 2 * h) + 8 * d1(x + h) - 8 * d1(x - h) + d1(x - 2 * h)) / (12 * h)
        mu = self.model.drift_at(x)
        s2 = self.model.sigma2_at(x)
        qv = _on_grid(self.q, x)
        return mu * d1(x) + 0.5 * s2 * du + qv


# --------------------------------------------------------------------- r-function


def _polynomial_coefficients(e: Expr, name: str) -> dict[int, float] | None:
    try:
        terms = sx.laurent_coefficients(sx.expand(e), name)
    except sx.NotPolynomialError:
        return None
    out = {}
    for p, c in terms:
        if p < 0 or c.symbols:
            return None
        out[p] = float(sx.evaluate(c, {}))
    return out


def _grid_bounds(slaw: StationaryLaw) -> tuple[float, float]:
    if slaw.ou_variance is not None:
        sd = math.sqrt(slaw.ou_variance)
        return -9.0 * sd, 9.0 * sd
    return slaw.bounds


def r_function(q: Expr, model: DiffusionModel, slaw: StationaryLaw | None = None, *,
               tol: float = 1e-8, grid_points: int = 20001, method: str = "auto") -> RFunction:
    """Centred solution of ``A r = -q`` for ``q`` an expression in ``y0``."""
    slaw = slaw or StationaryLaw(model)
    q = sx.expand(q)
    mean_q = slaw.expect(q)
    if abs(mean_q) > tol * max(1.0, slaw.l2_norm(q)):
        raise ValueError(f"q is not centred: E[q] = {mean_q:.3e}")
    if q == sx.ZERO or slaw.l2_norm(q) == 0.0:
        return RFunction(q, model, zero=True)
    poly = _polynomial_coefficients(q, "y0") if method in ("auto", "closed") else None
    if poly is not None and model.is_ou():
        theta, s2 = model.beta0
        n = max(poly)
        coef = np.zeros(n + 1)
        rhs = np.array([-poly.get(k, 0.0) for k in range(n + 1)])
        # A y^k = -k theta y^k + s2/2 k (k-1) y^(k-2); solve top-down, constant left free
        for k in range(n, 0, -1):
            coef[k] = -rhs[k] / (k * theta)
            if k >= 2:
                rhs[k - 2] -= coef[k] * 0.5 * s2 * k * (k - 1)
        expr = sx.add(*[sx.const(c) * Y0**k for k, c in enumerate(coef) if k > 0 and c != 0.0])
        expr = sx.expand(expr)
        const = -slaw.expect(expr) if expr.symbols else -float(sx.evaluate(expr, {}))
        return RFunction(q, model, closed=sx.expand(expr + const))
    if method == "closed":
        raise ValueError("no closed-form r-function for this q and model")

    lo, hi = _grid_bounds(slaw)
    grid = np.linspace(lo, hi, grid_points)
    dens = slaw.density(grid)
    qv = _on_grid(q, grid)
    s2 = model.sigma2_at(grid)
    integ = interpolate.CubicSpline(grid, qv * dens).antiderivative()
    cdf = interpolate.CubicSpline(grid, dens).antiderivative()
    total_q, total_p = float(integ(hi)), float(cdf(hi))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        inner = integ(grid) - total_q * cdf(grid) / total_p
        u_vals = -2.0 * inner / (s2 * dens)
    u_vals = np.where(np.isfinite(u_vals), u_vals, 0.0)
    u_spline = interpolate.CubicSpline(grid, u_vals)
    r_raw = u_spline.antiderivative()
    nodes = slaw.nodes
    inside = (nodes >= lo) & (nodes <= hi)
    c2 = -float(np.dot(slaw.weights[inside], r_raw(nodes[inside])))
    return RFunction(q, model, grid=grid, _u=u_spline, _r=lambda x: r_raw(x) + c2)


# --------------------------------------------------------------------- analysis


def _placeholders(model: DiffusionModel, mf: MomentFunction) -> list[Expr]:
    return [sx.beta(model.dim + i) for i in range(mf.d)]


class Analysis:
    """Caches the pieces of the expansion for one (moment function, sampling law).

    The moment function's expansion form (``mf.for_expansion``) is used
    throughout.
    """

    def __init__(self, mf: MomentFunction, law: SamplingLaw, slaw: StationaryLaw | None = None,
                 *, tol: float = 1e-9, q_scan: int = 3):
        self.mf_input = mf
        self.mf = mf.for_expansion
        self.model = self.mf.model
        self.law = law
        self.slaw = slaw or StationaryLaw(self.model)
        self.tol = tol
        self.q_scan = q_scan
        self.ex = _Expectations(self.model, law, self.slaw, tol)
        self._bias: list[np.ndarray] = []
        self._bias_shift: int | None = None
        self._ctx_cache: dict[int, GeneratorContext] = {}
        self._qalpha: QAlpha | None = None
        self._r: dict[tuple[int, int], RFunction] = {}
        self._entries: dict = {}

    # parts ----------------------------------------------------------------------

    def row_parts(self, i: int) -> list[tuple[Expr, int]]:
        parts = [(self.mf.h_tilde[i], 0)]
        if self.mf.H[i] != sx.ZERO:
            parts.append((self.mf.H[i], 1))
        return parts

    def jac_parts(self, i: int, j: int) -> list[tuple[Expr, int]]:
        name = f"beta[{self.mf.target[j]}]"
        parts = [(sx.expand(sx.differentiate(self.mf.h_tilde[i], name)), 0)]
        if self.mf.H[i] != sx.ZERO:
            parts.append((sx.expand(sx.differentiate(self.mf.H[i], name)), 1))
        return [(F, k) for F, k in parts if F != sx.ZERO]

    def product_parts(self, i: int, j: int) -> list[tuple[Expr, int]]:
        ht, H = self.mf.h_tilde, self.mf.H
        parts = [(sx.expand(ht[i] * ht[j]), 0)]
        if H[i] != sx.ZERO or H[j] != sx.ZERO:
            parts.append((sx.expand(ht[i] * H[j] + H[i] * ht[j]), 1))
        if H[i] != sx.ZERO and H[j] != sx.ZERO:
            parts.append((sx.expand(H[i] * H[j]), 2))
        return [(F, k) for F, k in parts if F != sx.ZERO]

    # generator contexts -----------------------------------------------------------

    def _bias_rows(self, coeffs: Sequence[Sequence]) -> tuple[tuple, ...]:
        rows = []
        for c in coeffs:
            row = [0.0] * self.model.dim
            for k, idx in enumerate(self.mf.target):
                row[idx] = c[k]
            rows.append(tuple(row))
        return tuple(rows)

    def context(self, order: int) -> GeneratorContext:
        """Generator context with the bias path through ``eps^order``."""
        order = min(order, len(self._bias))
        ctx = self._ctx_cache.get(order)
        if ctx is None:
            ctx = GeneratorContext(self.model, self._bias_rows(self._bias[:order]))
            self._ctx_cache[order] = ctx
        return ctx

    def term(self, ctx: GeneratorContext, F: Expr, j: int, k: int) -> Expr:
        """``Delta0^(-k) (Gamma^j F)(base) / j!``."""
        g = base_point(iterate_Gamma(ctx, F, j), self.model)
        return sx.expand(g * (DELTA0 ** (-k) * (1.0 / math.factorial(j)))) if k else \
            sx.expand(g * (1.0 / math.factorial(j)))

    def coefficient_expr(self, ctx: GeneratorContext, parts, m: int) -> Expr:
        """Integrand (in ``y0``, ``Delta0``) of the ``eps^m`` coefficient of ``E[sum F / delta^k]``."""
        out = []
        for F, k in parts:
            j = m + k
            if j >= 0:
                out.append(self.term(ctx, F, j, k))
        return sx.expand(sx.add(*out)) if out else sx.ZERO

    # bias ---------------------------------------------------------------------------

    def bias(self, order: int) -> list[np.ndarray]:
        """Bias coefficients ``b_1..b_order`` (target-parameter vectors)."""
        if not self._bias:
            self._check_negative_orders()
        if self.mf.martingale:
            while len(self._bias) < order:
                self._bias.append(np.zeros(self.mf.d))
            self._ctx_cache.clear()
            return self._bias[:order]
        P = _placeholders(self.model, self.mf)
        names = [p.name for p in P]
        while len(self._bias) < order:
            K = len(self._bias) + 1
            ctx = GeneratorContext(self.model, self._bias_rows(list(self._bias) + [P]))
            if self._bias_shift is None:
                self._bias_shift = self._leading_shifts(ctx, names)
            system = [self.ex.polynomial(self.coefficient_expr(ctx, self.row_parts(i), K + s), names,
                                         f"bias order {K}") for i, s in enumerate(self._bias_shift)]
            self._bias.append(_solve_polynomial_system(system, self.mf.d, K))
        self._ctx_cache.clear()
        return self._bias[:order]

    def _check_negative_orders(self) -> None:
        """``E[h]`` must have no ``eps^-m`` terms (``H`` and its ``y1`` derivatives vanish at the base point)."""
        ctx = GeneratorContext(self.model)
        for i in range(self.mf.r):
            parts = self.row_parts(i)
            for m in range(-max(k for _, k in parts), 0):
                self.ex.conditional(self.coefficient_expr(ctx, parts, m), f"E[h_{i}] at eps^{m}")

    def _leading_shifts(self, ctx: GeneratorContext, names: list[str]) -> list[int]:
        """Per-row order escalation: rows whose ``E[dh_i/dbeta]`` vanishes at
        leading order are solved one order later (at most one escalation)."""
        d = self.mf.d

        def linear(m, context):
            system = [self.ex.polynomial(self.coefficient_expr(context, self.row_parts(i), m), names,
                                         f"bias order {m}") for i in range(self.mf.r)]
            return _linearise(system, d)

        M, c = linear(1, ctx)
        scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0, float(np.max(np.abs(c))))
        shifts = [int(np.max(np.abs(M[i])) <= 1e-9 * scale) for i in range(self.mf.r)]
        sv = np.linalg.svd(M, compute_uv=False)
        if not any(shifts) and sv.size and sv.min() > 1e-9 * scale:
            return shifts
        for i, s in enumerate(shifts):
            if s and abs(c[i]) > self.tol * scale:
                raise DegenerateEstimatingEquationError(
                    f"row {i} has a singular leading bias coefficient but its order-1 moment condition fails")
        M2, _ = linear(2, GeneratorContext(ctx.model, ctx.bias[:1]))
        combined = np.array([M2[i] if s else M[i] for i, s in enumerate(shifts)])
        sv2 = np.linalg.svd(combined, compute_uv=False)
        if not any(shifts) or not sv2.size or sv2.min() <= 1e-9 * max(1.0, float(np.max(np.abs(combined)))):
            raise DegenerateEstimatingEquationError(
                "bias equations are singular at the leading and the next order")
        return shifts

    # q and alpha ----------------------------------------------------------------------

    def conditional_coefficient(self, i: int, j: int) -> tuple[Expr, float]:
        """``eps^j`` coefficient of ``E[h_i | Y0]`` (zeroed below tolerance) and its L2 norm."""
        key = ("c", i, j)
        if key not in self._r:
            self.bias(1)
            shifts = self._bias_shift or [0] * self.mf.r
            # an escalated row's eps^j coefficient only involves b_1..b_(j-1)
            self.bias(j - shifts[i])
            ctx = self.context(len(self._bias))
            e, scale = self.ex.conditional(self.coefficient_expr(ctx, self.row_parts(i), j),
                                           f"E[h_{i} | Y0] at eps^{j}")
            norm = self.slaw.l2_norm(e)
            zero = norm <= self.tol * max(1.0, scale)
            self._r[key] = (sx.ZERO, 0.0) if zero else (e, norm)
        return self._r[key]

    def qalpha(self, with_next: bool = False) -> QAlpha:
        """Scan ``eps^0..eps^q_scan``; ``with_next`` also fills ``q1`` (one order further)."""
        if self._qalpha is None:
            coeffs, norms, alphas = [], [], []
            for i in range(self.mf.r):
                pairs = [self.conditional_coefficient(i, j) for j in range(self.q_scan + 1)]
                coeffs.append([e for e, _ in pairs])
                norms.append([n for _, n in pairs])
                alphas.append(next((j for j, (_, n) in enumerate(pairs) if n > 0.0), math.inf))
            q0 = [sx.ZERO if math.isinf(a) else coeffs[i][a] for i, a in enumerate(alphas)]
            self._qalpha = QAlpha(alphas, q0, [None] * self.mf.r, coeffs, norms)
        qa = self._qalpha
        if with_next:
            for i in range(self.mf.r):
                self.next_q(i)
        return qa

    def next_q(self, i: int) -> Expr:
        qa = self.qalpha()
        if qa.q1[i] is None:
            a = qa.alpha[i]
            qa.q1[i] = sx.ZERO if math.isinf(a) else self.conditional_coefficient(i, a + 1)[0]
        return qa.q1[i]

    def rfunctions(self, i: int, with_next: bool = True) -> tuple[RFunction, "_ShiftedR | None"]:
        """``(r_lead, r_next)`` with ``r_i = r_lead + eps r_next + O(eps^2)``."""
        qa = self.qalpha()
        if (i, 0) not in self._r:
            self._r[(i, 0)] = r_function(qa.q0[i], self.model, self.slaw)
        if with_next and (i, 1) not in self._r:
            ratio = self.law.moment(2) / self.law.moment(1)
            r1 = r_function(self.next_q(i), self.model, self.slaw)
            self._r[(i, 1)] = _ShiftedR(r1, qa.q0[i], 0.5 * ratio)
        return self._r[(i, 0)], self._r.get((i, 1))

    # D, S0, T ---------------------------------------------------------------------------

    def _entry(self, label: str, parts, i: int, j: int, m: int) -> float:
        """``eps^m`` coefficient of ``E[sum F / delta^k]`` at the pseudo-true path.

        By the singularity conditions the ``eps^m`` coefficient only involves
        ``b_1..b_m``.
        """
        key = (label, i, j, m)
        hit = self._entries.get(key)
        if hit is not None:
            return hit
        if not parts:
            self._entries[key] = 0.0
            return 0.0
        self.bias(max(m, 1))
        ctx = self.context(len(self._bias))
        if (label, i, j, "checked") not in self._entries:
            kmax = max(k for _, k in parts)
            for mm in range(-kmax, 0):
                e = self.coefficient_expr(ctx, parts, mm)
                terms = [(q, self.ex.y0(c)) for q, c in self.ex.laurent(e)]
                val_scale = max([1.0] + [abs(v) for _, v in terms])
                for q, v in terms:
                    if abs(v) > self.tol * val_scale * 10 and abs(v) > self.tol:
                        raise SingularityError(f"{label}[{i},{j}] has a non-vanishing eps^{mm} term")
            self._entries[(label, i, j, "checked")] = True
        val = self.ex.full(self.coefficient_expr(ctx, parts, m), f"{label}[{i},{j}] eps^{m}")
        self._entries[key] = val
        return val

    def D_entry(self, i: int, j: int, m: int) -> float:
        return self._entry("D", self.jac_parts(i, j), i, j, m)

    def S0_entry(self, i: int, j: int, m: int) -> float:
        if i > j:
            i, j = j, i
        return self._entry("S0", self.product_parts(i, j), i, j, m)

    def D(self, max_power: int) -> ExpansionSeries:
        """``D`` with every entry through ``eps^max_power``."""
        coeffs = [np.array([[self.D_entry(i, j, m) for j in range(self.mf.d)] for i in range(self.mf.r)])
                  for m in range(max_power + 1)]
        return ExpansionSeries(0, tuple(coeffs), max_power + 1)

    def S0(self, max_power: int) -> ExpansionSeries:
        coeffs = [np.array([[self.S0_entry(i, j, m) for j in range(self.mf.r)] for i in range(self.mf.r)])
                  for m in range(max_power + 1)]
        return ExpansionSeries(0, tuple(coeffs), max_power + 1)

    def _h_times_r(self, i: int, r: "RFunction | _ShiftedR", max_power: int, tag) -> list[float]:
        """Coefficients ``m = 0..max_power`` of ``E[h_i(Y1, Y0, Delta) r(Y1)]``.

        ``r(Y1)`` is replaced by its Taylor polynomial around ``y0``; the
        ``eps^m`` term needs the powers ``(Y1 - Y0)^l`` with ``l <= 2(m + k)``.
        """
        out = []
        for m in range(max_power + 1):
            key = ("hr", i, tag, m)
            if key in self._entries:
                out.append(self._entries[key])
                continue
            self.bias(max(m, 1))
            ctx = self.context(len(self._bias))
            total = 0.0
            for F, k in self.row_parts(i):
                j = m + k
                for ell in range(0, 2 * j + 1):
                    basis = (Y1 - Y0) ** ell * (1.0 / math.factorial(ell))
                    g = self.term(ctx, sx.expand(F * basis), j, k)
                    if g == sx.ZERO:
                        continue
                    deriv = r.derivatives(self.slaw.nodes, ell)[ell]
                    for q, c in self.ex.laurent(g):
                        v = float(np.dot(self.slaw.weights, self.ex.y0_values(c) * deriv))
                        if q < 0:
                            if abs(v) > self.tol * max(1.0, abs(total)):
                                raise SingularityError(f"residual Delta0^{q} term in E[h r]")
                            continue
                        total += v * self.law.moment(q)
            self._entries[key] = total
            out.append(total)
        return out

    def T_available(self, i: int, j: int) -> int | None:
        """Highest power of ``eps`` to which ``T_ij`` is known (``None``: zero at all orders)."""
        qa = self.qalpha()
        orders = [int(qa.alpha[k]) + 1 for k in (i, j) if not math.isinf(qa.alpha[k])]
        return min(orders) if orders else None

    def T_entry(self, i: int, j: int, max_power: int) -> list[float]:
        """Coefficients of ``eps^0..eps^max_power`` of ``T_ij``."""
        qa = self.qalpha()
        out = [0.0] * (max_power + 1)
        avail = self.T_available(i, j)
        if avail is None:
            return out
        if max_power > avail:
            raise ValueError(f"T[{i},{j}] is only known through eps^{avail}")
        mean = self.law.moment(1)
        pairs = [(i, j), (j, i)]
        for a, b in pairs:
            ab = qa.alpha[b]
            if math.isinf(ab):
                continue
            ab = int(ab)
            n_terms = max_power - (ab - 1) + 1
            if n_terms <= 0:
                continue
            r_lead, r_next = self.rfunctions(b, with_next=n_terms >= 2)
            lead = self._h_times_r(a, r_lead, n_terms - 1, (b, 0))
            nxt = self._h_times_r(a, r_next, n_terms - 2, (b, 1)) if n_terms >= 2 else []
            for m in range(n_terms):
                p = ab - 1 + m
                if p >= 0:
                    out[p] += (lead[m] + (nxt[m - 1] if m >= 1 else 0.0)) / mean
        return out

    def T(self, max_power: int) -> ExpansionSeries:
        """``T`` through ``eps^max_power``, lowered to what the r-functions support."""
        r = self.mf.r
        avail = [self.T_available(i, j) for i in range(r) for j in range(r)]
        known = [a for a in avail if a is not None]
        top = min([max_power] + known)
        C = np.zeros((top + 1, r, r))
        for i in range(r):
            for j in range(i, r):
                vals = self.T_entry(i, j, top)
                C[:, i, j] = vals
                C[:, j, i] = vals
        return ExpansionSeries(0, tuple(C), top + 1)

    # Omega ------------------------------------------------------------------------------------

    def default_order(self) -> int:
        """Error order of ``Omega``: terms through ``eps^2`` are kept."""
        return 3

    def row_orders(self) -> list[int]:
        """Leading power of each row of ``D``."""
        v = []
        for i in range(self.mf.r):
            p = next((m for m in range(3) if any(abs(self.D_entry(i, j, m)) > 0.0 for j in range(self.mf.d))),
                     None)
            if p is None:
                raise np.linalg.LinAlgError(f"row {i} of D vanishes through eps^2")
            v.append(p)
        return v

    def omega(self, error_order: int | None = None, include_T: bool = True) -> ExpansionSeries:
        """``Omega`` built from row-rescaled ``D`` and ``S`` whose entries are
        computed only to the powers that reach the requested error order."""
        E = self.default_order() if error_order is None else error_order
        r, d = self.mf.r, self.mf.d
        v = self.row_orders()
        b_ls = -max(v)
        if include_T:
            for i in range(r):
                for j in range(r):
                    a = self.T_available(i, j)
                    if a is not None:
                        E = min(E, a + 2 - v[i] - v[j])
        n_d = E - 1 - b_ls
        LD = [np.array([[self.D_entry(i, j, p + v[i]) for j in range(d)] for i in range(r)])
              for p in range(n_d)]
        T_cache = {}
        LS = []
        for p in range(b_ls, E - 1):
            C = np.zeros((r, r))
            for i in range(r):
                for j in range(r):
                    m = p + v[i] + v[j]
                    if m < 0:
                        continue
                    C[i, j] = self.S0_entry(i, j, m)
                    if include_T and self.T_available(i, j) is not None:
                        top = E - 2 + v[i] + v[j]
                        if (i, j) not in T_cache:
                            T_cache[(i, j)] = self.T_entry(min(i, j), max(i, j), top)
                        C[i, j] += T_cache[(i, j)][m]
            LS.append(C)
        LD_s = ExpansionSeries(0, tuple(LD), n_d)
        LS_s = ExpansionSeries(b_ls, tuple(LS), E - 1)
        inv = LD_s.inverse()
        out = (inv @ LS_s @ inv.T).shift(1).scale(self.law.moment(1))
        return ExpansionSeries(out.base_power, tuple(0.5 * (c + c.T) for c in out.coeffs),
                               out.error_order).leading(1e-12)


class _ShiftedR:
    """``r + c q`` as an r-function-like object."""

    def __init__(self, r: RFunction, q: Expr, c: float):
        self.r, self.q, self.c = r, q, c

    def derivatives(self, x, order):
        out = self.r.derivatives(x, order)
        e = self.q
        for m in range(order + 1):
            out[m] = out[m] + self.c * _on_grid(e, x)
            e = sx.expand(sx.differentiate(e, Y0))
        return out


def _linearise(system, d):
    r = len(system)
    M = np.zeros((r, d))
    c = np.zeros(r)
    for i, poly in enumerate(system):
        for mono, v in poly.items():
            deg = sum(mono)
            if deg == 0:
                c[i] += v
            elif deg == 1:
                M[i, mono.index(1)] += v
    return M, c


def _solve_polynomial_system(system, d: int, order: int) -> np.ndarray:
    M, c = _linearise(system, d)
    sol, *_ = np.linalg.lstsq(M, -c, rcond=None)
    nonlinear = any(sum(mono) > 1 and abs(v) > 0 for poly in system for mono, v in poly.items())
    if not nonlinear:
        return sol

    def f(x):
        return np.array([sum(v * np.prod(np.power(x, mono)) for mono, v in poly.items()) for poly in system])

    root = optimize.fsolve(f, sol, full_output=True, xtol=1e-14)
    if root[2] != 1:
        raise DegenerateEstimatingEquationError(f"bias equations at order {order} did not converge")
    return root[0]


def omega_from_series(D: ExpansionSeries, S: ExpansionSeries, law: SamplingLaw) -> ExpansionSeries:
    """``eps E[Delta0] D^-1 S D^-T`` with rows of ``D`` rescaled by their leading powers."""
    D, S = D.leading(1e-12), S.leading(1e-12)
    v = []
    for i in range(D.shape[0]):
        p = next((p for p in D.powers()
                  if np.max(np.abs(np.atleast_2d(D.coefficient(p))[i])) > 0.0), None)
        if p is None:
            raise np.linalg.LinAlgError(f"row {i} of D vanishes at every computed order")
        v.append(p)
    neg = [-p for p in v]
    LD = D.entry_shift(neg, [0] * D.shape[1]).leading(1e-12)
    LS = S.entry_shift(neg, neg).leading(1e-12)
    inv = LD.inverse()
    out = (inv @ LS @ inv.T).shift(1).scale(law.moment(1))
    return ExpansionSeries(out.base_power, tuple(0.5 * (c + c.T) for c in out.coeffs), out.error_order).leading()


# --------------------------------------------------------------------- public API


def _analysis(mf: MomentFunction, law: SamplingLaw, slaw=None) -> Analysis:
    return Analysis(mf, law, slaw)


def bias_expansion(mf: MomentFunction, model: DiffusionModel | None = None, law: SamplingLaw | None = None,
                   Q: int = 2, *, analysis: Analysis | None = None) -> ExpansionSeries:
    """``betabar - beta0`` through ``eps^Q`` as a column-vector series over the targets."""
    an = analysis or _analysis(mf, law)
    b = an.bias(Q)
    return ExpansionSeries(1, tuple(np.asarray(v).reshape(-1, 1) for v in b), Q + 1)


def q_alpha(mf: MomentFunction, model: DiffusionModel | None = None, law: SamplingLaw | None = None,
            *, analysis: Analysis | None = None) -> QAlpha:
    an = analysis or _analysis(mf, law)
    return an.qalpha(with_next=True)


def D_expansion(mf, model=None, law=None, max_power: int = 2, *, analysis=None) -> ExpansionSeries:
    an = analysis or _analysis(mf, law)
    return an.D(max_power)


def S0_expansion(mf, model=None, law=None, max_power: int = 2, *, analysis=None) -> ExpansionSeries:
    an = analysis or _analysis(mf, law)
    return an.S0(max_power)


def T_expansion(mf, model=None, law=None, qalpha=None, rfuncs=None, max_power: int = 2, *,
                analysis=None) -> ExpansionSeries:
    an = analysis or _analysis(mf, law)
    if qalpha is not None:
        an._qalpha = qalpha
    return an.T(max_power)


def omega_expansion(D: ExpansionSeries, S: ExpansionSeries, law: SamplingLaw, case: str = "auto") -> ExpansionSeries:
    """Asymptotic variance series from ``D`` and ``S = S0 + T``.

    ``case`` ("theta-only", "gamma-only", "joint") asserts the leading-power
    pattern; "auto" skips the check.
    """
    _check_case(D, S, case)
    return omega_from_series(D, S, law)


def _lead_power(s: ExpansionSeries, i: int, j: int) -> int | None:
    for p in s.powers():
        if abs(np.atleast_2d(s.coefficient(p))[i, j]) > 0.0:
            return p
    return None


def _check_case(D: ExpansionSeries, S: ExpansionSeries, case: str) -> None:
    if case == "auto":
        return
    expected = {"theta-only": (1, 1), "gamma-only": (0, 0)}
    if case in expected:
        if D.shape != (1, 1):
            raise ValueError(f"case {case!r} needs scalar series")
        got = (_lead_power(D, 0, 0), _lead_power(S, 0, 0))
        if got != expected[case]:
            raise ValueError(f"case {case!r} expects D, S to start at eps^{expected[case]}, got eps^{got}")
        return
    if case == "joint":
        if D.shape != (2, 2):
            raise ValueError("joint case needs 2x2 series")
        if _lead_power(D, 0, 0) != 1 or _lead_power(D, 1, 1) != 0 or _lead_power(S, 0, 0) != 1 \
                or _lead_power(S, 1, 1) != 0:
            raise ValueError("joint case expects the theta block at eps^1 and the gamma block at eps^0")
        return
    raise ValueError(f"unknown case {case!r}")


def omega_closed_form(D: ExpansionSeries, S: ExpansionSeries, law: SamplingLaw, case: str) -> ExpansionSeries:
    """Scalar/2x2 closed formulas for the leading terms of ``Omega``."""
    _check_case(D, S, case)
    m1 = law.moment(1)
    if case == "theta-only":
        d1, d2, d3 = (D.coefficient(p) for p in (1, 2, 3))
        s1, s2, s3 = (S.coefficient(p) for p in (1, 2, 3))
        w0 = m1 * s1 / d1**2
        w1 = m1 * (d1 * s2 - 2 * d2 * s1) / d1**3
        w2 = m1 * (d1**2 * s3 - 2 * d1 * d2 * s2 + 3 * d2**2 * s1 - 2 * d1 * d3 * s1) / d1**4
        return ExpansionSeries.scalar(0, [w0, w1, w2], min(D.error_order, S.error_order) - 1)
    if case == "gamma-only":
        d0, d1 = D.coefficient(0), D.coefficient(1)
        s0, s1 = S.coefficient(0), S.coefficient(1)
        w1 = m1 * s0 / d0**2
        w2 = m1 * (d0 * s1 - 2 * d1 * s0) / d0**3
        terms = [w1, w2]
        if D.error_order > 2 and S.error_order > 2:
            d2, s2 = D.coefficient(2), S.coefficient(2)
            terms.append(m1 * (d0**2 * s2 - 2 * d0 * d1 * s1 + 3 * d1**2 * s0 - 2 * d0 * d2 * s0) / d0**4)
        return ExpansionSeries.scalar(1, terms, 1 + len(terms))
    # joint
    C = lambda s, p, i, j: float(np.atleast_2d(s.coefficient(p))[i, j])  # noqa: E731
    d1tt, d2tt = C(D, 1, 0, 0), C(D, 2, 0, 0)
    d0gg, d1gg = C(D, 0, 1, 1), C(D, 1, 1, 1)
    s1tt, s2tt = C(S, 1, 0, 0), C(S, 2, 0, 0)
    s1tg = C(S, 1, 0, 1)
    s0gg, s1gg = C(S, 0, 1, 1), C(S, 1, 1, 1)
    w0tt = m1 * s1tt / d1tt**2
    w1tt = m1 * (d1tt * s2tt - 2 * d2tt * s1tt) / d1tt**3
    w1tg = m1 * s1tg / (d1tt * d0gg)
    w1gg = m1 * s0gg / d0gg**2
    w2gg = m1 * (d0gg * s1gg - 2 * d1gg * s0gg) / d0gg**3
    return {"theta-theta": (w0tt, w1tt), "theta-gamma": (w1tg,), "gamma-gamma": (w1gg, w2gg)}


def mle_sigma2_third_order(model: DiffusionModel, law: SamplingLaw, slaw: StationaryLaw | None = None) -> float:
    """``eps^3`` coefficient of the exact-likelihood ``Omega_{sigma^2}`` for ``sigma^2 = gamma`` constant:
    ``-(1/3) sigma0^6 E[Delta0] E[Delta0^2] E[mu'''(Y0)]``."""
    if model.gamma_dim != 1 or "y1" in model.sigma2.symbols:
        raise ValueError("needs a constant diffusion sigma^2 = gamma")
    slaw = slaw or StationaryLaw(model)
    mu = sx.substitute(model.at_true(model.drift), Y1, Y0)
    d3 = sx.expand(sx.differentiate(sx.differentiate(sx.differentiate(mu, Y0), Y0), Y0))
    s2 = float(sx.evaluate(model.at_true(model.sigma2), {}))
    return -(1.0 / 3.0) * s2**3 * law.moment(1) * law.moment(2) * slaw.expect(d3)


# --------------------------------------------------------------------- OU oracles


def _ou_grid(model: DiffusionModel, law: SamplingLaw, n_state: int = 48, n_interval: int = 64):
    theta, s2 = model.beta0
    sd = math.sqrt(s2 / (2 * theta))
    t, w = np.polynomial.hermite.hermgauss(n_state)
    y0 = math.sqrt(2) * sd * t
    w0 = w / math.sqrt(math.pi)
    if law.kind == "dirac":
        d0, wd = np.array([law.params[0]]), np.array([1.0])
    elif law.kind == "exponential":
        x, wx = np.polynomial.laguerre.laggauss(n_interval)
        d0, wd = x / law.params[0], wx
    else:
        a, b = law.params
        x, wx = np.polynomial.legendre.leggauss(n_interval)
        d0, wd = 0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * wx
    dt = law.epsilon * d0
    Y0g, DTg, Z = np.meshgrid(y0, dt, t, indexing="ij")
    W = np.einsum("i,j,k->ijk", w0, wd, w / math.sqrt(math.pi))
    mean = np.exp(-theta * DTg) * Y0g
    var = -np.expm1(-2 * theta * DTg) * s2 / (2 * theta)
    Y1g = mean + np.sqrt(2 * var) * Z
    return Y1g.ravel(), Y0g.ravel(), DTg.ravel(), W.ravel()


def ou_exact_moments(mf: MomentFunction, law: SamplingLaw, beta: Sequence[float] | None = None, *,
                     n_state: int = 48, n_interval: int = 64):
    """``(E[h], E[dh/dbeta], E[h h'])`` under the exact OU transition at target values ``beta``.

    Gauss-Hermite over ``Y0`` and ``Y1 | Y0, Delta``; Gauss quadrature
    against the law of ``Delta0``.
    """
    model = mf.model
    if not model.is_ou():
        raise ValueError("exact moments need the OU model")
    y1, y0, dt, w = _ou_grid(model, law, n_state, n_interval)
    beta = [model.beta0[i] for i in mf.target] if beta is None else beta
    h = mf.evaluate(y1, y0, dt, beta, law.epsilon)
    J = mf.evaluate_jacobian(y1, y0, dt, beta, law.epsilon)
    return h @ w, J @ w, (h * w) @ h.T


def ou_exact_bias(mf: MomentFunction, law: SamplingLaw) -> np.ndarray:
    """Exact pseudo-true target parameters solving ``E[h(beta)] = 0``."""
    start = np.array([mf.model.beta0[i] for i in mf.target])
    y1, y0, dt, w = _ou_grid(mf.model, law)
    f = lambda b: mf.evaluate(y1, y0, dt, b, law.epsilon) @ w  # noqa: E731
    sol = optimize.root(f, start, tol=1e-13)
    if np.max(np.abs(f(sol.x))) > 1e-11:
        raise ArithmeticError(f"exact pseudo-true value not found: {sol.message}")
    return sol.x


def ou_exact_T(mf: MomentFunction, law: SamplingLaw, beta: Sequence[float] | None = None, *,
               K_cap: int | None = None, n_state: int = 48) -> np.ndarray:
    """Exact serial-covariance sum ``T = sum_{k>=1} (Cov(h_1, h_{1+k}) + transpose)`` for OU.

    Uses that ``E[h | Y0 = y]`` is a quadratic ``c0 + c1 y + c2 y^2`` and
    ``E[Y_k^2 | Y_1] = Y_1^2 rho^(k-1) + s (1 - rho^(k-1))`` with
    ``rho = E[exp(-2 theta Delta)]``, ``s = sigma^2/(2 theta)``.  With
    ``K_cap`` the geometric series is summed term by term up to ``K_cap``
    lags (stopping early once terms fall below 1e-14).
    """
    model = mf.model
    theta, s2 = model.beta0
    beta = [model.beta0[i] for i in mf.target] if beta is None else beta
    rho2 = law.exp_moment(2 * theta)
    rho1 = law.exp_moment(theta)
    if not (rho2 < 1 and rho1 < 1):
        raise ValueError("geometric ratio must be below one")
    y1, y0, dt, w = _ou_grid(model, law, n_state)
    h = mf.evaluate(y1, y0, dt, beta, law.epsilon)
    # conditional mean of h given Y0 on the state nodes
    n_dt = 1 if law.kind == "dirac" else 64
    shape = (n_state, n_dt, -1)
    wr = w.reshape(shape)
    ys = y0.reshape(shape)[:, 0, 0]
    g = np.einsum("rijk,ijk->ri", h.reshape((h.shape[0],) + wr.shape), wr) / wr.sum(axis=(1, 2))
    V = np.vander(ys, 5, increasing=True)
    coefs, *_ = np.linalg.lstsq(V, g.T, rcond=None)
    fitted = V @ coefs
    if np.max(np.abs(coefs[3:])) > 1e-8 * max(1.0, np.max(np.abs(coefs))) or \
            np.max(np.abs(fitted - g.T)) > 1e-8 * max(1.0, np.max(np.abs(g))):
        raise ValueError("conditional mean of h is not quadratic in the state")
    c1, c2 = coefs[1], coefs[2]
    # covariances with Y1 and Y1^2 (stationary mean 0, variance s)
    Eh_y = (h * w) @ y1
    Eh_y2 = (h * w) @ (y1**2 - s2 / (2 * theta))
    if K_cap is None:
        lag_sum = np.outer(Eh_y, c1) / (1 - rho1) + np.outer(Eh_y2, c2) / (1 - rho2)
    else:
        lag_sum = np.zeros((h.shape[0], h.shape[0]))
        for k in range(1, K_cap + 1):
            term = np.outer(Eh_y, c1) * rho1 ** (k - 1) + np.outer(Eh_y2, c2) * rho2 ** (k - 1)
            lag_sum += term
            if np.max(np.abs(term)) < 1e-14:
                break
    return lag_sum + lag_sum.T


def ou_exact_omega(mf: MomentFunction, law: SamplingLaw) -> np.ndarray:
    """Exact asymptotic variance per unit time at the exact pseudo-true value."""
    bbar = ou_exact_bias(mf, law)
    _, D, S0 = ou_exact_moments(mf, law, bbar)
    T = ou_exact_T(mf, law, bbar)
    Dinv = np.linalg.inv(D)
    return law.epsilon * law.moment(1) * Dinv @ (S0 + T) @ Dinv.T


def ou_mle_theta_exact_omega(theta: float, sigma2: float, law: SamplingLaw) -> float:
    """``eps E[Delta0] / E[I(eps Delta0)]`` with ``I`` the per-observation Fisher information for theta."""

    def info(d0):
        delta = law.epsilon * np.asarray(d0, dtype=float)
        x = delta * theta
        v = -np.expm1(-2 * x) * sigma2 / (2 * theta)
        dlogv = 2 * delta * np.exp(-2 * x) / (-np.expm1(-2 * x)) - 1.0 / theta
        return delta**2 * np.exp(-2 * x) * sigma2 / (2 * theta * v) + 0.5 * dlogv**2

    return law.epsilon * law.moment(1) / law.expect(info)


# --------------------------------------------------------------------- report

REPORT_COLUMNS = ("quantity", "i", "j", "power", "coefficient", "error_order")
EVALUATION_COLUMNS = ("quantity", "i", "j", "eps", "value", "error_order")


@dataclass
class ExpansionReport:
    """Series coefficients per quantity plus their values on an ``eps`` grid."""

    series: dict[str, ExpansionSeries]
    alpha: list[float]
    eps_grid: tuple[float, ...]

    def coefficient_rows(self) -> list[dict]:
        rows = []
        for name, s in self.series.items():
            for row in s.to_rows(name):
                row["error_order"] = s.error_order
                rows.append(row)
        return rows

    def evaluation_rows(self) -> list[dict]:
        rows = []
        for name, s in self.series.items():
            for eps in self.eps_grid:
                val = np.atleast_2d(s.value(eps))
                for (i, j), v in np.ndenumerate(val):
                    rows.append({"quantity": name, "i": i, "j": j, "eps": eps, "value": float(v),
                                 "error_order": s.error_order})
        return rows

    def table(self) -> str:
        lines = [f"{'quantity':<10} {'i':>2} {'j':>2} {'power':>5} {'coefficient':>18}  error"]
        for r in self.coefficient_rows():
            lines.append(f"{r['quantity']:<10} {r['i']:>2} {r['j']:>2} {r['power']:>5} "
                         f"{r['coefficient']:>18.10g}  O(eps^{r['error_order']})")
        alpha = ", ".join("martingale" if math.isinf(a) else str(int(a)) for a in self.alpha)
        lines.append(f"alpha: {alpha}")
        return "\n".join(lines)


def expansion_report(mf: MomentFunction, law: SamplingLaw, eps_grid: Sequence[float] = (),
                     Q: int = 2, *, analysis: Analysis | None = None) -> ExpansionReport:
    """Bias, ``D``, ``S0``, ``T`` and ``Omega`` series for one estimator and law.

    ``D`` and ``S0`` are reported through ``eps^1``; ``Omega`` through ``eps^2``.
    """
    an = analysis or Analysis(mf, law)
    series = {
        "bias": bias_expansion(mf, Q=Q, analysis=an),
        "D": an.D(1),
        "S0": an.S0(1),
        "T": an.T(1),
        "omega": an.omega(),
    }
    return ExpansionReport(series, an.qalpha().alpha, tuple(float(e) for e in eps_grid))
