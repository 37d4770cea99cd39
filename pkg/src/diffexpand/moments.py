"""Estimating equations ``h = h_tilde + H / delta`` and the shipped scores.

Moment functions are vectors of expressions in ``(y1, y0, delta, beta, eps)``.
``target`` lists the parameter indices being estimated; the remaining
parameters stay at the model's true values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import symexpr as sx
from .generator import GeneratorContext, apply_Gamma, base_point
from .model import DiffusionModel
from .symexpr import DELTA, Y0, Y1, Expr

__all__ = [
    "MomentFunction",
    "euler_score",
    "ou_mle_score",
    "moment_function_from_text",
    "check_singularity_conditions",
    "gmm_objective",
    "sample_moments",
]


@dataclass(frozen=True)
class MomentFunction:
    """``h_i = h_tilde_i + H_i / delta`` for ``i < r``.

    ``expansion`` optionally points to an equivalent form better suited to
    the eps-expansions (the exact OU likelihood score carries ``exp(-delta
    theta)`` inside quotients, which is kept for pathwise evaluation).
    """

    name: str
    model: DiffusionModel
    h_tilde: tuple[Expr, ...]
    H: tuple[Expr, ...]
    target: tuple[int, ...]
    expansion: "MomentFunction | None" = None
    martingale: bool = False
    _compiled: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ht = tuple(sx.simplify(sx.as_expr(e)) for e in self.h_tilde)
        H = tuple(sx.simplify(sx.as_expr(e)) for e in self.H) if self.H else tuple(sx.ZERO for _ in ht)
        object.__setattr__(self, "h_tilde", ht)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "target", tuple(int(i) for i in self.target))
        if len(H) != len(ht):
            raise ValueError("h_tilde and H must have the same length")
        if len(ht) < len(self.target):
            raise ValueError(f"{len(ht)} moment conditions cannot identify {len(self.target)} parameters")
        if not self.target:
            raise ValueError("no target parameters")
        if any(not 0 <= i < self.model.dim for i in self.target):
            raise ValueError(f"target indices {self.target} out of range for dim {self.model.dim}")
        allowed = {"y1", "y0", "delta", "eps"} | {f"beta[{i}]" for i in range(self.model.dim)}
        for e in ht + H:
            extra = e.symbols - allowed
            if extra:
                raise ValueError(f"moment function uses unsupported symbols {sorted(extra)}")

    @property
    def r(self) -> int:
        return len(self.h_tilde)

    @property
    def d(self) -> int:
        return len(self.target)

    @property
    def has_H(self) -> bool:
        return any(e != sx.ZERO for e in self.H)

    @property
    def for_expansion(self) -> "MomentFunction":
        return self.expansion if self.expansion is not None else self

    def full(self) -> tuple[Expr, ...]:
        return tuple(sx.simplify(t + h / DELTA) if h != sx.ZERO else t
                     for t, h in zip(self.h_tilde, self.H))

    def derivative(self, parts: Sequence[Expr]) -> list[list[Expr]]:
        """``d parts_i / d beta_target_j`` as an ``r x d`` nested list."""
        return [[sx.expand(sx.differentiate(e, f"beta[{j}]")) for j in self.target] for e in parts]

    def bind_fixed(self, e: Expr) -> Expr:
        """Bind the non-target parameters to their true values."""
        fixed = {f"beta[{i}]": v for i, v in enumerate(self.model.beta0) if i not in self.target}
        return sx.substitute_many(e, fixed) if fixed else e

    # numeric evaluation ---------------------------------------------------------

    def _bindings(self, y1, y0, dt, theta, eps):
        beta = list(self.model.beta0)
        for i, v in zip(self.target, np.atleast_1d(theta)):
            beta[i] = float(v)
        b = {"y1": y1, "y0": y0, "delta": dt, "eps": float(eps)}
        b.update({f"beta[{i}]": v for i, v in enumerate(beta)})
        return b

    def evaluate(self, y1, y0, dt, theta, eps: float = 1.0) -> np.ndarray:
        """``h`` at data arrays for target-parameter values ``theta``; shape ``(r, n)``."""
        b = self._bindings(np.asarray(y1, float), np.asarray(y0, float), np.asarray(dt, float), theta, eps)
        n = np.shape(b["y1"])
        return np.stack([np.broadcast_to(sx.evaluate(e, b), n) for e in self.full()])

    def evaluate_jacobian(self, y1, y0, dt, theta, eps: float = 1.0) -> np.ndarray:
        """``dh/dtheta`` at the data; shape ``(r, d, n)``."""
        if "jac" not in self._compiled:
            self._compiled["jac"] = self.derivative(self.full())
        b = self._bindings(np.asarray(y1, float), np.asarray(y0, float), np.asarray(dt, float), theta, eps)
        n = np.shape(b["y1"])
        return np.stack([np.stack([np.broadcast_to(sx.evaluate(e, b), n) for e in row])
                         for row in self._compiled["jac"]])


# ----------------------------------------------------------------------- Euler


def _constant_diffusion_check(model: DiffusionModel) -> None:
    if model.gamma_dim != 1 or model.theta_dim != 1:
        raise ValueError("the Euler score needs a scalar drift parameter and sigma^2 = gamma")
    gamma = sx.beta(model.theta_dim)
    if "y1" in model.sigma2.symbols or sx.simplify(model.sigma2) != gamma:
        raise ValueError("the Euler score needs a constant diffusion with sigma^2 = gamma")


def euler_score(model: DiffusionModel, which: str = "both", form: str = "minimal") -> MomentFunction:
    """Score of the discretised Gaussian (Euler) likelihood.

    ``which`` selects ``"theta"``, ``"sigma2"`` or ``"both"`` rows.  With
    ``form="minimal"`` the sigma^2 row is ``h_tilde = -1/(2 sigma^2)``,
    ``H = (y1 - y0 - mu delta)^2 / (2 sigma^4)``; ``form="likelihood"`` moves
    ``-delta/(2 sigma^2)`` into ``H`` so that ``Gamma H`` also vanishes at the
    base point.
    """
    _constant_diffusion_check(model)
    if form not in ("minimal", "likelihood"):
        raise ValueError(f"unknown form {form!r}")
    theta, s2 = sx.beta(0), sx.beta(1)
    mu0 = model.drift_in(Y0)
    resid = Y1 - Y0 - mu0 * DELTA
    rows: list[tuple[Expr, Expr, int]] = []
    if which in ("theta", "both"):
        dmu = sx.simplify(sx.differentiate(mu0, theta))
        rows.append((sx.expand(dmu * resid / s2), sx.ZERO, 0))
    if which in ("sigma2", "both"):
        H = resid**2 / (2 * s2**2)
        if form == "minimal":
            rows.append((sx.simplify(-1 / (2 * s2)), sx.expand(H), 1))
        else:
            rows.append((sx.ZERO, sx.expand(H - DELTA / (2 * s2)), 1))
    if not rows:
        raise ValueError(f"unknown component selection {which!r}")
    mf = MomentFunction(f"euler-{which}" + ("" if form == "minimal" else "-likelihood"), model,
                        tuple(r[0] for r in rows), tuple(r[1] for r in rows), tuple(r[2] for r in rows))
    return _bind_nontarget(mf)


def _bind_nontarget(mf: MomentFunction) -> MomentFunction:
    ht = tuple(mf.bind_fixed(e) for e in mf.h_tilde)
    H = tuple(mf.bind_fixed(e) for e in mf.H)
    exp_form = _bind_nontarget(mf.expansion) if mf.expansion is not None else None
    return MomentFunction(mf.name, mf.model, ht, H, mf.target, exp_form, mf.martingale)


# ----------------------------------------------------------------------- OU MLE


def _variance_factor_series(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Taylor coefficients of ``1/g`` and ``(log g)'`` for ``g(x) = (1 - exp(-2x)) / (2x)``."""
    g = np.array([(-2.0) ** k / math.factorial(k + 1) for k in range(order + 2)])
    inv = np.zeros(order + 2)
    inv[0] = 1.0 / g[0]
    for k in range(1, order + 2):
        inv[k] = -np.dot(g[1:k + 1], inv[k - 1::-1][:k]) / g[0]
    dg = np.array([(k + 1) * g[k + 1] for k in range(order + 1)])
    dlog = np.array([np.dot(dg[:k + 1], inv[k::-1]) for k in range(order + 1)])
    return inv[: order + 1], dlog


def _poly(coefs: np.ndarray, x: Expr) -> Expr:
    return sx.add(*[sx.const(float(c)) * x**k for k, c in enumerate(coefs)])


def ou_mle_score(model: DiffusionModel, which: str = "both", *, series_order: int = 7) -> MomentFunction:
    """Exact Gaussian-transition likelihood score of the OU model.

    The returned function evaluates the exact score (``H = 0``).  Its
    ``expansion`` attribute carries the same score with ``1/g`` and
    ``g'/g`` for ``g(x) = (1 - exp(-2x)) / (2x)``, ``x = delta theta``,
    replaced by Taylor polynomials of degree ``series_order``; that form is
    regular at ``delta = 0`` and agrees with the exact score to
    ``O(delta^(series_order+1))``, beyond any order the expansions consume.
    """
    if not model.is_ou():
        raise ValueError("the exact likelihood score is only available for the OU model")
    theta, s2 = sx.beta(0), sx.beta(1)
    decay = sx.exp(-DELTA * theta)
    m = decay * Y0
    v = (1 - sx.exp(-2 * DELTA * theta)) * s2 / (2 * theta)
    logp = -0.5 * sx.log(v) - (Y1 - m) ** 2 / (2 * v)
    sel = {"theta": [0], "sigma2": [1], "both": [0, 1]}.get(which)
    if sel is None:
        raise ValueError(f"unknown component selection {which!r}")
    exact = [sx.simplify(sx.differentiate(logp, f"beta[{i}]")) for i in sel]

    inv, dlog = _variance_factor_series(series_order)
    x = DELTA * theta
    u = _poly(inv, x)
    du = _poly(np.array([(k + 1) * inv[k + 1] for k in range(len(inv) - 1)]), x)
    reg_t, reg_H = [], []
    for i in sel:
        if i == 0:
            row = (-0.5 * DELTA * _poly(dlog, x) - (Y1 - m) * decay * Y0 * u / s2
                   - (Y1 - m) ** 2 * du / (2 * s2))
            reg_t.append(sx.expand(row))
            reg_H.append(sx.ZERO)
        else:
            reg_t.append(sx.simplify(-1 / (2 * s2)))
            reg_H.append(sx.expand((Y1 - m) ** 2 * u / (2 * s2**2)))
    target = tuple(sel)
    reg = MomentFunction(f"ou-mle-{which}-series", model, tuple(reg_t), tuple(reg_H), target,
                         martingale=True)
    mf = MomentFunction(f"ou-mle-{which}", model, tuple(exact), (), target, reg, martingale=True)
    return _bind_nontarget(mf)


# ----------------------------------------------------------------------- user text


def moment_function_from_text(model: DiffusionModel, h_tilde: Sequence[str], H: Sequence[str] | None,
                              target: Sequence[int], name: str = "custom") -> MomentFunction:
    ht = [sx.parse(t) for t in h_tilde]
    Hs = [sx.parse(t) for t in H] if H else []
    return _bind_nontarget(MomentFunction(name, model, tuple(ht), tuple(Hs), tuple(target)))


# ----------------------------------------------------------------------- checks


def check_singularity_conditions(mf: MomentFunction, model: DiffusionModel | None = None, *,
                                 n_points: int = 50, tol: float = 1e-10, seed: int = 0) -> dict:
    """Check ``H = dH/dy1 = dH/dbeta = 0`` at ``(y0, y0, 0, beta0, 0)`` on random ``y0``.

    Also reports (informational, not part of ``ok``) whether ``Gamma H``
    vanishes at the base point. Never raises.
    """
    model = model or mf.model
    rng = np.random.default_rng(seed)
    law_scale = 1.0
    if model.is_ou():
        law_scale = math.sqrt(model.beta0[1] / (2 * model.beta0[0]))
    lo, hi = model.domain
    y = rng.normal(model.reference_point, law_scale, n_points)
    y = np.clip(y, lo + 1e-6 * (1 + abs(lo)) if math.isfinite(lo) else -np.inf,
                hi - 1e-6 * (1 + abs(hi)) if math.isfinite(hi) else np.inf)
    ctx = GeneratorContext(model)
    components = []
    for i, H in enumerate(mf.H):
        entry = {"component": i}
        if H == sx.ZERO:
            entry.update(value=True, dy1=True, dbeta=True, gamma=True, ok=True, residual=0.0)
            components.append(entry)
            continue
        checks = {
            "value": H,
            "dy1": sx.differentiate(H, Y1),
        }
        for j in mf.target:
            checks[f"dbeta[{j}]"] = sx.differentiate(H, f"beta[{j}]")
        worst = 0.0
        ok = True
        for label, e in checks.items():
            try:
                vals = np.broadcast_to(sx.evaluate(base_point(e, model), {"y0": y}), y.shape)
                res = float(np.max(np.abs(vals)))
            except sx.ExprError as exc:
                res = math.inf
                entry[f"{label}_error"] = str(exc)
            passed = res <= tol
            key = "dbeta" if label.startswith("dbeta") else label
            entry[key] = entry.get(key, True) and passed
            ok = ok and passed
            worst = max(worst, res)
        try:
            g = base_point(apply_Gamma(ctx, H), model)
            gvals = sx.evaluate(sx.expand(sx.substitute(g, "Delta0", 1.0)), {"y0": y})
            entry["gamma"] = bool(np.max(np.abs(np.broadcast_to(gvals, y.shape))) <= tol)
        except sx.ExprError:
            entry["gamma"] = False
        entry["ok"] = ok
        entry["residual"] = worst
        components.append(entry)
    return {"moment_function": mf.name, "components": components,
            "ok": all(c["ok"] for c in components)}


# ----------------------------------------------------------------------- GMM


def sample_moments(mf: MomentFunction, y: np.ndarray, dt: np.ndarray, theta, eps: float = 1.0) -> np.ndarray:
    """``m_T(theta) = mean_n h(Y_n, Y_{n-1}, Delta_n, theta)``."""
    y = np.asarray(y, float)
    dt = np.asarray(dt, float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("need a path with at least two observations")
    if dt.shape != (y.size - 1,):
        raise ValueError(f"expected {y.size - 1} intervals, got shape {dt.shape}")
    return mf.evaluate(y[1:], y[:-1], dt, theta, eps).mean(axis=1)


def gmm_objective(mf: MomentFunction, data, theta, W: np.ndarray | None = None, eps: float = 1.0) -> float:
    """``Q_T = m_T' W m_T`` with ``data = (y, dt)``; ``W`` defaults to the identity."""
    y, dt = data
    m = sample_moments(mf, y, dt, theta, eps)
    if W is None:
        W = np.eye(m.size)
    W = np.asarray(W, float)
    if W.shape != (m.size, m.size):
        raise ValueError(f"weight matrix must be {m.size}x{m.size}")
    if not np.allclose(W, W.T) or np.min(np.linalg.eigvalsh(W)) <= 0:
        raise ValueError("weight matrix must be symmetric positive definite")
    return float(m @ W @ m)
