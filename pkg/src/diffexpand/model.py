"""Scalar diffusion models, their scale/speed/stationary densities and
stationary-law expectations.

A model is ``dX = mu(X; theta) dt + sigma(X; gamma) dW`` with drift and
diffusion given as expressions in the state symbol ``y1`` and the parameter
symbols ``beta[i]``; the first ``theta_dim`` parameters form the drift block
and the remaining ``gamma_dim`` the diffusion block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate

from . import symexpr as sx
from .symexpr import Expr, Y0, Y1

__all__ = [
    "DiffusionModel",
    "StationaryLaw",
    "ModelAssumptionError",
    "ornstein_uhlenbeck",
    "cubic_drift",
    "soft_linear_drift",
    "REGISTRY",
    "get_model",
    "model_from_mapping",
    "load_model",
    "scale_density",
    "speed_density",
    "stationary_density",
    "stationary_expectation",
    "ou_transition_moments",
    "check_stationarity_diagnostics",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


class ModelAssumptionError(ValueError):
    """The model violates a standing assumption (e.g. non-integrable speed density)."""


@dataclass(frozen=True)
class DiffusionModel:
    name: str
    drift: Expr
    sigma: Expr
    theta_dim: int
    gamma_dim: int
    beta0: tuple[float, ...]
    domain: tuple[float, float] = (-math.inf, math.inf)
    kind: str = "generic"
    sigma2: Expr = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        object.__setattr__(self, "domain", (float(self.domain[0]), float(self.domain[1])))
        object.__setattr__(self, "sigma2", sx.simplify(self.sigma * self.sigma))
        d = self.theta_dim + self.gamma_dim
        if len(self.beta0) != d:
            raise ValueError(f"beta0 has {len(self.beta0)} entries, expected {d}")
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError(f"empty domain {self.domain}")
        allowed = {"y1"} | {f"beta[{i}]" for i in range(d)}
        for label, e in (("drift", self.drift), ("diffusion", self.sigma)):
            extra = e.symbols - allowed
            if extra:
                raise ValueError(f"{label} uses symbols outside (y1, beta[0..{d - 1}]): {sorted(extra)}")
        grid = self.interior_grid(41)
        s2 = self.sigma2_at(grid)
        if not np.all(s2 > 0):
            raise ModelAssumptionError(f"sigma^2 is not positive on the interior of {self.domain}")

    @property
    def dim(self) -> int:
        return self.theta_dim + self.gamma_dim

    @property
    def theta_indices(self) -> tuple[int, ...]:
        return tuple(range(self.theta_dim))

    @property
    def gamma_indices(self) -> tuple[int, ...]:
        return tuple(range(self.theta_dim, self.dim))

    def param_bindings(self, beta: Sequence[float] | None = None) -> dict[str, float]:
        values = self.beta0 if beta is None else beta
        return {f"beta[{i}]": float(v) for i, v in enumerate(values)}

    def with_beta0(self, beta0: Sequence[float]) -> "DiffusionModel":
        return DiffusionModel(self.name, self.drift, self.sigma, self.theta_dim,
                              self.gamma_dim, tuple(beta0), self.domain, self.kind)

    @property
    def reference_point(self) -> float:
        lo, hi = self.domain
        if math.isinf(lo) and math.isinf(hi):
            return 0.0
        if lo == 0.0 and math.isinf(hi):
            return 1.0
        if math.isinf(lo) or math.isinf(hi):
            return (hi - 1.0) if math.isinf(lo) else (lo + 1.0)
        return 0.5 * (lo + hi)

    def interior_grid(self, n: int, half_width: float = 5.0) -> np.ndarray:
        lo, hi = self.domain
        ref = self.reference_point
        a = lo if math.isfinite(lo) else ref - half_width
        b = hi if math.isfinite(hi) else ref + half_width
        pad = 1e-3 * (b - a)
        return np.linspace(a + pad, b - pad, n)

    def drift_at(self, x, beta=None):
        return self._eval(self.drift, x, beta)

    def sigma2_at(self, x, beta=None):
        return self._eval(self.sigma2, x, beta)

    def _eval(self, e: Expr, x, beta=None):
        x = np.asarray(x, dtype=float)
        out = sx.evaluate(e, {"y1": x, **self.param_bindings(beta)})
        return np.broadcast_to(out, x.shape).astype(float) if np.ndim(x) else float(out)

    def at_true(self, e: Expr) -> Expr:
        """Bind every parameter symbol of ``e`` to ``beta0``."""
        return sx.simplify(sx.substitute_many(e, self.param_bindings()))

    def drift_in(self, state: Expr = Y0) -> Expr:
        return sx.substitute(self.drift, Y1, state)

    def is_ou(self) -> bool:
        return self.kind == "ou"

    # scale / speed densities -------------------------------------------------

    def _ratio_integral(self, x: np.ndarray) -> np.ndarray:
        """``int_ref^x mu/sigma^2`` for an array of ``x`` (64-point Gauss-Legendre)."""
        ref = self.reference_point
        x = np.atleast_1d(np.asarray(x, dtype=float))
        half = 0.5 * (x - ref)
        pts = ref + half[:, None] * (1.0 + _GL_NODES[None, :])
        ratio = self.drift_at(pts) / self.sigma2_at(pts)
        return half * (ratio @ _GL_WEIGHTS)

    def log_scale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_ou():
            theta, s2 = self.beta0
            return theta * x**2 / s2
        out = -2.0 * self._ratio_integral(x)
        return out.reshape(x.shape)

    def log_speed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -np.log(self.sigma2_at(x)) - self.log_scale(x)


# --------------------------------------------------------------------- registry


def ornstein_uhlenbeck(theta: float = 1.0, sigma2: float = 1.0) -> DiffusionModel:
    """``dX = -theta X dt + sigma dW`` with ``beta = (theta, sigma^2)``."""
    b0, b1 = sx.beta(0), sx.beta(1)
    return DiffusionModel("ou", sx.simplify(-b0 * Y1), sx.sqrt(b1), 1, 1, (theta, sigma2), kind="ou")


def cubic_drift(theta: float = 1.0, sigma2: float = 1.0) -> DiffusionModel:
    """``dX = -theta X^3 dt + sigma dW``."""
    b0, b1 = sx.beta(0), sx.beta(1)
    return DiffusionModel("cubic", sx.simplify(-b0 * Y1**3), sx.sqrt(b1), 1, 1, (theta, sigma2))


def soft_linear_drift(theta: float = 1.0, sigma2: float = 1.0) -> DiffusionModel:
    """``dX = -theta X (1 - exp(-X^4)) dt + sigma dW``."""
    b0, b1 = sx.beta(0), sx.beta(1)
    drift = -b0 * Y1 * (1 - sx.exp(-Y1**4))
    return DiffusionModel("soft_linear", drift, sx.sqrt(b1), 1, 1, (theta, sigma2))


REGISTRY: dict[str, Callable[..., DiffusionModel]] = {
    "ou": ornstein_uhlenbeck,
    "cubic": cubic_drift,
    "soft_linear": soft_linear_drift,
}


def get_model(name: str, beta0: Sequence[float] | None = None) -> DiffusionModel:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return factory(*beta0) if beta0 is not None else factory()


_MODEL_KEYS = {"name", "drift_expr", "diffusion_expr", "theta_dim", "gamma_dim", "domain", "beta0"}


def _symbol_aliases(theta_dim: int, gamma_dim: int) -> dict[str, Expr]:
    aliases: dict[str, Expr] = {"x": Y1}
    for i in range(theta_dim):
        aliases[f"theta[{i}]"] = sx.beta(i)
    for j in range(gamma_dim):
        aliases[f"gamma[{j}]"] = sx.beta(theta_dim + j)
    if theta_dim == 1:
        aliases["theta"] = sx.beta(0)
    if gamma_dim == 1:
        aliases["gamma"] = sx.beta(theta_dim)
    return aliases


def _parse_bound(v) -> float:
    if isinstance(v, str):
        t = v.strip().lower()
        if t in ("inf", "+inf", "infinity"):
            return math.inf
        if t in ("-inf", "-infinity"):
            return -math.inf
    return float(v)


def model_from_mapping(doc: Mapping) -> DiffusionModel:
    """Build a model from ``{name, drift_expr, diffusion_expr, theta_dim,
    gamma_dim, domain, beta0}``. Expression text may use ``x`` for the state
    and ``theta``/``gamma`` (or ``theta[i]``/``gamma[j]``) for parameters."""
    unknown = set(doc) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    missing = {"drift_expr", "diffusion_expr", "theta_dim", "gamma_dim", "beta0"} - set(doc)
    if missing:
        raise ValueError(f"missing model keys: {sorted(missing)}")
    p, g = int(doc["theta_dim"]), int(doc["gamma_dim"])
    aliases = _symbol_aliases(p, g)
    drift = sx.parse(str(doc["drift_expr"]), aliases)
    sigma = sx.parse(str(doc["diffusion_expr"]), aliases)
    domain = tuple(_parse_bound(v) for v in doc.get("domain", ["-inf", "inf"]))
    beta0 = doc["beta0"]
    if not isinstance(beta0, (list, tuple)):
        beta0 = [beta0]
    return DiffusionModel(str(doc.get("name", "custom")), drift, sigma, p, g, tuple(beta0), domain)


def load_model(path: str | Path) -> DiffusionModel:
    """Read a model definition from a JSON or YAML file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        import yaml

        doc = yaml.safe_load(text)
    if not isinstance(doc, Mapping):
        raise ValueError(f"{path}: model definition must be a mapping")
    return model_from_mapping(doc)


# --------------------------------------------------------------------- densities


def _check_interior(model: DiffusionModel, x: float) -> None:
    lo, hi = model.domain
    if not lo < x < hi:
        raise ValueError(f"x={x} outside the domain {model.domain}")


def scale_density(model: DiffusionModel, x: float, *, method: str = "auto") -> float:
    """``s(x) = exp(-2 int_ref^x mu/sigma^2)`` at ``beta0``.

    ``method="quad"`` uses adaptive quadrature for the inner integral,
    ``"auto"`` uses the closed form for OU and quadrature otherwise.
    """
    _check_interior(model, x)
    if method == "auto" and model.is_ou():
        return float(np.exp(model.log_scale(x)))
    ref = model.reference_point

    def ratio(y):
        return model.drift_at(y) / model.sigma2_at(y)

    val, err = integrate.quad(ratio, ref, x, epsabs=1e-12, epsrel=1e-12, limit=200)
    if not np.isfinite(val):
        raise ModelAssumptionError(f"scale-density quadrature failed at x={x}")
    return math.exp(-2.0 * val)


def speed_density(model: DiffusionModel, x: float, *, method: str = "auto") -> float:
    """``m(x) = 1 / (sigma^2(x) s(x))``."""
    return 1.0 / (model.sigma2_at(x) * scale_density(model, x, method=method))


# --------------------------------------------------------------------- stationary law


class StationaryLaw:
    """Stationary distribution of a model at ``beta0`` with a quadrature rule.

    The rule is exposed as ``nodes`` and ``weights`` (weights already include
    the density) so ``E[f(Y0)] = sum(weights * f(nodes))``. The OU fast path
    uses Gauss-Hermite; other models use composite Gauss-Legendre panels on a
    truncated domain, refined until the normalisation is stable.
    """

    def __init__(self, model: DiffusionModel, *, hermite_nodes: int = 96,
                 force_generic: bool = False, tail_mass: float = 1e-12):
        self.model = model
        self.tail_mass = tail_mass
        if model.is_ou() and not force_generic:
            theta, s2 = model.beta0
            if theta <= 0:
                raise ModelAssumptionError("OU stationary law needs theta > 0")
            self.scheme = "gauss-hermite"
            self.ou_variance = s2 / (2.0 * theta)
            t, w = np.polynomial.hermite.hermgauss(hermite_nodes)
            self.nodes = math.sqrt(2.0 * self.ou_variance) * t
            self.weights = w / math.sqrt(math.pi)
            self.log_norm = math.log(math.sqrt(2 * math.pi * self.ou_variance) / s2)
            self.bounds = (-math.inf, math.inf)
        else:
            self.scheme = "composite-gauss-legendre"
            self.ou_variance = None
            self._build_generic()

    # generic construction ------------------------------------------------------

    def _truncation(self) -> tuple[float, float]:
        m = self.model
        lo, hi = m.domain
        ref = m.reference_point
        peak = float(m.log_speed(ref))
        cutoff = math.log(self.tail_mass) - 10.0

        def walk(direction: float, bound: float) -> float:
            step = 0.25
            x = ref
            for _ in range(400):
                nxt = x + direction * step
                if math.isfinite(bound) and (nxt - bound) * direction >= 0:
                    return bound - direction * 1e-9 * max(1.0, abs(bound))
                lm = float(m.log_speed(nxt))
                peak_here = max(peak, lm)
                if lm - peak_here < cutoff:
                    return nxt
                x = nxt
                step *= 1.15
            raise ModelAssumptionError(
                f"speed density of model {m.name!r} does not decay toward "
                f"{'+' if direction > 0 else '-'}boundary (not integrable)"
            )

        return walk(-1.0, lo), walk(1.0, hi)

    def _panel_rule(self, a: float, b: float, panels: int):
        edges = np.linspace(a, b, panels + 1)
        t, w = np.polynomial.legendre.leggauss(20)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
        weights = (half[:, None] * w[None, :]).ravel()
        return nodes, weights

    def _build_generic(self) -> None:
        a, b = self._truncation()
        self.bounds = (a, b)
        shift = float(np.max(self.model.log_speed(np.linspace(a, b, 2001))))
        prev = None
        for panels in (16, 32, 64, 128, 256):
            nodes, w = self._panel_rule(a, b, panels)
            logm = self.model.log_speed(nodes)
            mass = w * np.exp(logm - shift)
            z = float(mass.sum())
            if prev is not None and abs(z - prev) <= 1e-12 * z:
                break
            prev = z
        else:
            raise ModelAssumptionError("stationary normalisation did not converge")
        if not np.all(np.isfinite(mass)) or z <= 0:
            raise ModelAssumptionError("speed density is not integrable")
        self.nodes = nodes
        self.weights = mass / z
        self.log_norm = shift + math.log(z)

    # queries -------------------------------------------------------------------

    def density(self, x):
        x = np.asarray(x, dtype=float)
        if self.ou_variance is not None:
            v = self.ou_variance
            return np.exp(-0.5 * x**2 / v) / math.sqrt(2 * math.pi * v)
        return np.exp(self.model.log_speed(x) - self.log_norm)

    def expect_values(self, values) -> float:
        return float(np.dot(self.weights, values))

    def expect(self, f, extra: Mapping | None = None, *, method: str = "rule") -> float:
        """``E[f(Y0)]`` for an :class:`Expr` in ``y0`` (other symbols via ``extra``)
        or a vectorised callable. ``method="adaptive"`` uses scipy's adaptive
        quadrature on the truncated domain instead of the fixed rule."""
        fn = self._as_callable(f, extra)
        if method == "adaptive":
            a, b = self.bounds
            if self.ou_variance is not None:
                sd = math.sqrt(self.ou_variance)
                a, b = -40 * sd, 40 * sd
            val, err = integrate.quad(lambda x: float(fn(np.array([x]))[0]) * float(self.density(x)),
                                      a, b, epsabs=1e-10, epsrel=1e-10, limit=400)
            if err > 1e-8 * (1 + abs(val)):
                raise ModelAssumptionError(f"adaptive quadrature did not converge (error {err:g})")
            return float(val)
        return self.expect_values(fn(self.nodes))

    def _as_callable(self, f, extra):
        if isinstance(f, Expr):
            bind = dict(extra or {})
            names = set(f.symbols)

            def fn(x):
                b = {**bind}
                if "y0" in names:
                    b["y0"] = x
                if "y1" in names:
                    b["y1"] = x
                if not names - set(b):
                    return np.broadcast_to(sx.evaluate(f, b), np.shape(x))
                return sx.evaluate(f, b)

            return fn
        if callable(f):
            return lambda x: np.broadcast_to(np.asarray(f(x), dtype=float), np.shape(x))
        return lambda x: np.full(np.shape(x), float(f))

    def l2_norm(self, f, extra: Mapping | None = None) -> float:
        vals = self._as_callable(f, extra)(self.nodes)
        return math.sqrt(max(self.expect_values(np.asarray(vals) ** 2), 0.0))

    def cdf_table(self, n: int = 4001):
        """Grid and CDF values for inverse-CDF sampling."""
        if self.ou_variance is not None:
            sd = math.sqrt(self.ou_variance)
            a, b = -9 * sd, 9 * sd
        else:
            a, b = self.bounds
        grid = np.linspace(a, b, n)
        dens = self.density(grid)
        cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
        cdf /= cdf[-1]
        return grid, cdf


def stationary_density(law: StationaryLaw, x) -> float:
    return law.density(x) if np.ndim(x) else float(law.density(x))


def stationary_expectation(law: StationaryLaw, f, extra: Mapping | None = None, **kw) -> float:
    return law.expect(f, extra, **kw)


def ou_transition_moments(y0: float, delta: float, theta: float, sigma2: float) -> tuple[float, float]:
    """Mean and variance of ``Y1 | Y0=y0`` after time ``delta`` for OU."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return (math.exp(-delta * theta) * y0, -math.expm1(-2 * delta * theta) * sigma2 / (2 * theta))


# --------------------------------------------------------------------- diagnostics


def check_stationarity_diagnostics(model: DiffusionModel) -> dict:
    """Numeric sanity checks of the standing assumptions; never raises.

    * ``drift_direction``: the drift of the unit-diffusion transform
      ``mu/sigma - sigma'/2`` points back to the interior near both ends.
    * ``speed_integrability``: the mass of ``m`` on growing windows converges.
    * ``sigma2_positive``: ``sigma^2 > 0`` on an interior grid.
    """
    report: dict = {"model": model.name, "flags": []}
    lo, hi = model.domain
    ref = model.reference_point
    try:
        sig = sx.simplify(sx.sqrt(model.sigma2))
        dsig = sx.differentiate(sig, Y1)
        unit_drift = sx.simplify(model.drift / sig - dsig / 2)

        def probe(x):
            return float(sx.evaluate(unit_drift, {"y1": x, **model.param_bindings()}))

        checks = []
        for direction, bound in ((-1.0, lo), (1.0, hi)):
            if math.isfinite(bound):
                pts = [bound - direction * f * abs(bound - ref) for f in (1e-2, 1e-3)]
            else:
                pts = [ref + direction * r for r in (5.0, 10.0, 20.0)]
            vals = [probe(x) for x in pts]
            checks.append(all(-direction * v > 0 for v in vals))
        report["drift_direction"] = bool(all(checks))
    except sx.ExprError as exc:
        report["drift_direction"] = False
        report["flags"].append(f"drift probe failed: {exc}")

    masses = []
    try:
        for r in (2.0, 4.0, 8.0, 16.0):
            a = max(lo, ref - r) if math.isfinite(lo) else ref - r
            b = min(hi, ref + r) if math.isfinite(hi) else ref + r
            a, b = a + 1e-9, b - 1e-9
            t, w = np.polynomial.legendre.leggauss(200)
            x = 0.5 * (a + b) + 0.5 * (b - a) * t
            with np.errstate(over="ignore"):
                masses.append(float(0.5 * (b - a) * np.sum(w * np.exp(model.log_speed(x)))))
        incs = np.diff(masses)
        ok = bool(np.all(np.isfinite(masses)) and abs(incs[-1]) <= 1e-6 * abs(masses[-1]))
        report["speed_integrability"] = ok
        report["speed_masses"] = masses
    except (sx.ExprError, FloatingPointError, OverflowError) as exc:
        report["speed_integrability"] = False
        report["flags"].append(f"speed mass failed: {exc}")

    grid = model.interior_grid(201, half_width=20.0)
    try:
        report["sigma2_positive"] = bool(np.all(model.sigma2_at(grid) > 0))
    except sx.ExprError:
        report["sigma2_positive"] = False
    report["ok"] = bool(report["drift_direction"] and report["speed_integrability"]
                        and report["sigma2_positive"])
    return report
