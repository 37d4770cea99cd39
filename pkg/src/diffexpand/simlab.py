"""Path simulation under random sampling, estimator fitting and Monte Carlo
studies of bias and asymptotic variance."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from . import symexpr as sx
from .model import DiffusionModel, StationaryLaw
from .moments import MomentFunction
from .sampling import SamplingLaw, replication_rng

__all__ = [
    "ObservationRecord",
    "ObservationPath",
    "ObservationFormatError",
    "SimulationError",
    "StudyAbortedError",
    "FitResult",
    "StudyConfig",
    "McStudyResult",
    "simulate_ou_path",
    "simulate_general_path",
    "simulate_general_paths",
    "fit",
    "monte_carlo_study",
    "long_run_variance",
    "serial_covariance_sum",
    "bartlett_bandwidth",
    "OBSERVATION_COLUMNS",
]

OBSERVATION_COLUMNS = ("n", "tau", "delta", "y")
STUDY_SCHEMA_VERSION = 1


class ObservationFormatError(ValueError):
    """Malformed observation file; ``row`` is the 1-based line number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


class SimulationError(RuntimeError):
    pass


class StudyAbortedError(RuntimeError):
    pass


# --------------------------------------------------------------------- observations


@dataclass(frozen=True)
class ObservationRecord:
    n: int
    tau: float
    delta: float
    y: float


@dataclass
class ObservationPath:
    """Observations ``y_0..y_N`` at times ``tau``; ``delta[0]`` is 0 and
    ``delta[n] = tau[n] - tau[n-1]`` for ``n >= 1``."""

    tau: np.ndarray
    delta: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (self.tau.shape == self.delta.shape == self.y.shape) or self.y.ndim != 1:
            raise ValueError("tau, delta and y must be 1-d arrays of equal length")

    @classmethod
    def from_intervals(cls, intervals: np.ndarray, y: np.ndarray) -> "ObservationPath":
        intervals = np.asarray(intervals, dtype=float)
        delta = np.concatenate([[0.0], intervals])
        return cls(np.cumsum(delta), delta, y)

    def __len__(self) -> int:
        return self.y.size

    @property
    def intervals(self) -> np.ndarray:
        return self.delta[1:]

    def records(self) -> list[ObservationRecord]:
        return [ObservationRecord(n, float(t), float(d), float(v))
                for n, (t, d, v) in enumerate(zip(self.tau, self.delta, self.y))]

    def validate(self) -> None:
        if self.y.size < 2:
            raise ObservationFormatError("need at least two observations")
        if np.any(self.delta[1:] <= 0):
            row = int(np.argmax(self.delta[1:] <= 0)) + 1
            raise ObservationFormatError("interval must be positive", row + 2)
        gap = np.abs(self.tau[1:] - (self.tau[:-1] + self.delta[1:]))
        bad = gap > 1e-9 * np.maximum(1.0, np.abs(self.tau[1:]))
        if np.any(bad):
            raise ObservationFormatError("tau must equal the previous tau plus delta", int(np.argmax(bad)) + 3)
        if not np.all(np.isfinite(self.y)):
            raise ObservationFormatError("non-finite state value", int(np.argmax(~np.isfinite(self.y))) + 2)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(OBSERVATION_COLUMNS)
            for n, (t, d, v) in enumerate(zip(self.tau, self.delta, self.y)):
                w.writerow([n, repr(float(t)), repr(float(d)), repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ObservationPath":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ObservationFormatError("empty observation file")
        header = [c.strip() for c in rows[0]]
        if header != list(OBSERVATION_COLUMNS):
            raise ObservationFormatError(f"header must be {','.join(OBSERVATION_COLUMNS)}, got {','.join(header)}", 1)
        tau, delta, y = [], [], []
        for line, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ObservationFormatError(f"expected 4 columns, got {len(row)}", line)
            try:
                n = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise ObservationFormatError("unparseable number", line) from None
            if n != len(y):
                raise ObservationFormatError(f"index {n} out of sequence", line)
            tau.append(vals[0])
            delta.append(vals[1])
            y.append(vals[2])
        out = cls(np.array(tau), np.array(delta), np.array(y))
        out.validate()
        return out


def _draw_intervals(law: SamplingLaw, T_horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Intervals of observations ``1..N_T`` with ``N_T`` the last index whose time is within the horizon."""
    if not T_horizon > 0:
        raise ValueError("time horizon must be positive")
    mean = law.epsilon * law.mean
    chunk = int(T_horizon / mean * 1.1) + 64
    draws = []
    total = 0.0
    while True:
        d = law.draw_interval(rng, chunk)
        draws.append(d)
        total += float(d.sum())
        if total > T_horizon:
            break
    d = np.concatenate(draws)
    tau = np.cumsum(d)
    # relative slack so that rounding in the cumulative sum does not drop tau == T
    n_t = int(np.searchsorted(tau, T_horizon * (1 + 1e-12), side="right"))
    return d[:n_t]


# --------------------------------------------------------------------- simulation


def simulate_ou_path(theta0: float, sigma2: float, law: SamplingLaw, T_horizon: float,
                     rng: np.random.Generator) -> ObservationPath:
    """Exact OU path from the stationary law, observed at random times up to ``T_horizon``."""
    if theta0 <= 0:
        raise ValueError("theta must be positive")
    intervals = _draw_intervals(law, T_horizon, rng)
    a = np.exp(-theta0 * intervals)
    s = np.sqrt(-np.expm1(-2 * theta0 * intervals) * sigma2 / (2 * theta0))
    z = rng.standard_normal(intervals.size + 1)
    y = np.empty(intervals.size + 1)
    y[0] = math.sqrt(sigma2 / (2 * theta0)) * z[0]
    noise = s * z[1:]
    for n in range(intervals.size):
        y[n + 1] = a[n] * y[n] + noise[n]
    return ObservationPath.from_intervals(intervals, y)


def _stationary_draws(model: DiffusionModel, rng: np.random.Generator, size: int,
                      slaw: StationaryLaw | None = None) -> np.ndarray:
    grid, cdf = (slaw or StationaryLaw(model)).cdf_table()
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(rng.uniform(size=size), cdf[keep], grid[keep])


def simulate_general_paths(model: DiffusionModel, law: SamplingLaw, n_intervals: int, rng: np.random.Generator,
                           n_paths: int, *, substeps: int = 64, slaw: StationaryLaw | None = None,
                           start: np.ndarray | None = None, intervals: np.ndarray | None = None):
    """Euler-Maruyama paths, vectorised over ``n_paths`` with ``n_intervals`` observations each.

    Returns ``(intervals, y)`` with shapes ``(n_paths, n_intervals)`` and
    ``(n_paths, n_intervals + 1)``.  An increment that leaves a finite
    domain is redrawn; more than 1% redrawn intervals raise
    :class:`SimulationError`.
    """
    if substeps < 20:
        raise ValueError("substeps must be at least 20")
    if intervals is None:
        intervals = law.draw_interval(rng, (n_paths, n_intervals))
    intervals = np.broadcast_to(np.asarray(intervals, dtype=float), (n_paths, n_intervals))
    y = np.empty((n_paths, n_intervals + 1))
    y[:, 0] = _stationary_draws(model, rng, n_paths, slaw) if start is None else start
    lo, hi = model.domain
    bounded = math.isfinite(lo) or math.isfinite(hi)
    mu = sx.lambdify(model.at_true(model.drift), "y1")
    sig = sx.lambdify(model.at_true(model.sigma), "y1")
    redraws = 0

    def inside(v):
        return (v > lo) & (v < hi)

    for n in range(n_intervals):
        h = intervals[:, n] / substeps
        sq = np.sqrt(h)
        z = rng.standard_normal((substeps, n_paths))
        if n_paths == 1:
            # scalar loop: much cheaper than array calls of length one
            x, hh, ss = float(y[0, n]), float(h[0]), float(sq[0])
            for k in range(substeps):
                x_new = x + mu(x) * hh + sig(x) * ss * z[k, 0]
                while bounded and not inside(x_new):
                    redraws += 1
                    if redraws > 0.01 * n_intervals + 100:
                        raise SimulationError("path keeps leaving the domain")
                    x_new = x + mu(x) * hh + sig(x) * ss * rng.standard_normal()
                x = x_new
            y[0, n + 1] = x
            continue
        x = y[:, n].copy()
        for k in range(substeps):
            x_new = x + mu(x) * h + sig(x) * sq * z[k]
            if bounded:
                bad = ~inside(x_new)
                tries = 0
                while np.any(bad):
                    redraws += int(bad.sum())
                    tries += 1
                    if tries > 100:
                        raise SimulationError("could not keep the path inside the domain")
                    idx = np.flatnonzero(bad)
                    x_new[idx] = x[idx] + mu(x[idx]) * h[idx] + sig(x[idx]) * sq[idx] * rng.standard_normal(idx.size)
                    bad[idx] = ~inside(x_new[idx])
            x = x_new
        y[:, n + 1] = x
    if redraws > 0.01 * n_paths * n_intervals:
        raise SimulationError(f"{redraws} redrawn increments exceed 1% of the intervals")
    return intervals, y


def simulate_general_path(model: DiffusionModel, law: SamplingLaw, T_horizon: float, rng: np.random.Generator,
                          substeps: int = 64, *, slaw: StationaryLaw | None = None) -> ObservationPath:
    """One Euler-Maruyama path with ``substeps`` increments per observation interval."""
    intervals = _draw_intervals(law, T_horizon, rng)
    _, y = simulate_general_paths(model, law, intervals.size, rng, 1, substeps=substeps, slaw=slaw,
                                  intervals=intervals[None, :])
    return ObservationPath.from_intervals(intervals, y[0])


# --------------------------------------------------------------------- fitting


@dataclass
class FitResult:
    beta: np.ndarray
    converged: bool
    iterations: int
    moment_norm: float
    method: str
    reason: str = ""


def _moments(mf: MomentFunction, path: ObservationPath, beta, eps: float) -> np.ndarray:
    return mf.evaluate(path.y[1:], path.y[:-1], path.intervals, beta, eps).mean(axis=1)


def fit(mf: MomentFunction, data: ObservationPath, beta_init: Sequence[float] | None = None, *,
        eps: float = 1.0, max_iter: int = 200, tol: float = 1e-10, step_tol: float = 1e-12) -> FitResult:
    """Root of the sample moments ``m_T(beta) = 0`` (``r = d``) by Newton's
    method with a finite-difference Jacobian; scalar problems fall back to
    bisection on a bracket around the start."""
    if len(data) < 100:
        raise ValueError("need at least 100 observations to fit")
    if mf.r != mf.d:
        raise ValueError("fit solves square systems (r = d)")
    x = np.array([mf.model.beta0[i] for i in mf.target] if beta_init is None else beta_init, dtype=float)

    def m(b):
        with np.errstate(all="ignore"):
            return _moments(mf, data, b, eps)

    fx = m(x)
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(fx)):
            break
        if np.max(np.abs(fx)) <= tol:
            return FitResult(x, True, it - 1, float(np.max(np.abs(fx))), "newton")
        J = np.empty((mf.r, mf.d))
        for k in range(mf.d):
            step = 1e-6 * max(1.0, abs(x[k]))
            e = np.zeros(mf.d)
            e[k] = step
            J[:, k] = (m(x + e) - m(x - e)) / (2 * step)
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            break
        # damp steps that do not reduce the residual
        lam = 1.0
        while lam > 1e-4:
            x_new = x + lam * dx
            f_new = m(x_new)
            if np.all(np.isfinite(f_new)) and np.max(np.abs(f_new)) < np.max(np.abs(fx)) * (1 + 1e-12) + tol:
                break
            lam *= 0.5
        x, fx = x_new, f_new
        if np.max(np.abs(lam * dx)) <= step_tol * max(1.0, float(np.max(np.abs(x)))):
            ok = bool(np.all(np.isfinite(fx)))
            return FitResult(x, ok, it, float(np.max(np.abs(fx))), "newton",
                             "" if ok else "non-finite moments")
    if mf.d == 1:
        return _bisect(m, float(x[0]) if np.isfinite(x[0]) else float(mf.model.beta0[mf.target[0]]),
                       max_iter)
    return FitResult(x, False, max_iter, float(np.max(np.abs(fx))), "newton", "no convergence")


def _bisect(m, start: float, max_iter: int) -> FitResult:
    f = lambda b: float(m(np.array([b]))[0])  # noqa: E731
    width = max(1.0, abs(start)) * 0.1
    lo, hi = start - width, start + width
    for _ in range(60):
        flo, fhi = f(lo), f(hi)
        if np.isfinite(flo) and np.isfinite(fhi) and flo * fhi <= 0:
            root = optimize.brentq(f, lo, hi, xtol=1e-14, maxiter=max_iter)
            return FitResult(np.array([root]), True, max_iter, abs(f(root)), "bisection")
        width *= 2
        lo, hi = start - width, start + width
    return FitResult(np.array([start]), False, max_iter, float("nan"), "bisection", "no sign change found")


# --------------------------------------------------------------------- long-run variance


def bartlett_bandwidth(n: int) -> int:
    return int(math.floor(4 * (n / 100.0) ** (2.0 / 9.0)))


def _autocovariances(x: np.ndarray, L: int) -> list[np.ndarray]:
    n = x.shape[0]
    return [x[k:].T @ x[: n - k] / n for k in range(L + 1)]


def _as_series_list(series) -> list[np.ndarray]:
    if isinstance(series, np.ndarray):
        series = [series]
    out = []
    for s in series:
        s = np.asarray(s, dtype=float)
        out.append(s[:, None] if s.ndim == 1 else s)
    return out


def long_run_variance(series, bandwidth: int | None = None, *, center=None) -> np.ndarray:
    """Bartlett-kernel long-run covariance ``sum_j w_j Gamma_j``.

    ``series`` is one ``(N, r)`` array or a list of them (one per
    replication); estimates are pooled with weights ``N_i``.  ``center`` is
    subtracted instead of each series' own mean when given.  The default
    bandwidth is ``floor(4 (N/100)^(2/9))``.
    """
    total, weight = None, 0
    for x in _as_series_list(series):
        n = x.shape[0]
        L = bartlett_bandwidth(n) if bandwidth is None else int(bandwidth)
        x = x - (x.mean(axis=0) if center is None else np.asarray(center, dtype=float))
        gam = _autocovariances(x, min(L, n - 1))
        S = gam[0].copy()
        for k in range(1, len(gam)):
            w = 1.0 - k / (L + 1.0)
            S += w * (gam[k] + gam[k].T)
        total = S * n if total is None else total + S * n
        weight += n
    return total / weight


def serial_covariance_sum(series, bandwidth: int | None = None, *, center=None) -> np.ndarray:
    """Long-run covariance minus the lag-0 covariance (the ``T`` part)."""
    lrv = long_run_variance(series, bandwidth, center=center)
    lag0 = long_run_variance(series, 0, center=center)
    return lrv - lag0


# --------------------------------------------------------------------- Monte Carlo studies


@dataclass
class StudyConfig:
    model: DiffusionModel
    mf: MomentFunction
    law: SamplingLaw
    T: float
    replications: int
    seed: int
    center: str = "predicted"
    substeps: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.replications < 100:
            raise ValueError("a study needs at least 100 replications")
        if self.center not in ("predicted", "true"):
            raise ValueError("center must be 'predicted' or 'true'")
        if self.T <= 0:
            raise ValueError("time horizon must be positive")

    def describe(self) -> dict:
        return {"model": self.model.name, "beta0": list(self.model.beta0), "estimator": self.mf.name,
                "target": list(self.mf.target), "law": self.law.spec(), "eps": self.law.epsilon,
                "T": self.T, "replications": self.replications, "seed": self.seed,
                "center": self.center, "substeps": self.substeps}


@dataclass
class McStudyResult:
    config: dict
    estimates: np.ndarray
    n_obs: np.ndarray
    failures: list[tuple[int, str]]
    mean_bias: np.ndarray
    bias_se: np.ndarray
    variance: np.ndarray
    center: np.ndarray
    predicted_bias: np.ndarray
    predicted_omega: np.ndarray
    rows: list[dict] = field(default_factory=list)

    @property
    def bias_z(self) -> np.ndarray:
        return (self.mean_bias - self.predicted_bias) / self.bias_se

    def variance_band(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Band for the diagonal of ``variance`` under the predicted ``Omega``
        (``R * m2 / Omega`` is chi-square with ``R`` degrees of freedom)."""
        R = len(self.estimates)
        lo = stats.chi2.ppf((1 - level) / 2, R) / R
        hi = stats.chi2.ppf(1 - (1 - level) / 2, R) / R
        w = np.diag(self.predicted_omega)
        return w * lo, w * hi

    def variance_within_band(self, level: float = 0.95) -> np.ndarray:
        lo, hi = self.variance_band(level)
        v = np.diag(self.variance)
        return (v >= lo) & (v <= hi)

    def summary(self) -> dict:
        lo, hi = self.variance_band()
        return {
            "schema_version": STUDY_SCHEMA_VERSION,
            "config": self.config,
            "empirical": {"mean_bias": self.mean_bias.tolist(), "bias_se": self.bias_se.tolist(),
                          "variance": self.variance.tolist(), "replications": int(len(self.estimates)),
                          "failures": [{"replication": r, "reason": why} for r, why in self.failures],
                          "mean_n_obs": float(np.mean(self.n_obs))},
            "predicted": {"bias": self.predicted_bias.tolist(), "omega": self.predicted_omega.tolist(),
                          "center": self.center.tolist()},
            "z_scores": {"bias": self.bias_z.tolist(),
                         "variance_band_95": [lo.tolist(), hi.tolist()],
                         "variance_within_band": self.variance_within_band().tolist()},
        }

    def write(self, out_dir: str | Path, stem: str = "study") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        d = self.estimates.shape[1] if self.estimates.size else len(self.config["target"])
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replication", "status", "n_obs"] + [f"beta_{k}" for k in range(d)] + ["reason"])
            for row in self.rows:
                w.writerow([row["replication"], row["status"], row["n_obs"]]
                           + [repr(v) for v in row["beta"]] + [row["reason"]])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path, json_path


def _predictions(cfg: StudyConfig):
    from .asymptotics import Analysis

    an = Analysis(cfg.mf, cfg.law.with_epsilon(1.0))
    b = an.bias(2)
    eps = cfg.law.epsilon
    bias = eps * np.asarray(b[0]) + eps**2 * np.asarray(b[1])
    omega = np.atleast_2d(an.omega().value(eps))
    return bias, omega


def _replicate(cfg: StudyConfig, k: int):
    rng = replication_rng(cfg.seed, k)
    if cfg.model.is_ou():
        theta, s2 = cfg.model.beta0
        path = simulate_ou_path(theta, s2, cfg.law, cfg.T, rng)
    else:
        path = simulate_general_path(cfg.model, cfg.law, cfg.T, rng, cfg.substeps)
    try:
        res = fit(cfg.mf, path, eps=cfg.law.epsilon)
    except (ValueError, ArithmeticError) as exc:
        return k, None, len(path), str(exc)
    if not res.converged or not np.all(np.isfinite(res.beta)):
        return k, None, len(path), res.reason or "no convergence"
    return k, res.beta, len(path), ""


def monte_carlo_study(config: StudyConfig, *, predicted=None) -> McStudyResult:
    """Simulate and fit ``replications`` paths with per-replication seeds.

    ``predicted`` may supply ``(bias, omega)`` at the study's ``eps``;
    otherwise they come from the expansion (bias through ``eps^2``).
    """
    cfg = config
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(lambda k: _replicate(cfg, k), range(cfg.replications)))
    else:
        results = [_replicate(cfg, k) for k in range(cfg.replications)]
    results.sort(key=lambda r: r[0])
    failures = [(k, why) for k, beta, _, why in results if beta is None]
    if len(failures) > 0.05 * cfg.replications:
        raise StudyAbortedError(f"{len(failures)} of {cfg.replications} fits failed; first: {failures[0][1]}")
    est = np.array([beta for _, beta, _, _ in results if beta is not None])
    n_obs = np.array([n for _, _, n, _ in results])
    bias_pred, omega_pred = _predictions(cfg) if predicted is None else map(np.atleast_1d, predicted)
    bias_pred = np.atleast_1d(np.asarray(bias_pred, dtype=float))
    omega_pred = np.atleast_2d(np.asarray(omega_pred, dtype=float))
    beta0 = np.array([cfg.model.beta0[i] for i in cfg.mf.target])
    center = beta0 + bias_pred if cfg.center == "predicted" else beta0
    dev = est - beta0
    R = len(est)
    mean_bias = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / math.sqrt(R)
    c = est - center
    variance = cfg.T * (c.T @ c) / R
    rows = [{"replication": k, "status": "ok" if beta is not None else "failed", "n_obs": n,
             "beta": list(beta) if beta is not None else [float("nan")] * len(beta0), "reason": why}
            for k, beta, n, why in results]
    return McStudyResult(cfg.describe(), est, n_obs, failures, mean_bias, se, variance, center,
                         bias_pred, omega_pred, rows)


def study_result_to_dict(result: McStudyResult) -> dict:
    return result.summary()
