"""Command-line entry point: ``simulate``, ``fit``, ``expand`` and ``validate``.

Exit codes: 0 success, 1 validation failure or non-converged fit, 2 bad
input (arguments, config, model text, observation file), 3 engine error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import symexpr as sx
from .asymptotics import DegenerateEstimatingEquationError, expansion_report
from .model import REGISTRY, DiffusionModel, get_model, load_model, model_from_mapping
from .moments import euler_score, moment_function_from_text, ou_mle_score
from .sampling import SamplingLaw, SingularityError, law_from_spec
from .simlab import (
    ObservationFormatError,
    ObservationPath,
    SimulationError,
    StudyAbortedError,
    StudyConfig,
    fit,
    monte_carlo_study,
    simulate_general_path,
    simulate_ou_path,
)

__all__ = ["main", "build_parser", "InputError", "CONFIG_KEYS"]

CONFIG_KEYS = {"model", "sampling", "estimator", "eps", "study", "seed", "output", "input", "threads"}
SAMPLING_KEYS = {"law"}
ESTIMATOR_KEYS = {"kind", "target", "h_tilde", "H", "name", "Q"}
STUDY_KEYS = {"T", "replications", "threshold", "center", "substeps"}
TARGETS = {"theta": "theta", "sigma2": "sigma2", "gamma": "sigma2", "both": "both"}


class InputError(ValueError):
    """Bad user input; maps to exit code 2."""


# --------------------------------------------------------------------- config


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        import yaml

        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InputError(f"config {path} is neither JSON nor YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise InputError(f"config {path} must be a mapping")
    _check_keys(doc, CONFIG_KEYS, "config")
    for section, keys in (("sampling", SAMPLING_KEYS), ("estimator", ESTIMATOR_KEYS), ("study", STUDY_KEYS)):
        if section in doc:
            if not isinstance(doc[section], Mapping):
                raise InputError(f"config section {section!r} must be a mapping")
            _check_keys(doc[section], keys, f"config section {section!r}")
    return dict(doc)


def _check_keys(doc: Mapping, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InputError(f"unknown key(s) in {where}: {', '.join(map(str, unknown))}")


def _floats(text, what: str) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except (TypeError, ValueError):
        raise InputError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None


def _pick(args, name: str, cfg_value, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return default if cfg_value is None else cfg_value


# --------------------------------------------------------------------- builders


def _model(args, cfg: dict) -> DiffusionModel:
    beta0 = _floats(args.beta0, "--beta0") if args.beta0 is not None else None
    try:
        if args.model_file:
            m = load_model(args.model_file)
        elif args.drift or args.diffusion:
            if not (args.drift and args.diffusion):
                raise InputError("--drift and --diffusion must be given together")
            m = model_from_mapping({"name": "custom", "drift_expr": args.drift, "diffusion_expr": args.diffusion,
                                    "theta_dim": 1, "gamma_dim": 1, "beta0": beta0 or [1.0, 1.0]})
        elif args.model:
            m = get_model(args.model, beta0)
        elif "model" in cfg:
            doc = cfg["model"]
            if isinstance(doc, str):
                m = get_model(doc, beta0)
            elif isinstance(doc, Mapping) and set(doc) <= {"name", "beta0"} and doc.get("name") in REGISTRY:
                m = get_model(doc["name"], beta0 or doc.get("beta0"))
            elif isinstance(doc, Mapping):
                m = model_from_mapping(doc)
            else:
                raise InputError("config 'model' must be a registry name or a mapping")
        else:
            m = get_model("ou", beta0)
    except sx.ParseError as exc:
        raise InputError(f"model expression: {exc}") from None
    except (ValueError, KeyError, OSError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"model: {exc}") from None
    if beta0 is not None and tuple(beta0) != tuple(m.beta0):
        try:
            m = m.with_beta0(beta0)
        except ValueError as exc:
            raise InputError(f"--beta0: {exc}") from None
    return m


def _law(args, cfg: dict, eps: float) -> SamplingLaw:
    spec = _pick(args, "law", cfg.get("sampling", {}).get("law"), "dirac:1")
    try:
        return law_from_spec(spec, eps)
    except ValueError as exc:
        raise InputError(f"sampling law: {exc}") from None


def _estimator(args, cfg: dict, model: DiffusionModel):
    est = dict(cfg.get("estimator", {}))
    kind = _pick(args, "estimator", est.get("kind"), "euler")
    target = TARGETS.get(str(_pick(args, "target", est.get("target"), "both")))
    if target is None:
        raise InputError(f"--target must be one of {', '.join(sorted(TARGETS))}")
    try:
        if kind == "euler":
            return euler_score(model, which=target)
        if kind == "mle":
            if not model.is_ou():
                raise InputError("the exact likelihood score is only available for the OU model")
            return ou_mle_score(model, which=target)
        if kind == "custom":
            if "h_tilde" not in est:
                raise InputError("custom estimator needs 'h_tilde' in the config estimator section")
            idx = {"theta": model.theta_indices, "sigma2": model.gamma_indices,
                   "both": model.theta_indices + model.gamma_indices}[target]
            return moment_function_from_text(model, est["h_tilde"], est.get("H"), idx, est.get("name", "custom"))
    except sx.ParseError as exc:
        raise InputError(f"estimator expression: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"estimator: {exc}") from None
    raise InputError(f"unknown estimator {kind!r} (euler, mle, custom)")


def _eps_list(args, cfg: dict) -> list[float]:
    vals = _floats(_pick(args, "eps", cfg.get("eps"), "0.1"), "--eps")
    if not vals or any(v <= 0 for v in vals):
        raise InputError("--eps values must be positive")
    return vals


def _single_eps(args, cfg: dict) -> float:
    vals = _eps_list(args, cfg)
    if len(vals) != 1:
        raise InputError("this command takes a single --eps value")
    return vals[0]


def _out_dir(args, cfg: dict) -> Path | None:
    out = _pick(args, "out", cfg.get("output"))
    if out is None:
        return None
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _seed(args, cfg: dict) -> int:
    seed = _pick(args, "seed", cfg.get("seed"), 0)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise InputError(f"--seed must be an integer, got {seed!r}") from None
    if not 0 <= seed < 2**64:
        raise InputError("--seed must be an unsigned 64-bit integer")
    return seed


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


# --------------------------------------------------------------------- commands


def cmd_expand(args, cfg: dict) -> int:
    model = _model(args, cfg)
    mf = _estimator(args, cfg, model)
    eps = _eps_list(args, cfg)
    law = _law(args, cfg, 1.0)
    Q = int(_pick(args, "Q", cfg.get("estimator", {}).get("Q"), 2))
    if not 1 <= Q <= 2:
        raise InputError("--Q must be 1 or 2")
    report = expansion_report(mf, law, eps, Q=Q)
    coef = _csv_text(("quantity", "i", "j", "power", "coefficient", "error_order"), report.coefficient_rows())
    vals = _csv_text(("quantity", "i", "j", "eps", "value", "error_order"), report.evaluation_rows())
    print(f"model {model.name} beta0={list(model.beta0)} estimator {mf.name} law {law.spec()}")
    print(report.table())
    print()
    sys.stdout.write(vals)
    out = _out_dir(args, cfg)
    if out is not None:
        (out / "expansion_coefficients.csv").write_text(coef, encoding="utf-8")
        (out / "expansion_values.csv").write_text(vals, encoding="utf-8")
        (out / "expansion_table.txt").write_text(report.table() + "\n", encoding="utf-8")
    return 0


def cmd_simulate(args, cfg: dict) -> int:
    model = _model(args, cfg)
    law = _law(args, cfg, _single_eps(args, cfg))
    study = cfg.get("study", {})
    T = float(_pick(args, "T", study.get("T"), 100.0))
    if T <= 0:
        raise InputError("--T must be positive")
    substeps = int(_pick(args, "substeps", study.get("substeps"), 64))
    rng = np.random.default_rng(np.random.SeedSequence([_seed(args, cfg), 0]))
    if model.is_ou():
        path = simulate_ou_path(model.beta0[0], model.beta0[1], law, T, rng)
    else:
        if substeps < 20:
            raise InputError("--substeps must be at least 20")
        path = simulate_general_path(model, law, T, rng, substeps)
    out = _out_dir(args, cfg)
    if out is None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n", "tau", "delta", "y"))
        for n, (t, d, v) in enumerate(zip(path.tau, path.delta, path.y)):
            w.writerow([n, repr(float(t)), repr(float(d)), repr(float(v))])
        sys.stdout.write(buf.getvalue())
    else:
        path.to_csv(out / "observations.csv")
        print(f"wrote {len(path)} observations to {out / 'observations.csv'}")
    return 0


def cmd_fit(args, cfg: dict) -> int:
    model = _model(args, cfg)
    mf = _estimator(args, cfg, model)
    src = _pick(args, "input", cfg.get("input"))
    if not src:
        raise InputError("fit needs --input PATH")
    eps = _single_eps(args, cfg) if (args.eps is not None or "eps" in cfg) else 1.0
    try:
        path = ObservationPath.from_csv(src)
    except OSError as exc:
        raise InputError(f"cannot read {src}: {exc.strerror}") from None
    if len(path) < 100:
        raise InputError(f"fit needs at least 100 observations, got {len(path)}")
    res = fit(mf, path, eps=eps)
    m = mf.evaluate(path.y[1:], path.y[:-1], path.intervals, res.beta, eps).mean(axis=1)
    names = [f"beta[{i}]" for i in mf.target]
    doc = {"estimator": mf.name, "model": model.name, "n_obs": len(path), "converged": res.converged,
           "iterations": res.iterations, "method": res.method, "reason": res.reason,
           "estimate": dict(zip(names, map(float, res.beta))),
           "moment_norm": float(np.max(np.abs(m))), "Q_T": float(m @ m)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    out = _out_dir(args, cfg)
    if out is not None:
        (out / "fit.json").write_text(text, encoding="utf-8")
    if not res.converged:
        print(f"error: fit did not converge: {res.reason}", file=sys.stderr)
        return 1
    return 0


def cmd_validate(args, cfg: dict) -> int:
    model = _model(args, cfg)
    mf = _estimator(args, cfg, model)
    law = _law(args, cfg, _single_eps(args, cfg))
    study = cfg.get("study", {})
    T = float(_pick(args, "T", study.get("T"), 2000.0))
    reps = int(_pick(args, "replications", study.get("replications"), 400))
    thr = float(_pick(args, "threshold", study.get("threshold"), 3.0))
    center = _pick(args, "center", study.get("center"), "predicted")
    substeps = int(_pick(args, "substeps", study.get("substeps"), 64))
    threads = int(_pick(args, "threads", cfg.get("threads"), 1))
    try:
        config = StudyConfig(model, mf, law, T, reps, _seed(args, cfg), center, substeps, max(1, threads))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    res = monte_carlo_study(config)
    lo, hi = res.variance_band()
    rows = []
    ok = True
    for k, i in enumerate(mf.target):
        z = float(res.bias_z[k])
        within = bool(res.variance_within_band()[k])
        passed = abs(z) <= thr and within
        ok &= passed
        rows.append({"parameter": f"beta[{i}]", "mean_bias": float(res.mean_bias[k]),
                     "predicted_bias": float(res.predicted_bias[k]), "bias_se": float(res.bias_se[k]),
                     "bias_z": z, "variance": float(res.variance[k, k]),
                     "predicted_omega": float(res.predicted_omega[k, k]), "band_low": float(lo[k]),
                     "band_high": float(hi[k]), "pass": "yes" if passed else "no"})
    cols = ("parameter", "mean_bias", "predicted_bias", "bias_se", "bias_z", "variance", "predicted_omega",
            "band_low", "band_high", "pass")
    table = _csv_text(cols, rows)
    sys.stdout.write(table)
    out = _out_dir(args, cfg)
    if out is not None:
        res.write(out)
        (out / "validate.csv").write_text(table, encoding="utf-8")
    return 0 if ok else 1


COMMANDS = {"expand": cmd_expand, "simulate": cmd_simulate, "fit": cmd_fit, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--eps", help="comma-separated sampling scales")
    common.add_argument("--threads", type=int, help="worker threads for replications")
    common.add_argument("--model", help=f"registry model ({', '.join(sorted(REGISTRY))})")
    common.add_argument("--model-file", help="model definition file (YAML/JSON)")
    common.add_argument("--drift", help="drift expression in x, theta")
    common.add_argument("--diffusion", help="diffusion coefficient sigma(x) in x, gamma")
    common.add_argument("--beta0", help="true parameters, comma-separated")
    common.add_argument("--law", help="sampling law, e.g. dirac:1, exponential:1, uniform:0,2")
    common.add_argument("--estimator", help="euler, mle or custom")
    common.add_argument("--target", help="theta, sigma2 or both")

    p = argparse.ArgumentParser(prog="diffexpand", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("expand", parents=[common], help="expansion report")
    e.add_argument("--Q", type=int, help="bias order (1 or 2)")
    s = sub.add_parser("simulate", parents=[common], help="simulate an observation path")
    s.add_argument("--T", type=float, help="time horizon")
    s.add_argument("--substeps", type=int, help="Euler-Maruyama steps per interval (non-OU)")
    f = sub.add_parser("fit", parents=[common], help="fit an estimator to an observation CSV")
    f.add_argument("--input", help="observation CSV (columns n,tau,delta,y)")
    v = sub.add_parser("validate", parents=[common], help="Monte Carlo check of bias and variance")
    v.add_argument("--T", type=float, help="time horizon per replication")
    v.add_argument("--replications", type=int)
    v.add_argument("--threshold", type=float, help="largest admissible |z| (default 3)")
    v.add_argument("--center", choices=("predicted", "true"))
    v.add_argument("--substeps", type=int)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _read_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (InputError, ObservationFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularityError, DegenerateEstimatingEquationError, sx.ExprError, StudyAbortedError,
            SimulationError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
