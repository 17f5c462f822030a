"""Command-line front end: config ingestion, experiment dispatch, CSV/JSON output.

Experiments: simulate-prelimit, simulate-limit, fixation, convergence,
verify, moments, dual.  Settings come from an INI-style config file
(sections [model], [init], [numerics], [run], [output]) overridden by
flags of the same kebab-case names.  Result files embed the fully resolved
configuration and are byte-identical across reruns with the same seed; a
sidecar ``<output>.summary.json`` carries the wall time and warnings.

Exit codes: 0 success, 1 configuration error, 2 numerical warning under
--strict.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import duality, limit, model, moments, prelimit, theory
from .model import ConfigurationError, InitialCondition, ModelParams

EXPERIMENTS = ("simulate-prelimit", "simulate-limit", "fixation",
               "convergence", "verify", "moments", "dual")

PHI_CHOICES = ("l0", "l1", "h0", "h1", "ones")

# config-file schema: section -> {key: (type, default)}
_SCHEMA = {
    "model": {
        "sigma": (float, 0.0),
        "gamma": (float, 1.0),
        "theta-l": (float, 0.0),
        "theta-h": (float, 0.0),
        "r": (float, 0.5),
        "n-scale": (int, 4),
    },
    "init": {
        "x": (float, 0.5),
        "p": (float, 0.5),
        "q": (float, 0.5),
    },
    "numerics": {
        "dt": (float, None),
        "horizon": (float, 1.0),
        "replicas": (int, 10000),
        "eps-absorb": (float, 1e-4),
        "t-cap": (float, 200.0),
        "n-max": (int, duality.N_MAX_DEFAULT),
        "n-values": (str, "4,8,16"),
        "draws": (int, 1000),
    },
    "run": {
        "experiment": (str, None),
        "seed": (int, 0),
        "strict": (bool, False),
        "phi": (str, "h0"),
    },
    "output": {
        "path": (str, None),
        "format": (str, "csv"),
    },
}


@dataclass
class RunConfig:
    experiment: str
    model: ModelParams
    init: InitialCondition
    dt: float | None
    horizon: float
    replicas: int
    eps_absorb: float
    t_cap: float
    n_max: int
    n_values: tuple
    draws: int
    phi: str
    seed: int
    strict: bool
    output: Path
    fmt: str

    def flat(self) -> dict:
        """Resolved configuration as section.key -> value (no hidden defaults)."""
        m, i = self.model, self.init
        return {
            "model.sigma": m.sigma, "model.gamma": m.gamma,
            "model.theta-l": m.theta_l, "model.theta-h": m.theta_h,
            "model.r": m.r, "model.n-scale": m.n_scale,
            "init.x": i.x, "init.p": i.p, "init.q": i.q,
            "numerics.dt": self.dt, "numerics.horizon": self.horizon,
            "numerics.replicas": self.replicas,
            "numerics.eps-absorb": self.eps_absorb,
            "numerics.t-cap": self.t_cap, "numerics.n-max": self.n_max,
            "numerics.n-values": ",".join(str(n) for n in self.n_values),
            "numerics.draws": self.draws,
            "run.experiment": self.experiment, "run.seed": self.seed,
            "run.strict": self.strict, "run.phi": self.phi,
            "output.path": str(self.output), "output.format": self.fmt,
        }


def _parse_value(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigurationError(
            f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")


def _read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(
                    f"unknown config key {key!r} in section [{section}]")
            typ, _ = _SCHEMA[section][key]
            values[f"{section}.{key}"] = _parse_value(
                f"{section}.{key}", raw, typ)
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fluctsel",
        description=("Simulation and verification toolkit for the two-locus "
                     "mutation-modifier model under fast fluctuating "
                     "selection."))
    ap.add_argument("--config", help="INI config file; flags override it")
    ap.add_argument("--experiment", choices=EXPERIMENTS)
    g = ap.add_argument_group("model")
    g.add_argument("--sigma", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--theta-l", type=float)
    g.add_argument("--theta-h", type=float)
    g.add_argument("--r", type=float)
    g.add_argument("--n-scale", type=int)
    g = ap.add_argument_group("initial condition")
    g.add_argument("--x", type=float)
    g.add_argument("--p", type=float)
    g.add_argument("--q", type=float)
    g = ap.add_argument_group("numerics")
    g.add_argument("--dt", type=float)
    g.add_argument("--horizon", type=float)
    g.add_argument("--replicas", type=int)
    g.add_argument("--eps-absorb", type=float)
    g.add_argument("--t-cap", type=float)
    g.add_argument("--n-max", type=int)
    g.add_argument("--n-values", type=str,
                   help="comma-separated pre-limit N values, e.g. 4,8,16")
    g.add_argument("--draws", type=int,
                   help="random draws for the verify battery")
    g = ap.add_argument_group("run")
    g.add_argument("--seed", type=int)
    g.add_argument("--strict", action="store_true", default=None,
                   help="escalate numerical warnings to exit code 2")
    g.add_argument("--phi", choices=PHI_CHOICES,
                   help="start table of the dual experiment")
    g = ap.add_argument_group("output")
    g.add_argument("--output", type=str)
    g.add_argument("--format", choices=("csv", "json"), dest="fmt")
    return ap


_FLAG_TO_KEY = {
    "experiment": "run.experiment", "sigma": "model.sigma",
    "gamma": "model.gamma", "theta_l": "model.theta-l",
    "theta_h": "model.theta-h", "r": "model.r", "n_scale": "model.n-scale",
    "x": "init.x", "p": "init.p", "q": "init.q",
    "dt": "numerics.dt", "horizon": "numerics.horizon",
    "replicas": "numerics.replicas", "eps_absorb": "numerics.eps-absorb",
    "t_cap": "numerics.t-cap", "n_max": "numerics.n-max",
    "n_values": "numerics.n-values", "draws": "numerics.draws",
    "seed": "run.seed", "strict": "run.strict", "phi": "run.phi",
    "output": "output.path", "fmt": "output.format",
}


def load_config(argv) -> RunConfig:
    """Parse flags (plus optional config file) into a validated RunConfig."""
    args = build_parser().parse_args(argv)
    values = {}
    for section, keys in _SCHEMA.items():
        for key, (_, default) in keys.items():
            values[f"{section}.{key}"] = default
    if args.config:
        values.update(_read_config_file(args.config))
    for flag, key in _FLAG_TO_KEY.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v

    experiment = values["run.experiment"]
    if experiment is None:
        raise ConfigurationError(
            "missing required key 'run.experiment' (flag --experiment)")
    if experiment not in EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {experiment!r}")

    try:
        params = ModelParams(
            sigma=values["model.sigma"], gamma=values["model.gamma"],
            theta_l=values["model.theta-l"], theta_h=values["model.theta-h"],
            r=values["model.r"], n_scale=values["model.n-scale"])
    except ConfigurationError as exc:
        raise ConfigurationError(f"[model] {exc}") from None
    try:
        init = InitialCondition(x=values["init.x"], p=values["init.p"],
                                q=values["init.q"])
    except ValueError as exc:
        raise ConfigurationError(f"[init] {exc}") from None

    try:
        n_values = tuple(int(tok) for tok in
                         str(values["numerics.n-values"]).split(",") if tok)
    except ValueError:
        raise ConfigurationError(
            f"numerics.n-values must be comma-separated integers, got "
            f"{values['numerics.n-values']!r}") from None

    fmt = values["output.format"]
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"output.format must be csv or json, got {fmt!r}")
    phi = values["run.phi"]
    if phi not in PHI_CHOICES:
        raise ConfigurationError(f"run.phi must be one of {PHI_CHOICES}")
    out = values["output.path"] or f"fluctsel-{experiment}.{fmt}"

    cfg = RunConfig(
        experiment=experiment, model=params, init=init,
        dt=values["numerics.dt"], horizon=values["numerics.horizon"],
        replicas=values["numerics.replicas"],
        eps_absorb=values["numerics.eps-absorb"],
        t_cap=values["numerics.t-cap"], n_max=values["numerics.n-max"],
        n_values=n_values, draws=values["numerics.draws"], phi=phi,
        seed=values["run.seed"], strict=bool(values["run.strict"]),
        output=Path(out), fmt=fmt)
    _validate_for_experiment(cfg)
    return cfg


def _validate_for_experiment(cfg: RunConfig) -> None:
    """Re-validate the dispatched module's preconditions at load time."""
    if cfg.horizon <= 0:
        raise ConfigurationError("numerics.horizon must be positive")
    exp = cfg.experiment
    if exp == "simulate-prelimit" or exp == "convergence":
        ns = cfg.n_values if exp == "convergence" else (cfg.model.n_scale,)
        for n in ns:
            if n < 1:
                raise ConfigurationError("n-scale values must be >= 1")
            if cfg.dt is not None:
                prelimit.check_dt(cfg.dt, prelimit.params_with_n(cfg.model, n))
    if exp in ("simulate-limit", "fixation") and cfg.dt is not None:
        limit.check_dt(cfg.dt, cfg.model)
    if exp == "fixation":
        if cfg.replicas < 1000:
            raise ConfigurationError("fixation needs numerics.replicas >= 1000")
        if not 0 < cfg.eps_absorb <= 0.01:
            raise ConfigurationError(
                f"numerics.eps-absorb must lie in (0, 0.01], got {cfg.eps_absorb}")
    if exp == "convergence" and cfg.replicas < 100:
        raise ConfigurationError("convergence needs numerics.replicas >= 100")
    if exp == "dual":
        two_s = 2.0 * cfg.model.sigma_sq_over_gamma
        if two_s >= 1.0:
            raise ConfigurationError(
                f"dual requires 2*sigma^2/gamma < 1 (non-explosion of the "
                f"dual); got {two_s:.4g}")
        if cfg.replicas < 1000:
            raise ConfigurationError("dual needs numerics.replicas >= 1000")
    if exp == "verify" and cfg.draws < 1:
        raise ConfigurationError("verify needs numerics.draws >= 1")


def _f17(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _config_lines(cfg: RunConfig) -> list[str]:
    return [f"# {k} = {_f17(v)}" for k, v in sorted(cfg.flat().items())]


def _write_result(cfg: RunConfig, headers, rows) -> None:
    cfg.output.parent.mkdir(parents=True, exist_ok=True)
    if cfg.fmt == "csv":
        lines = _config_lines(cfg)
        lines.append(",".join(headers))
        for row in rows:
            lines.append(",".join(_f17(v) for v in row))
        cfg.output.write_text("\n".join(lines) + "\n")
    else:
        payload = {
            "config": {k: (v if not isinstance(v, Path) else str(v))
                       for k, v in cfg.flat().items()},
            "columns": list(headers),
            "rows": [[None if v is None else
                      (float(v) if isinstance(v, (float, np.floating)) else
                       int(v) if isinstance(v, (int, np.integer)) else str(v))
                      for v in row] for row in rows],
        }
        cfg.output.write_text(json.dumps(payload, indent=2, sort_keys=True)
                              + "\n")


def _write_summary(cfg: RunConfig, wall: float, warnings: list[str]) -> None:
    sidecar = cfg.output.with_name(cfg.output.name + ".summary.json")
    payload = {
        "experiment": cfg.experiment,
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in cfg.flat().items()},
        "seed": cfg.seed,
        "result_path": str(cfg.output),
        "wall_time_s": wall,
        "warnings": warnings,
    }
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# experiment runners: each returns (headers, rows, warnings)
# ---------------------------------------------------------------------------

def _trajectory_rows(traj, with_env: bool):
    headers = ["t", "x_l0", "x_l1", "x_h0", "x_h1", "x_h", "x_0", "D", "env"]
    rows = []
    for i, t in enumerate(traj.times):
        s = traj.states[i]
        m = model.marginals(s)
        env = int(traj.env[i]) if with_env and traj.env is not None else None
        rows.append([t, s[0], s[1], s[2], s[3], float(m.x_h), float(m.x_0),
                     float(m.d), env])
    return headers, rows


def _run_simulate_prelimit(cfg: RunConfig):
    traj = prelimit.simulate_prelimit(cfg.model, cfg.init, cfg.horizon,
                                      dt=cfg.dt, seed=cfg.seed)
    headers, rows = _trajectory_rows(traj, with_env=True)
    return headers, rows, []


def _run_simulate_limit(cfg: RunConfig):
    traj = limit.simulate_limit(cfg.model, cfg.init, cfg.horizon,
                                dt=cfg.dt, seed=cfg.seed)
    headers, rows = _trajectory_rows(traj, with_env=False)
    return headers, rows, []


def _run_fixation(cfg: RunConfig):
    est = limit.estimate_fixation(cfg.model, cfg.init, cfg.replicas,
                                  eps_absorb=cfg.eps_absorb, t_cap=cfg.t_cap,
                                  dt=cfg.dt, seed=cfg.seed)
    corr = theory.CorrectionInput(init=cfg.init, theta_l=cfg.model.theta_l,
                                  theta_h=cfg.model.theta_h, r=cfg.model.r)
    correction = theory.fixation_correction(corr)
    approx = theory.approx_fixation(corr, cfg.model.sigma, cfg.model.gamma)
    headers = ["batch", "replicas_done", "p_fix_running", "stderr_running",
               "absorbed_fraction", "approx_fixation", "correction_theory"]
    rows = []
    outcomes = est.outcomes
    batch = 1024
    done = 0
    b = 0
    while done < len(outcomes):
        done = min(done + batch, len(outcomes))
        part = outcomes[:done]
        p_run = float(part.mean())
        se_run = float(np.sqrt(max(p_run * (1 - p_run), 0.0) / done))
        rows.append([b, done, p_run, se_run, est.absorbed_fraction,
                     approx, correction])
        b += 1
    warnings = []
    if est.censoring_warning:
        warnings.append(
            f"absorbed fraction {est.absorbed_fraction:.4f} is below 0.99; "
            f"capped replicas contribute their final x_h")
    return headers, rows, warnings


def _run_convergence(cfg: RunConfig):
    study = prelimit.convergence_study(cfg.model, cfg.init, cfg.horizon,
                                       cfg.n_values, cfg.replicas,
                                       seed=cfg.seed, dt=cfg.dt)
    headers = ["n_scale", "mean_xh", "mean_xh_se", "var_xh", "var_xh_se",
               "mean_x0", "mean_x0_se", "var_x0", "var_x0_se",
               "delta_mean_xh", "joint_se_mean_xh",
               "delta_var_xh", "joint_se_var_xh",
               "monotone_mean_xh", "monotone_var_xh"]
    rows = []
    ref = study.reference
    rows.append([0, ref.mean_xh, ref.mean_xh_se, ref.var_xh, ref.var_xh_se,
                 ref.mean_x0, ref.mean_x0_se, ref.var_x0, ref.var_x0_se,
                 None, None, None, None,
                 study.monotone["mean_xh"], study.monotone["var_xh"]])
    for row in study.rows:
        d = row.deltas
        rows.append([row.n_scale, row.mean_xh, row.mean_xh_se, row.var_xh,
                     row.var_xh_se, row.mean_x0, row.mean_x0_se, row.var_x0,
                     row.var_x0_se, d["mean_xh"][0], d["mean_xh"][1],
                     d["var_xh"][0], d["var_xh"][1],
                     study.monotone["mean_xh"], study.monotone["var_xh"]])
    warnings = []
    if study.fast_noise_warning:
        warnings.append("2*sigma^2/gamma >= 1: outside the fast-noise regime "
                        "assumed by the duality oracle")
    return headers, rows, warnings


def _run_verify(cfg: RunConfig):
    rng = np.random.default_rng(cfg.seed)
    n = 10000
    x, p, q, r = rng.random((4, n))
    tl, th = rng.random((2, n)) * 10.0

    direct = theory.correction_direct(x, p, q, r, tl, th)
    factored = theory.correction_factored(x, p, q, r, tl, th)
    total = moments.total_integral_values(x, p, q, r, tl, th)
    d_forms = float(np.abs(direct - factored).max())
    d_total = float(np.abs(total - direct).max())
    battery = theory.symmetry_battery(cfg.seed, cfg.draws)

    headers = ["check", "draws", "max_abs_delta", "failures", "passed"]
    rows = [
        ["correction_two_forms", n, d_forms, 0, d_forms < theory.IDENTITY_TOL],
        ["total_integral_identity", n, d_total, 0,
         d_total < theory.IDENTITY_TOL],
        ["symmetry_battery", cfg.draws, None, len(battery.failures),
         battery.passed],
    ]
    passed = sum(1 for row in rows if row[-1])
    print(f"verify: {passed}/{len(rows)} checks passed")
    for row in rows:
        print(f"  {'PASS' if row[-1] else 'FAIL'} {row[0]}")
    warnings = [f"verification check failed: {row[0]}"
                for row in rows if not row[-1]]
    return headers, rows, warnings


def _run_moments(cfg: RunConfig):
    corr = theory.CorrectionInput(init=cfg.init, theta_l=cfg.model.theta_l,
                                  theta_h=cfg.model.theta_h, r=cfg.model.r)
    t = cfg.horizon
    quantities = [
        ("integral_i1", moments.integral_i1(cfg.init, cfg.model)),
        ("integral_i2", moments.integral_i2(cfg.init, cfg.model)),
        ("integral_i3", moments.integral_i3(cfg.init, cfg.model)),
        ("total_integral", moments.total_integral(cfg.init, cfg.model)),
        ("correction_direct", theory.fixation_correction(corr)),
        ("correction_factored", theory.fixation_correction_factored(corr)),
        ("approx_fixation",
         theory.approx_fixation(corr, cfg.model.sigma, cfg.model.gamma)),
    ]
    for a, b in (("h", None), ("h", 0), ("l", 0), ("h", 1), ("l", 1)):
        spec = moments.MomentSpec(targets=((a, b),), time=t)
        label = f"mean_x_{a}{'' if b is None else b}_at_t"
        quantities.append((label, moments.first_moment(spec, cfg.init,
                                                       cfg.model)))
    headers = ["quantity", "value"]
    rows = [[name, val] for name, val in quantities]
    return headers, rows, []


def _run_dual(cfg: RunConfig):
    dual_cfg = duality.DualConfig(
        sigma_sq_over_gamma=cfg.model.sigma_sq_over_gamma,
        theta_l=cfg.model.theta_l, theta_h=cfg.model.theta_h, r=cfg.model.r,
        n_max=cfg.n_max)
    if cfg.phi == "ones":
        phi = np.ones(4)
    else:
        phi = duality.indicator_table(cfg.phi[0], int(cfg.phi[1]))
    est = duality.moment_via_duality(phi, cfg.horizon, cfg.init, dual_cfg,
                                     cfg.replicas, seed=cfg.seed)
    headers = ["phi", "t", "estimate", "se", "replicas", "truncation_events",
               "truncated_replicas", "max_n", "mean_final_n"]
    rows = [[cfg.phi, cfg.horizon, est.value, est.se, est.replicas,
             est.truncation_events, est.truncated_replicas, est.max_n,
             est.mean_final_n]]
    warnings = []
    if est.biased:
        warnings.append(
            f"{est.truncation_events} growth jumps suppressed at "
            f"n_max={cfg.n_max}; the duality estimate is biased")
    return headers, rows, warnings


_RUNNERS = {
    "simulate-prelimit": _run_simulate_prelimit,
    "simulate-limit": _run_simulate_limit,
    "fixation": _run_fixation,
    "convergence": _run_convergence,
    "verify": _run_verify,
    "moments": _run_moments,
    "dual": _run_dual,
}


def run(cfg: RunConfig) -> int:
    """Dispatch an experiment, write results + summary, return exit status."""
    t0 = time.time()
    headers, rows, warnings = _RUNNERS[cfg.experiment](cfg)
    _write_result(cfg, headers, rows)
    _write_summary(cfg, time.time() - t0, warnings)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if warnings and cfg.strict:
        return 2
    return 0


def main(argv=None) -> int:
    try:
        cfg = load_config(argv if argv is not None else sys.argv[1:])
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
