"""Command line entry point: ``fadingmem <experiment> --config PATH [...]``.

Exit codes: 0 when every assertion holds, 1 when an assertion fails or a
run diverges (reports are still written), 2 for configuration or
assumption errors detected before any simulation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .constants import (
    Check, ConstantsLedger, derive_ledger, lyapunov_constants, validate_ledger,
)
from .estimators import (
    PreconditionError, _jsonable, exp_moment_check, galerkin_refinement,
    hat_contraction_check, lyapunov_check, stationary_moments, tilde_contraction_check,
    wasserstein_contraction,
)
from .integrator import (
    SERIES, InitialData, SimulationDiverged, TrajectoryRecord, history_difference,
    initial_norm_sq, move_towards, run_coupled_ensemble, simulate_ensemble,
)
from .kernel import check_kernel_assumptions, kernel_l1
from .nonlinearity import AssumptionViolation, derive_nl_constants
from .spectral import check_noise_assumptions

EXPERIMENTS = ("check", "constants", "simulate", "couple", "lyapunov", "wasserstein",
               "stationary", "convergence")


# -- report writing ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def record_table(record: TrajectoryRecord, extras: dict | None = None) -> dict:
    """Flatten a record to columns, rows ordered by trajectory then time."""
    B, T = record.n_paths, record.times.size
    table = {"t": np.tile(record.times, B)}
    for name in SERIES:
        table[name] = record[name].reshape(-1)
    for name, arr in (extras or {}).items():
        table[name] = np.asarray(arr).reshape(-1)
    table["trajectory"] = np.repeat(record.trajectories, T)
    return table


def write_csv(table: dict, path: Path):
    cols = list(table)
    n = len(next(iter(table.values()))) if cols else 0
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(n):
                w.writerow([_fmt(table[c][i]) for c in cols])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror}") from exc


def write_report(table: dict | TrajectoryRecord, path, fmt: str = "csv", *, config_echo=None,
                 ledger=None, assertions=(), details=None) -> Path:
    """Write a CSV series file or the JSON report ``{config_echo, ledger, series, assertions}``."""
    if isinstance(table, TrajectoryRecord):
        table = record_table(table)
    path = Path(path)
    if fmt == "csv":
        write_csv(table, path)
        return path
    if fmt != "json":
        raise ValueError("format must be csv or json")
    doc = {
        "config_echo": config_echo,
        "ledger": ledger,
        "series": {k: _jsonable(np.asarray(v)) for k, v in table.items()},
        "assertions": [c.to_dict() for c in assertions],
    }
    if details is not None:
        doc["details"] = _jsonable(details)
    try:
        path.write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror}") from exc
    return path


# -- experiments ---------------------------------------------------------------------

class Outcome:
    def __init__(self, table: dict | None = None, assertions=(), details=None, ledger=None):
        self.table = table if table is not None else {}
        self.assertions = list(assertions)
        self.details = details
        self.ledger = ledger


def _nl_constants(cfg: ExperimentConfig):
    return derive_nl_constants(cfg.nonlinearity_spec())


def _ledger(cfg: ExperimentConfig, n: int | None = None) -> ConstantsLedger:
    st = cfg.stepper(n)
    return derive_ledger(st.kernel, st.basis, st.noise, _nl_constants(cfg))


def _try_ledger(cfg):
    try:
        return _ledger(cfg)
    except AssumptionViolation:
        return None


def _paths(cfg: ExperimentConfig) -> range:
    return range(cfg.ensemble)


def run_check(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    checks = []
    kreport = check_kernel_assumptions(st.kernel)
    checks += [Check(f"kernel_{k}", ok, 0.0) for k, ok in kreport.passed.items()]
    details = {"kernel": kreport.to_dict(), "kernel_l1": kernel_l1(st.kernel)}
    try:
        nlc = _nl_constants(cfg)
        details["nonlinearity"] = nlc.to_dict()
        checks.append(Check("nonlinearity_dissipative", True, 0.0))
    except AssumptionViolation as exc:
        details["nonlinearity_error"] = str(exc)
        checks.append(Check("nonlinearity_dissipative", False, -1.0))
        return Outcome(None, checks, details)
    ledger = None
    try:
        ledger = derive_ledger(st.kernel, st.basis, st.noise, nlc)
    except AssumptionViolation as exc:
        details["ledger_error"] = str(exc)
    checks += validate_ledger(ledger, st.kernel, st.basis, st.noise, nlc)
    if ledger is not None:
        details["noise"] = check_noise_assumptions(st.noise, st.basis, ledger.n_bar)
    return Outcome(None, checks, details, ledger)


def run_constants(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    nlc = _nl_constants(cfg)
    ledger = derive_ledger(st.kernel, st.basis, st.noise, nlc)
    checks = validate_ledger(ledger, st.kernel, st.basis, st.noise, nlc)
    table = {"name": list(ledger.to_dict()), "value": list(ledger.to_dict().values())}
    return Outcome(table, checks, {"nonlinearity": nlc.to_dict()}, ledger)


def run_simulate(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    x = cfg.initial("x", st)
    rec = simulate_ensemble(st, x, cfg.master_seed, _paths(cfg), jobs=jobs,
                            record_every=cfg.record_every, snapshots=cfg.snapshots)
    extras = {}
    if cfg.snapshots:
        extras = {f"u_{k + 1}": rec.snapshots[:, :, k] for k in range(st.n_modes)}
    return Outcome(record_table(rec, extras), (), {"x_norm_sq": initial_norm_sq(x, st)},
                   _try_ledger(cfg))


def run_couple(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    ledger = _ledger(cfg)
    x = cfg.initial("x", st)
    y = cfg.initial("y", st) if cfg.coupling == "tilde" else None
    run = run_coupled_ensemble(cfg.coupling, x, y, st, ledger, cfg.master_seed, _paths(cfg),
                               cfg.record_every, jobs)
    extras = {"dist_sq": run.dist_sq, "partner_g": run.partner["g"]}
    if cfg.coupling == "tilde":
        extras["budget"] = run.budget
        rep = tilde_contraction_check(run, ledger, cfg.tol, cfg.t_min, slope_limit=cfg.slope_limit)
    else:
        rep = hat_contraction_check(run, ledger, cfg.tol, cfg.t_min)
    return Outcome(record_table(run.base, extras), rep.checks, rep.data, ledger)


def _mean_table(rec: TrajectoryRecord) -> dict:
    table = {"t": rec.times}
    for name in SERIES:
        table[name] = rec[name].mean(axis=0)
    B = rec.n_paths
    table["se_g"] = rec["g"].std(axis=0, ddof=1) / math.sqrt(B) if B > 1 else 0 * rec.times
    return table


def run_lyapunov(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    nlc = _nl_constants(cfg)
    c, B = lyapunov_constants(st.kernel, st.basis, st.noise, nlc)
    ledger = _try_ledger(cfg)
    beta = cfg.beta
    if beta is not None and ledger is not None and not 0 <= beta < ledger.beta_max:
        raise PreconditionError(f"beta={beta:g} outside [0, {ledger.beta_max:g})")
    x = cfg.initial("x", st)
    rec = simulate_ensemble(st, x, cfg.master_seed, _paths(cfg), jobs=jobs,
                            record_every=cfg.record_every)
    deterministic = not np.any(st.noise.lambdas) and st.nonlinearity.family == "zero"
    rep = lyapunov_check(rec, c, B, deterministic=deterministic, atol=1e-10 if deterministic else 0.0)
    details = {"lyapunov": rep.data, "c_lyap": c, "B_lyap": B}
    checks = list(rep.checks)
    table = _mean_table(rec)
    if beta is not None and ledger is not None:
        erep = exp_moment_check(rec, beta, ledger, cfg.t_ref)
        checks += erep.checks
        details["exp_moment"] = erep.data
        table["exp_beta_g"] = erep.data["estimate"]
    return Outcome(table, checks, details, ledger)


def run_wasserstein(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    ledger = _ledger(cfg)
    N = cfg.N_multiplier * ledger.N_min
    x = cfg.initial("x", st)
    y = cfg.initial("y", st)
    n = st.n_modes
    gap = InitialData(np.asarray(y.u0) - np.asarray(x.u0), history_difference(y.eta0, x.eta0, n))
    dxy = math.sqrt(initial_norm_sq(gap, st))
    if dxy == 0:
        raise ConfigError("wasserstein: x and y coincide")
    # place y at distance 1/N from x so that d_N(x, y) = 1
    y = move_towards(x, y, 1.0 / (N * dxy), n)
    run = run_coupled_ensemble("tilde", x, y, st, ledger, cfg.master_seed, _paths(cfg),
                               cfg.record_every, jobs)
    rep = wasserstein_contraction(run, ledger, N, t_min=1.0 if cfg.t_min is None else cfg.t_min)
    d = rep.data
    table = {"t": d["times"], "w_hat": d["w_hat"], "ratio": d["ratio"], "se": d["se"]}
    return Outcome(table, rep.checks, d, ledger)


def run_stationary(cfg: ExperimentConfig, jobs: int) -> Outcome:
    st = cfg.stepper()
    ledger = _try_ledger(cfg)
    beta = cfg.beta if cfg.beta is not None else (ledger.default_beta() if ledger else 0.0)
    x = cfg.initial("x", st)
    rec = simulate_ensemble(st, x, cfg.master_seed, _paths(cfg), jobs=jobs,
                            record_every=cfg.record_every)
    rep = stationary_moments(rec, cfg.burn_in, beta, cfg.n_power, ledger)
    return Outcome(_mean_table(rec), rep.checks, rep.data, ledger)


def run_convergence(cfg: ExperimentConfig, jobs: int) -> Outcome:
    n_ref = cfg.refine_n_ref if cfg.refine_n_ref is not None else max(cfg.refine_n)
    n_top = max(n_ref, max(cfg.refine_n))
    st = cfg.stepper(n_top, T=cfg.refine_T)
    x = cfg.initial("x", st)
    rep = galerkin_refinement(st, x, cfg.refine_n, cfg.refine_dt, cfg.master_seed, _paths(cfg),
                              n_ref=n_ref, jobs=jobs)
    d = rep.data
    rows_kind = ["space"] * len(d["n_list"]) + ["time"] * len(d["dt_list"])
    table = {
        "kind": rows_kind,
        "n": list(d["n_list"]) + [n_top] * len(d["dt_list"]),
        "dt": [cfg.dt] * len(d["n_list"]) + list(d["dt_list"]),
        "error": list(d["spatial_errors"]) + list(d["temporal_errors"]),
    }
    return Outcome(table, rep.checks, d, _try_ledger(cfg))


RUNNERS = {
    "check": run_check, "constants": run_constants, "simulate": run_simulate,
    "couple": run_couple, "lyapunov": run_lyapunov, "wasserstein": run_wasserstein,
    "stationary": run_stationary, "convergence": run_convergence,
}


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fadingmem",
                                description="Stochastic reaction-diffusion with fading memory: "
                                            "simulation and verification experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON config file or preset name (ref1, ref1_tilde, ref1_hat)")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes; results do not depend on it")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.master_seed = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        outcome = RUNNERS[args.experiment](cfg, args.jobs)
    except (ConfigError, AssumptionViolation, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimulationDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = outcome.ledger.to_dict() if outcome.ledger is not None else None
    path = out / f"{args.experiment}.{args.format}"
    write_report(outcome.table, path, args.format, config_echo=cfg.to_dict(), ledger=ledger,
                 assertions=outcome.assertions, details=outcome.details)
    if args.format == "csv":
        # assertions and provenance always travel in a JSON sidecar
        write_report({}, out / f"{args.experiment}.report.json", "json", config_echo=cfg.to_dict(),
                     ledger=ledger, assertions=outcome.assertions, details=outcome.details)
    failed = [c for c in outcome.assertions if not c.passed]
    for c in outcome.assertions:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} (margin {c.margin:.6g})")
    print(f"wrote {path}")
    return 1 if failed else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
