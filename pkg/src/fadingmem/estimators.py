"""Monte Carlo checks of moment bounds, coupling contraction and ergodicity.

Every report here is a pure function of the records passed in. Assertions
carry a signed margin (positive means satisfied) so that serialized reports
show how close each check came.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import Check, ConstantsLedger
from .integrator import (
    CoupledRun, InitialData, StepperConfig, TrajectoryRecord, simulate_ensemble,
)
from .spectral import NoiseSpec, build_basis, user_basis


class PreconditionError(ValueError):
    pass


MC_SLACK = 3.0


@dataclass
class Report:
    name: str
    checks: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, margin: float, passed: bool | None = None) -> Check:
        margin = float(margin)
        c = Check(name, bool(margin >= 0 if passed is None else passed), margin)
        self.checks.append(c)
        return c

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks], "data": _jsonable(self.data)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- ensemble statistics --------------------------------------------------------

@dataclass
class EnsembleStats:
    times: np.ndarray
    mean: dict
    var: dict
    se: dict
    size: int


def ensemble_stats(record: TrajectoryRecord, extra: dict | None = None) -> EnsembleStats:
    """Mean, variance and standard error across paths of every recorded series."""
    series = dict(record.series)
    if extra:
        series.update(extra)
    B = record.n_paths
    mean, var, se = {}, {}, {}
    for k, v in series.items():
        mean[k] = v.mean(axis=0)
        var[k] = v.var(axis=0, ddof=1) if B > 1 else np.zeros(v.shape[1])
        se[k] = np.sqrt(var[k] / B)
    return EnsembleStats(record.times, mean, var, se, B)


# -- decay fits -------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple

    def to_dict(self) -> dict:
        return {"rate": self.rate, "intercept": self.intercept, "r_squared": self.r_squared,
                "window": list(self.window)}


def fit_decay_rate(times, values, window: tuple | None = None) -> DecayFit:
    """Least squares of log(value) on t; ``rate`` is minus the slope."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    sel = (t >= window[0]) & (t <= window[1])
    t, v = t[sel], v[sel]
    if t.size < 3:
        raise PreconditionError("decay fit needs at least 3 points in the window")
    if np.any(v <= 0):
        raise PreconditionError("decay fit needs positive values")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return DecayFit(float(-slope), float(intercept), r2, (float(window[0]), float(window[1])))


# -- energy moments -----------------------------------------------------------------

def lyapunov_check(record: TrajectoryRecord, c_lyap: float, B_lyap: float, *,
                   deterministic: bool = False, atol: float = 0.0) -> Report:
    """Mean energy against ``exp(-c t) g(0) + B/c`` plus 3 standard errors.

    ``deterministic`` switches to the pathwise form ``g(t) <= g(0) exp(-c t)``
    (source terms absent), checked for every path with absolute slack ``atol``.
    """
    rep = Report("lyapunov")
    t = record.times
    g = record["g"]
    if deterministic:
        bound = g[:, :1] * np.exp(-c_lyap * t)[None, :]
        margin = float(np.min(bound + atol - g))
        rep.add("pathwise_energy_decay", margin)
        rep.data.update(worst_margin=margin)
        return rep
    stats = ensemble_stats(record)
    g0 = float(stats.mean["g"][0])
    plateau = B_lyap / c_lyap
    bound = g0 * np.exp(-c_lyap * t) + plateau + MC_SLACK * stats.se["g"]
    margins = bound - stats.mean["g"]
    rep.add("mean_energy_bound", float(np.min(margins)))
    rep.data.update(times=t, mean_g=stats.mean["g"], se_g=stats.se["g"], plateau=plateau,
                    worst_margin=float(np.min(margins)), worst_time=float(t[np.argmin(margins)]))
    return rep


def lyapunov_transient_rate(record: TrajectoryRecord, plateau_window: tuple,
                            fit_window: tuple) -> DecayFit:
    """Decay rate of ``E g(t) - plateau`` with the plateau averaged over a late window."""
    t = record.times
    mean_g = record["g"].mean(axis=0)
    sel = (t >= plateau_window[0]) & (t <= plateau_window[1])
    plateau = float(mean_g[sel].mean())
    return fit_decay_rate(t, mean_g - plateau, fit_window)


def exp_moment_check(record: TrajectoryRecord, beta: float, ledger: ConstantsLedger,
                     t_ref: float | None = None, factor: float = 1.1) -> Report:
    """Stability of ``E exp(beta g)``: its sup over [t_ref, T] within ``factor`` of the value at t_ref."""
    if not 0 <= beta < ledger.beta_max:
        raise PreconditionError(
            f"beta={beta:g} outside the admissible range [0, {ledger.beta_max:g})")
    t = record.times
    if t_ref is None:
        t_ref = 0.5 * float(t[-1])
    w = np.exp(beta * record["g"])
    est = w.mean(axis=0)
    se = w.std(axis=0, ddof=1) / math.sqrt(record.n_paths) if record.n_paths > 1 else 0 * est
    i_ref = int(np.argmin(np.abs(t - t_ref)))
    late = est[i_ref:]
    ratio = float(late.max() / est[i_ref])
    rep = Report("exp_moment")
    rep.add("exp_moment_stability", factor - ratio)
    g0 = float(record["g"][:, 0].mean())
    rep.data.update(beta=beta, times=t, estimate=est, se=se, ratio=ratio, t_ref=float(t[i_ref]),
                    nonincreasing_start=bool(np.all(np.diff(est[: max(i_ref, 2)]) <= 0)),
                    g0=g0)
    return rep


# -- coupling ---------------------------------------------------------------------------

def _coupling_times(run: CoupledRun, t_min: float):
    t = run.times
    return t, t >= t_min - 1e-12


def tilde_contraction_check(run: CoupledRun, ledger: ConstantsLedger, tol: float = 0.05,
                            t_min: float | None = None, slope_window: tuple | None = None,
                            slope_limit: float | None = None) -> Report:
    """Pathwise envelope ``||Delta(t)|| <= (1+tol) exp(-zeta t) ||x-y||`` and the fitted slope.

    ``t_min`` defaults to ten steps, the initial-layer exclusion; the slope
    of log||Delta|| over ``slope_window`` (default [1, T]) must not exceed
    ``slope_limit`` (default ``-zeta (1 - tol)``) for any path.
    """
    if run.kind != "tilde":
        raise PreconditionError("tilde contraction needs a tilde run")
    dt = run.base.meta["dt"]
    t, sel = _coupling_times(run, 10 * dt if t_min is None else t_min)
    d0 = math.sqrt(run.initial_dist_sq)
    dist = np.sqrt(run.dist_sq)
    rep = Report("tilde_contraction")
    if d0 == 0:
        rep.add("zero_distance_stays_zero", -float(dist.max()), bool(dist.max() == 0))
        return rep
    env = (1 + tol) * np.exp(-ledger.zeta * t) * d0
    ratio = dist[:, sel] / env[sel]
    rep.add("pathwise_envelope", float(1 - ratio.max()))
    window = slope_window or (1.0, float(t[-1]))
    limit = -ledger.zeta * (1 - tol) if slope_limit is None else slope_limit
    in_window = (t >= window[0]) & (t <= window[1])
    if np.count_nonzero(in_window) >= 3 and np.all(dist[:, in_window] > 0):
        slopes = np.array([-fit_decay_rate(t, dist[i], window).rate for i in range(dist.shape[0])])
        rep.add("log_slope", float(limit - slopes.max()))
    else:
        slopes = None  # too few samples in the window to fit

    worst = (dist * np.exp(ledger.zeta * t)[None, :] / d0)[:, sel].max(axis=1)
    rep.data.update(max_scaled_distance=worst, slopes=slopes, slope_limit=limit, t_min=float(t[sel][0]))
    if run.budget is not None:
        budget_T = run.budget[:, -1]
        cap = (1 + tol) * ledger.zeta1**2 * run.initial_dist_sq
        rep.add("girsanov_budget", float(cap - budget_T.max()))
        mono = bool(np.all(np.diff(run.budget, axis=1) >= 0))
        rep.add("budget_nondecreasing", 0.0 if mono else -1.0, mono)
        rep.data.update(budget_T=budget_T, budget_cap=cap)
    return rep


def hat_contraction_check(run: CoupledRun, ledger: ConstantsLedger, tol: float = 0.05,
                          t_min: float | None = None) -> Report:
    """Pathwise ``||(u-u_hat, eta-eta_hat)||^2 <= (1+tol) exp(-c_hat t) ||x||^2``."""
    if run.kind != "hat":
        raise PreconditionError("hat contraction needs a hat run")
    dt = run.base.meta["dt"]
    t, sel = _coupling_times(run, 10 * dt if t_min is None else t_min)
    x2 = run.initial_dist_sq
    rep = Report("hat_contraction")
    env = (1 + tol) * np.exp(-ledger.c_hat * t) * x2
    if x2 == 0:
        m = float(run.dist_sq.max())
        rep.add("zero_start_stays_on_base", -m, m == 0)
        return rep
    ratio = run.dist_sq[:, sel] / env[sel]
    rep.add("pathwise_envelope", float(1 - ratio.max()))
    rep.data.update(max_ratio=ratio.max(axis=1), t_min=float(t[sel][0]))
    return rep


def tv_budget_bounds(mean_budget: float) -> tuple[float, float]:
    """The two total-variation bounds ``sqrt(E)/2`` and ``1 - exp(-E/2)/2``."""
    return 0.5 * math.sqrt(mean_budget), 1.0 - 0.5 * math.exp(-0.5 * mean_budget)


@dataclass
class CouplingReport(Report):
    pass


def wasserstein_contraction(run: CoupledRun, ledger: ConstantsLedger, N: float,
                            t_min: float = 1.0) -> CouplingReport:
    """Upper-bound estimate of the d_N transport cost against ``alpha = exp(-zeta) + zeta1/N``.

    ``W(t) = mean_paths min(N ||Delta(t)||, 1) + zeta1 ||x - y||``: the first
    term is the cost under the tilde coupling, the second the
    total-variation price of the drift change.
    """
    if run.kind != "tilde":
        raise PreconditionError("the d_N estimate needs a tilde run")
    if N < ledger.N_min:
        raise PreconditionError(f"N={N:g} is below N_min={ledger.N_min:g}; alpha >= 1 is vacuous")
    alpha = ledger.alpha(N)
    dxy = math.sqrt(run.initial_dist_sq)
    t, sel = _coupling_times(run, t_min)
    dist = np.sqrt(run.dist_sq)
    capped = np.minimum(N * dist, 1.0)
    rep = CouplingReport("wasserstein")
    # min(N|D|, 1) never exceeds the indicator of D != 0
    dominated = bool(np.all(capped <= (dist > 0)))
    rep.add("dN_below_tv_indicator", 0.0 if dominated else -1.0, dominated)
    budget_mean = float(run.budget[:, -1].mean())
    tv_sqrt, tv_exp = tv_budget_bounds(budget_mean)
    rep.data.update(alpha=alpha, N=N, dxy=dxy, tv_bound_sqrt=tv_sqrt, tv_bound_exp=tv_exp,
                    mean_budget=budget_mean)
    if dxy == 0:
        rep.add("contraction_factor", alpha, True)
        rep.data.update(times=t, w_hat=np.zeros_like(t), ratio=np.zeros_like(t))
        return rep
    d_N = min(N * dxy, 1.0)
    B = capped.shape[0]
    w_hat = capped.mean(axis=0) + ledger.zeta1 * dxy
    se = capped.std(axis=0, ddof=1) / math.sqrt(B) / d_N if B > 1 else np.zeros_like(t)
    ratio = w_hat / d_N
    margin = (alpha + MC_SLACK * se - ratio)[sel]
    rep.add("contraction_factor", float(margin.min()))
    rep.data.update(times=t, w_hat=w_hat, ratio=ratio, se=se, d_N=d_N,
                    max_ratio=float(ratio[sel].max()),
                    per_path_max_scaled=(dist * np.exp(ledger.zeta * t)[None, :] / dxy).max(axis=1),
                    budget_T=run.budget[:, -1])
    return rep


# -- ergodicity proxy ---------------------------------------------------------------------

def wasserstein1_1d(a, b) -> float:
    """Exact W1 between two equal-size empirical laws on the line."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise PreconditionError("W1 needs equal sample sizes")
    return float(np.mean(np.abs(a - b)))


def ergodicity_proxy(rec_x: TrajectoryRecord, rec_y: TrajectoryRecord, k: int = 1,
                     t_early: float = 1.0, t_late: float | None = None,
                     target_ratio: float = 0.1) -> Report:
    """W1 between the laws of mode ``k`` started from x and from y, with a decay fit."""
    if rec_x.n_paths != rec_y.n_paths:
        raise PreconditionError("ensembles must have equal size")
    if rec_x.snapshots is None or rec_y.snapshots is None:
        raise PreconditionError("ergodicity proxy needs coefficient snapshots")
    if np.intersect1d(rec_x.trajectories, rec_y.trajectories).size and \
            rec_x.meta.get("seed") == rec_y.meta.get("seed"):
        shared = True
    else:
        shared = False
    t = rec_x.times
    w1 = np.array([wasserstein1_1d(rec_x.snapshots[:, i, k - 1], rec_y.snapshots[:, i, k - 1])
                   for i in range(t.size)])
    t_late = float(t[-1]) if t_late is None else t_late
    i0 = int(np.argmin(np.abs(t - t_early)))
    i1 = int(np.argmin(np.abs(t - t_late)))
    rep = Report("ergodicity")
    rep.add("w1_decay", float(target_ratio * w1[i0] - w1[i1]))
    fit = None
    pos = w1 > 0
    if np.count_nonzero(pos[i0:i1 + 1]) >= 3:
        fit = fit_decay_rate(t[pos], w1[pos], (float(t[i0]), float(t[i1]))).to_dict()
    rep.data.update(times=t, w1=w1, fit=fit, shared_noise=shared,
                    w1_early=float(w1[i0]), w1_late=float(w1[i1]))
    return rep


# -- stationary moments ----------------------------------------------------------------------

def _split_ratio(values: np.ndarray) -> float:
    h = values.size // 2
    first, second = float(values[:h].mean()), float(values[h:].mean())
    if first == second:
        return 1.0
    return second / first if first != 0 else math.inf


def stationary_moments(record: TrajectoryRecord, burn_in: float, beta: float, n_power: float,
                       ledger: ConstantsLedger | None = None, band: tuple = (0.5, 2.0)) -> Report:
    """Time averages of ``exp(beta g)``, ``|u|_{H1}^n |u|_{H2}^2`` and ``|eta|_{M1}^n``.

    Averages pool all paths after ``burn_in``; the split-half ratio (second
    half over first) is the stationarity proxy and must fall in ``band``.
    """
    t = record.times
    if not burn_in < t[-1]:
        raise PreconditionError("burn_in must be shorter than the run")
    if beta < 0:
        raise PreconditionError("beta must be nonnegative")
    if ledger is not None and beta > ledger.default_beta():
        raise PreconditionError(f"beta={beta:g} exceeds the default exponent {ledger.default_beta():g}")
    sel = t > burn_in
    if np.count_nonzero(sel) < 2:
        raise PreconditionError("fewer than two samples after burn-in")
    g = record["g"][:, sel]
    h1 = record["u_h1_sq"][:, sel]
    h2 = record["u_h2_sq"][:, sel]
    m1 = record["eta_m1_sq"][:, sel]
    quantities = {
        "exp_beta_g": np.exp(beta * g),
        "u_h1_pow_h2_sq": h1 ** (n_power / 2) * h2,
        "eta_m1_pow": m1 ** (n_power / 2),
    }
    rep = Report("stationary")
    averages, ratios = {}, {}
    for name, q in quantities.items():
        series = q.mean(axis=0)
        averages[name] = float(series.mean())
        ratios[name] = _split_ratio(series)
        r = ratios[name]
        ok = bool(math.isfinite(averages[name]) and band[0] <= r <= band[1])
        rep.add(f"{name}_split_half", min(r - band[0], band[1] - r) if math.isfinite(r) else -math.inf, ok)
    rep.data.update(averages=averages, split_ratios=ratios, burn_in=burn_in, beta=beta,
                    n_power=n_power, samples=int(np.count_nonzero(sel)))
    return rep


# -- refinement study -------------------------------------------------------------------------

def _truncated_cfg(cfg: StepperConfig, n: int) -> StepperConfig:
    if cfg.basis.source == "interval1d":
        basis = build_basis(n, cfg.basis.domain_length)
    else:
        basis = user_basis(cfg.basis.alphas[:n], cfg.basis.domain_length)
    M = max(n + 1, int(round(cfg.M * n / cfg.n_modes)))
    return cfg.with_(basis=basis, noise=NoiseSpec(cfg.noise.lambdas[:n]), M=M)


def _final_coeffs(cfg, x: InitialData, seed, trajectories, substeps=1, jobs=1) -> np.ndarray:
    n = cfg.n_modes
    eta = x.eta0
    if eta.kind == "constant":
        eta = type(eta).constant(np.asarray(eta.coeffs)[..., :n])
    elif eta.kind == "sampled":
        eta = type(eta).sampled(eta.s_grid, np.asarray(eta.samples)[..., :n], eta.hold_tail)
    xi = InitialData(np.asarray(x.u0, dtype=float)[:n], eta)
    rec = simulate_ensemble(cfg, xi, seed, trajectories, jobs=jobs,
                            record_every=max(cfg.n_steps, 1), snapshots=True,
                            noise_substeps=substeps)
    return rec.snapshots[:, -1, :]


def _rms_h(diff: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=-1))))


def galerkin_refinement(cfg: StepperConfig, x: InitialData, n_list, dt_list, master_seed: int,
                        trajectories=range(8), n_ref: int | None = None, jobs: int = 1,
                        band: tuple = (1.5, 2.5)) -> Report:
    """Spatial and temporal self-convergence on shared Brownian increments.

    Spatial errors compare each ``n`` with ``n_ref`` (default ``max(n_list)``,
    at most ``cfg.n_modes``) at ``cfg.dt``. Temporal runs use the full basis;
    each ``dt`` must be an integer multiple of the smallest, which sets the
    fine noise grid. Errors are RMS over paths of the H distance at T.
    """
    n_list = sorted(int(n) for n in n_list)
    dt_list = sorted((float(d) for d in dt_list), reverse=True)
    n_ref = max(n_list) if n_ref is None else int(n_ref)
    if n_ref > cfg.n_modes:
        raise PreconditionError("reference resolution exceeds the configured basis")
    rep = Report("refinement")

    ref = _final_coeffs(_truncated_cfg(cfg, n_ref), x, master_seed, trajectories, jobs=jobs)
    spatial = []
    for n in n_list:
        un = _final_coeffs(_truncated_cfg(cfg, n), x, master_seed, trajectories, jobs=jobs)
        pad = np.zeros_like(ref)
        pad[:, :n] = un
        spatial.append(_rms_h(pad - ref))
    spatial_cmp = [e for n, e in zip(n_list, spatial) if n < n_ref]
    dec = all(a > b for a, b in zip(spatial_cmp, spatial_cmp[1:]))
    rep.add("spatial_strictly_decreasing", 0.0 if dec else -1.0, dec)

    dt_fine = dt_list[-1]
    finals = []
    for dt in dt_list:
        s = dt / dt_fine
        if abs(s - round(s)) > 1e-9:
            raise PreconditionError("each dt must be an integer multiple of the smallest")
        run_cfg = cfg.with_(dt=dt)
        finals.append(_final_coeffs(run_cfg, x, master_seed, trajectories, int(round(s)), jobs))
    to_fine = [_rms_h(f - finals[-1]) for f in finals]
    successive = [_rms_h(a - b) for a, b in zip(finals, finals[1:])]
    ratios = [a / b for a, b in zip(successive, successive[1:])]
    for i, r in enumerate(ratios):
        rep.add(f"dt_ratio_{i}", min(r - band[0], band[1] - r))
    rep.data.update(n_list=n_list, n_ref=n_ref, spatial_errors=spatial, dt_list=dt_list,
                    temporal_errors=to_fine, successive_differences=successive, dt_ratios=ratios)
    return rep
