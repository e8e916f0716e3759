"""Acceptance criteria for the reference configuration.

Run with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``;
either way one PASS/FAIL line is printed per criterion.
"""

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fadingmem.constants import derive_ledger, lyapunov_constants, validate_ledger  # noqa: E402
from fadingmem.estimators import (  # noqa: E402
    ergodicity_proxy, exp_moment_check, galerkin_refinement, hat_contraction_check,
    lyapunov_check, tilde_contraction_check, wasserstein_contraction,
)
from fadingmem.integrator import (  # noqa: E402
    InitialData, history_difference, initial_norm_sq, move_towards, run_coupled_ensemble,
    simulate, simulate_ensemble,
)
from fadingmem.kernel import kernel_l1  # noqa: E402
from fadingmem.noise import NoisePath  # noqa: E402
from fadingmem.nonlinearity import ZERO, derive_nl_constants  # noqa: E402
from fadingmem.spectral import NoiseSpec, build_basis, sobolev_norm_sq  # noqa: E402
from fadingmem.state import InitialHistory, init_state, push_history  # noqa: E402
from fadingmem.integrator import step_base  # noqa: E402

from conftest import ACCEPTANCE_LINES, ref1_stepper, unit  # noqa: E402

PI2 = math.pi**2
SEED = 2024
JOBS = max(1, min(4, os.cpu_count() or 1))

# values printed alongside the criteria, compared at their printed precision
PRINTED = {"eps1": ("1", 1.0), "K1": ("0.25", 0.25), "eps2": ("0.797357", 0.797357),
           "K2": ("0.300661", 0.300661), "zeta": ("0.443631", 0.443631), "a_Q": ("0.1", 0.1),
           "zeta1": ("31.503", 31.503), "N_min": ("87.92", 87.92), "c_lyap": ("0.5", 0.5),
           "B_lyap": ("0.505412", 0.505412)}
PRINTED_ZETA = 0.443631


def _decimals(text: str) -> int:
    return len(text.split(".")[1]) if "." in text else 0


def closed_forms() -> dict:
    """Hand derivation for K(s) = 0.5 exp(-s), phi = x - x^3, lambda_k = 0.1/k^2 on (0, 1)."""
    mass, a1, a_phi = 0.5, PI2, 1.0
    eps2 = ((1 - mass) * a1 - a_phi) / (mass * a1)        # 1 - 2/pi^2
    K2 = 1 - (1 + eps2 / 2) * mass                         # (pi^2/2 + 1) / (2 pi^2)
    zeta = min(2 * (K2 * a1 - a_phi), eps2 / (1 + eps2))
    zeta1 = K2 * a1 / (0.1 * math.sqrt(2 * zeta))
    lam_sq = sum((0.1 / k**2) ** 2 for k in range(1, 33))
    return {"eps1": 1.0, "K1": 0.25, "n_bar": 1, "n_star": 1, "eps2": eps2, "K2": K2, "zeta": zeta,
            "a_Q": 0.1, "zeta1": zeta1, "N_min": zeta1 / (1 - math.exp(-zeta)), "c_lyap": 0.5,
            "B_lyap": 0.5 * 1.0 + 0.5 * lam_sq, "c_hat": 0.5}


class Verdict:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failures: list[str] = []
        self.notes: list[str] = []
        self.t0 = time.perf_counter()

    def need(self, ok: bool, what: str):
        if not ok:
            self.failures.append(what)

    def note(self, text: str):
        self.notes.append(text)

    def within(self, limit_s: float):
        elapsed = time.perf_counter() - self.t0
        self.note(f"{elapsed:.1f}s")
        self.need(elapsed < limit_s, f"runtime {elapsed:.1f}s exceeds {limit_s:g}s")

    @property
    def passed(self) -> bool:
        return not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        body = "; ".join(self.notes + [f"violated: {f}" for f in self.failures])
        return f"{status} criterion {self.number:2d} {self.title}: {body}"


def _emit(v: Verdict) -> Verdict:
    text = v.line()
    ACCEPTANCE_LINES.append(text)
    print(text)
    return v


def _ref1_ledger(cfg):
    return derive_ledger(cfg.kernel, cfg.basis, cfg.noise, derive_nl_constants(cfg.nonlinearity))


def _unit_gap():
    """x = 0 and y = (e1/sqrt2, constant history e1/pi), so ||x - y|| = 1."""
    return InitialData(np.zeros(32)), InitialData(unit(1) / math.sqrt(2),
                                                  InitialHistory.constant(unit(1) / math.pi))


# -- criteria --------------------------------------------------------------------------------

def criterion_1() -> Verdict:
    v = Verdict(1, "constants ledger")
    cfg = ref1_stepper()
    nlc = derive_nl_constants(cfg.nonlinearity)
    ledger = derive_ledger(cfg.kernel, cfg.basis, cfg.noise, nlc)
    c, B = lyapunov_constants(cfg.kernel, cfg.basis, cfg.noise, nlc)
    got = ledger.to_dict()
    worst = 0.0
    for k, want in closed_forms().items():
        rel = abs(got[k] - want) / abs(want)
        worst = max(worst, rel)
        v.need(rel <= 1e-6, f"{k}={got[k]!r} vs closed form {want!r}")
    v.need(abs(c - 0.5) <= 5e-7 and abs(B - got["B_lyap"]) <= 1e-15, "lyapunov_constants mismatch")
    v.note(f"max rel dev from closed forms {worst:.1e}")
    for k, (text, val) in PRINTED.items():
        d = _decimals(text)
        if round(got[k], d) != round(val, d):
            # reported, not asserted: the printed decimal disagrees with its own closed form
            v.note(f"printed {k}={text} differs at its precision (derived {got[k]:.7g})")
    lhs = ledger.K2 * PI2
    rhs = 0.5 * ((1 - kernel_l1(cfg.kernel)) * PI2 + nlc.a_phi)
    v.need(abs(lhs - rhs) <= 1e-12, f"K2 identity off by {abs(lhs - rhs):.1e}")
    v.need(all(ch.passed for ch in validate_ledger(ledger, cfg.kernel, cfg.basis, cfg.noise, nlc)),
           "validate_ledger")
    v.note(f"identity residual {abs(lhs - rhs):.1e}")
    v.within(1.0)
    return _emit(v)


_tilde_cache = {}


def _tilde_runs():
    if "run" not in _tilde_cache:
        cfg = ref1_stepper(T=10.0)
        ledger = _ref1_ledger(cfg)
        x, y = _unit_gap()
        t0 = time.perf_counter()
        run = run_coupled_ensemble("tilde", x, y, cfg, ledger, SEED, range(8), record_every=10, jobs=JOBS)
        _tilde_cache.update(run=run, ledger=ledger, elapsed=time.perf_counter() - t0)
    return _tilde_cache["run"], _tilde_cache["ledger"], _tilde_cache["elapsed"]


def criterion_2() -> Verdict:
    v = Verdict(2, "pathwise tilde contraction")
    run, ledger, elapsed = _tilde_runs()
    v.need(abs(run.initial_dist_sq - 1.0) <= 1e-12, f"||x-y||^2 = {run.initial_dist_sq!r}")
    t = run.times
    sel = t >= 0.1 - 1e-12
    dist = np.sqrt(run.dist_sq)
    env = 1.05 * np.exp(-PRINTED_ZETA * t)
    worst = float((dist[:, sel] / env[sel]).max())
    v.need(worst <= 1.0, f"envelope ratio {worst:.4f}")
    rep = tilde_contraction_check(run, ledger, tol=0.05, t_min=0.1, slope_limit=-0.42)
    slopes = rep.data["slopes"]
    v.need(slopes is not None and float(np.max(slopes)) <= -0.42, "fitted log-slope")
    v.need(rep.passed, "estimator report")
    v.note(f"max ||D||/envelope {worst:.4f}")
    v.note(f"slopes in [{np.min(slopes):.4f}, {np.max(slopes):.4f}]")
    v.need(elapsed < 120, f"runtime {elapsed:.1f}s")
    v.note(f"{elapsed:.1f}s")
    return _emit(v)


def criterion_3() -> Verdict:
    v = Verdict(3, "Girsanov budget")
    run, ledger, elapsed = _tilde_runs()
    cap = 1.05 * ledger.zeta1**2 * run.initial_dist_sq
    bT = run.budget[:, -1]
    v.need(float(bT.max()) <= cap, f"max b(T) {bT.max():.4g} > {cap:.4g}")
    v.need(bool(np.all(np.diff(run.budget, axis=1) >= 0)), "budget must be nondecreasing")
    v.note(f"max b(T) {bT.max():.4g} <= {cap:.4g}")
    v.note("shares the runs of criterion 2")
    return _emit(v)


def criterion_4() -> Verdict:
    v = Verdict(4, "hat contraction")
    cfg = ref1_stepper(T=10.0)
    ledger = _ref1_ledger(cfg)
    x = InitialData(unit(1), InitialHistory.constant(unit(1)))
    x = x.scaled(1 / math.sqrt(initial_norm_sq(x, cfg)))
    run = run_coupled_ensemble("hat", x, None, cfg, ledger, SEED, range(8), record_every=10, jobs=JOBS)
    v.need(abs(run.initial_dist_sq - 1) <= 1e-12, "||x|| must be 1")
    t = run.times
    sel = t >= 0.1 - 1e-12
    ratio = float((run.dist_sq[:, sel] / (1.05 * np.exp(-0.5 * t[sel]))).max())
    v.need(ratio <= 1.0, f"envelope ratio {ratio:.4f}")
    v.need(hat_contraction_check(run, ledger, 0.05, 0.1).passed, "estimator report")
    v.note(f"max dist^2/envelope {ratio:.4f}")
    v.within(120)
    return _emit(v)


def criterion_5() -> Verdict:
    v = Verdict(5, "deterministic Lyapunov decay")
    cfg = ref1_stepper(noise=NoiseSpec(np.zeros(32)), nonlinearity=ZERO, T=20.0)
    x = InitialData(unit(1) + 0.5 * unit(3), InitialHistory.constant(unit(1) - unit(2)))
    rec = simulate(cfg, x, SEED, [0], record_every=1)
    g = rec["g"][0]
    bound = g[0] * np.exp(-0.5 * rec.times)
    excess = float(np.max(g - bound))
    v.need(excess <= 1e-10, f"g exceeds g(0)exp(-t/2) by {excess:.2e}")
    c, _ = lyapunov_constants(cfg.kernel, cfg.basis, cfg.noise, derive_nl_constants(ZERO))
    v.need(lyapunov_check(rec, c, 0.0, deterministic=True, atol=1e-10).passed, "estimator report")
    v.note(f"max g - bound {excess:.2e} over {rec.times.size} grid times")
    v.within(30)
    return _emit(v)


_ens_cache = {}


def _stochastic_ensemble():
    if "rec" not in _ens_cache:
        cfg = ref1_stepper(T=20.0)
        t0 = time.perf_counter()
        rec = simulate_ensemble(cfg, InitialData(np.zeros(32)), SEED, range(256), jobs=JOBS,
                                record_every=100)
        _ens_cache.update(rec=rec, cfg=cfg, elapsed=time.perf_counter() - t0)
    return _ens_cache["rec"], _ens_cache["cfg"], _ens_cache["elapsed"]


def criterion_6() -> Verdict:
    v = Verdict(6, "stochastic moment bound")
    rec, cfg, elapsed = _stochastic_ensemble()
    ledger = _ref1_ledger(cfg)
    plateau = ledger.B_lyap / ledger.c_lyap
    mean = rec["g"].mean(axis=0)
    se = rec["g"].std(axis=0, ddof=1) / math.sqrt(rec.n_paths)
    margin = float(np.min(plateau + 3 * se - mean))
    v.need(margin >= 0, f"mean g exceeds plateau by {-margin:.4g}")
    v.need(lyapunov_check(rec, ledger.c_lyap, ledger.B_lyap).passed, "estimator report")
    v.note(f"plateau {plateau:.4f}, max mean g {mean.max():.4f}, margin {margin:.4f}")
    v.need(elapsed < 600, f"runtime {elapsed:.1f}s")
    v.note(f"{elapsed:.1f}s")
    return _emit(v)


def criterion_7() -> Verdict:
    v = Verdict(7, "exponential-moment stability")
    rec, cfg, _ = _stochastic_ensemble()
    ledger = _ref1_ledger(cfg)
    v.need(1.0 < ledger.beta_max, "beta must be admissible")
    rep = exp_moment_check(rec, 1.0, ledger, t_ref=10.0, factor=1.1)
    ratio = rep.data["ratio"]
    v.need(rep.data["t_ref"] == pytest.approx(10.0), "t_ref must sit on the grid")
    v.need(ratio <= 1.1, f"sup ratio {ratio:.4f}")
    v.note(f"sup_[10,20] E exp(g) / value at 10 = {ratio:.4f}; beta_max {ledger.beta_max:.2f}")
    v.note("shares the runs of criterion 6")
    return _emit(v)


def criterion_8() -> Verdict:
    v = Verdict(8, "memory-representation identity")
    cfg = ref1_stepper()
    hist = InitialHistory.constant(0.3 * unit(1) - 0.2 * unit(4))
    state = init_state(np.asarray(unit(2)), hist, cfg.kernel, cfg.basis, cfg.dt,
                       tail_tol=cfg.tail_tol, method="direct")
    noise = NoisePath(SEED, [0], 32)
    path = [state.u[0].copy()]
    steps = 3000
    for i in range(steps):
        step_base(state, cfg, noise(i))
        path.append(state.u[0].copy())
    trace = state.trace
    exact = all(np.array_equal(trace.eta_at(j)[0], path[steps - j]) for j in range(steps + 1))
    beyond = all(np.array_equal(trace.eta_at(steps + j)[0], hist.coeffs) for j in (1, 10, 1000))
    v.need(exact, "stored lags differ from the trajectory")
    v.need(beyond, "lags past t differ from the initial history")
    # rebuild the weighted norm from the trajectory and the history formula
    dt = cfg.dt
    s = dt * np.arange(steps + 1)
    w = np.full(steps + 1, dt)
    w[0] = w[-1] = dt / 2
    t = steps * dt
    worst = 0.0
    for r in (0, 1):
        e = np.array([sobolev_norm_sq(path[steps - j], r + 1, cfg.basis) for j in range(steps + 1)])
        formula = float(np.sum(w * cfg.kernel.rho(s) * e)) + \
            float(cfg.kernel.rho_integral(t)) * sobolev_norm_sq(hist.coeffs, r + 1, cfg.basis)
        buffered = float(trace.norm_sq(r)[0])
        rel = abs(buffered - formula) / formula
        worst = max(worst, rel)
        v.need(rel <= 1e-12, f"M^{r} norm rel error {rel:.1e}")
    v.note(f"{steps + 1} lags bit-identical; norm rel error {worst:.1e}")
    return _emit(v)


def criterion_9() -> Verdict:
    v = Verdict(9, "Wasserstein contraction factor")
    cfg = ref1_stepper(T=10.0)
    ledger = _ref1_ledger(cfg)
    N = 2 * ledger.N_min
    x, y = _unit_gap()
    gap = InitialData(np.asarray(y.u0) - np.asarray(x.u0), history_difference(y.eta0, x.eta0, 32))
    y = move_towards(x, y, 1.0 / (N * math.sqrt(initial_norm_sq(gap, cfg))), 32)
    run = run_coupled_ensemble("tilde", x, y, cfg, ledger, SEED, range(64), record_every=10, jobs=JOBS)
    rep = wasserstein_contraction(run, ledger, N, t_min=1.0)
    d = rep.data
    sel = d["times"] >= 1.0 - 1e-12
    margin = float(np.min((0.821 + 3 * d["se"] - d["ratio"])[sel]))
    v.need(margin >= 0, f"ratio exceeds 0.821 + 3SE by {-margin:.4f}")
    v.need(rep.passed, "estimator report")
    v.note(f"alpha {d['alpha']:.5f}, max ratio {d['max_ratio']:.4f}, d_N(x,y) {d['d_N']:.6f}")
    v.within(300)
    return _emit(v)


def criterion_10() -> Verdict:
    v = Verdict(10, "ergodicity proxy")
    cfg = ref1_stepper(T=20.0)
    x, y = _unit_gap()
    gap = InitialData(np.asarray(y.u0) - np.asarray(x.u0), history_difference(y.eta0, x.eta0, 32))
    v.need(abs(initial_norm_sq(gap, cfg) - 1) <= 1e-12, "||x - y|| must be 1")
    rx = simulate_ensemble(cfg, x, SEED, range(512), jobs=JOBS, record_every=500, snapshots=True)
    ry = simulate_ensemble(cfg, y, SEED, range(512, 1024), jobs=JOBS, record_every=500, snapshots=True)
    rep = ergodicity_proxy(rx, ry, k=1, t_early=1.0, t_late=20.0, target_ratio=0.1)
    d = rep.data
    v.need(not d["shared_noise"], "ensembles must use independent noise")
    v.need(d["w1_late"] < 0.1 * d["w1_early"], f"W1(20)={d['w1_late']:.4g} vs W1(1)={d['w1_early']:.4g}")
    v.note(f"W1(1) {d['w1_early']:.4g}, W1(20) {d['w1_late']:.4g}, ratio {d['w1_late'] / d['w1_early']:.4f}")
    v.within(900)
    return _emit(v)


def criterion_11() -> Verdict:
    v = Verdict(11, "refinement sanity")
    n_ref = 64
    cfg = ref1_stepper(basis=build_basis(n_ref, 1.0), noise=NoiseSpec.power_law(0.1, 2, n_ref),
                       M=4 * n_ref, T=1.0)
    x = InitialData(np.zeros(n_ref))
    rep = galerkin_refinement(cfg, x, [8, 16, 32], [4e-3, 2e-3, 1e-3], SEED, range(64),
                              n_ref=n_ref, jobs=JOBS)
    d = rep.data
    errs = d["spatial_errors"]
    v.need(errs[0] > errs[1] > errs[2], "spatial errors must strictly decrease")
    for r in d["dt_ratios"]:
        v.need(1.5 <= r <= 2.5, f"dt ratio {r:.3f}")
    v.need(rep.passed, "estimator report")
    v.note("spatial " + ", ".join(f"{e:.2e}" for e in errs))
    v.note("dt ratios " + ", ".join(f"{r:.3f}" for r in d["dt_ratios"]))
    v.within(300)
    return _emit(v)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


@pytest.mark.slow
@pytest.mark.parametrize("criterion", CRITERIA, ids=lambda f: f.__name__)
def test_acceptance(criterion):
    v = criterion()
    assert v.passed, v.line()


if __name__ == "__main__":
    verdicts = [c() for c in CRITERIA]
    print(f"{sum(v.passed for v in verdicts)}/{len(verdicts)} criteria passed")
    sys.exit(0 if all(v.passed for v in verdicts) else 1)
