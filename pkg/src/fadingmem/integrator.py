"""Semi-implicit Euler-Maruyama stepping for the base, hat and tilde systems.

Per mode k, one step of the base system reads

    u_k <- (u_k + dt*(alpha_k*m_k + phi_k(u)) + lambda_k*sqrt(dt)*xi_k) / (1 + dt*alpha_k)

with the memory convolution m and the projected nonlinearity phi_k taken
explicitly. The hat and tilde partners add a damping ``gain * P_c (partner - u)``
on the first ``c`` modes; the damping is implicit and the forcing uses the
base's freshly stepped u, so a partner started on the base stays on it.
Within a step the base always advances first.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .constants import ConstantsLedger
from .kernel import KernelSpec
from .noise import NoisePath
from .nonlinearity import AssumptionViolation, NonlinearitySpec, apply_nonlinearity
from .spectral import NoiseSpec, SpectralBasis, sobolev_norm_sq
from .state import GalerkinState, InitialHistory, MemoryTrace, init_state, push_history


class SimulationDiverged(RuntimeError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class StepperConfig:
    basis: SpectralBasis
    kernel: KernelSpec
    noise: NoiseSpec
    nonlinearity: NonlinearitySpec
    dt: float = 1e-3
    T: float = 1.0
    M: int | None = None
    tail_tol: float = 1e-12
    memory: str = "auto"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.noise.lambdas.size != self.basis.n_modes:
            raise ValueError("noise length must match the number of modes")
        if self.M is None:
            object.__setattr__(self, "M", 4 * self.basis.n_modes)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def with_(self, **changes) -> "StepperConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class InitialData:
    """A point x = (u0, eta0) of the product space."""

    u0: np.ndarray
    eta0: InitialHistory = field(default_factory=InitialHistory.zero)

    def scaled(self, c: float) -> "InitialData":
        return InitialData(c * np.asarray(self.u0, dtype=float), self.eta0.scaled(c))


def initial_norm_sq(x: InitialData, cfg: StepperConfig) -> float:
    """||x||^2 of the product space, via the same quadrature the simulator uses."""
    trace = MemoryTrace(np.asarray(x.u0, dtype=float), x.eta0, cfg.kernel, cfg.basis, cfg.dt,
                        cfg.tail_tol, "direct" if x.eta0.kind == "sampled" else cfg.memory)
    return float(sobolev_norm_sq(x.u0, 0, cfg.basis) + trace.norm_sq(0)[0])


def combine_histories(a: InitialHistory, b: InitialHistory, ca: float, cb: float,
                      n: int) -> InitialHistory:
    """``ca*a + cb*b``; sampled inputs are merged on the union of their grids."""
    kinds = {a.kind, b.kind}
    if kinds == {"zero"}:
        return InitialHistory.zero()
    if kinds <= {"zero", "constant"}:
        va = a.coeffs if a.kind == "constant" else 0.0
        vb = b.coeffs if b.kind == "constant" else 0.0
        return InitialHistory.constant(np.asarray(ca * va + cb * vb, dtype=float) * np.ones(n))
    grid = np.union1d(a.s_grid if a.kind == "sampled" else [0.0],
                      b.s_grid if b.kind == "sampled" else [0.0])
    hold = all(h.hold_tail for h in (a, b) if h.kind == "sampled")
    return InitialHistory.sampled(grid, ca * a.values(grid, n) + cb * b.values(grid, n), hold)


def history_difference(a: InitialHistory, b: InitialHistory, n: int) -> InitialHistory:
    return combine_histories(a, b, 1.0, -1.0, n)


def move_towards(x: InitialData, y: InitialData, s: float, n: int) -> InitialData:
    """The point ``x + s (y - x)``."""
    u = np.asarray(x.u0, dtype=float) + s * (np.asarray(y.u0, dtype=float) - np.asarray(x.u0, dtype=float))
    return InitialData(u, combine_histories(x.eta0, y.eta0, 1.0 - s, s, n))


# -- single steps -------------------------------------------------------------

def _drift(state: GalerkinState, cfg: StepperConfig):
    m = state.trace.convolution()
    f = apply_nonlinearity(state.u, cfg.nonlinearity, cfg.basis, cfg.M)
    return m, f


def _check_finite(arr, step: int, what: str = "state"):
    if not np.all(np.isfinite(arr)):
        raise SimulationDiverged(step, what)


def _noise_term(cfg: StepperConfig, xi):
    if xi is None:
        return 0.0
    return cfg.noise.lambdas * math.sqrt(cfg.dt) * np.asarray(xi, dtype=float)


def _base_update(state: GalerkinState, cfg: StepperConfig, xi):
    dt, alpha = cfg.dt, cfg.basis.alphas
    # overflow is reported through SimulationDiverged, not floating-point warnings
    with np.errstate(over="ignore", invalid="ignore"):
        m, f = _drift(state, cfg)
        u_new = (state.u + dt * (alpha * m + f) + _noise_term(cfg, xi)) / (1.0 + dt * alpha)
    _check_finite(u_new, state.steps + 1)
    return u_new, m, f


def step_base(state: GalerkinState, cfg: StepperConfig, xi=None) -> GalerkinState:
    """Advance the base system one step; ``xi`` are standard normals (B, n)."""
    u_new, _, _ = _base_update(state, cfg, xi)
    return push_history(state, u_new)


def _damping(cfg: StepperConfig, gain: float, n_c: int) -> np.ndarray:
    d = np.zeros(cfg.n_modes)
    d[:n_c] = gain
    return d


def _partner_step(partner: GalerkinState, base_u_next, cfg: StepperConfig, gain: float,
                  n_c: int, xi) -> GalerkinState:
    dt, alpha = cfg.dt, cfg.basis.alphas
    damp = _damping(cfg, gain, n_c)
    with np.errstate(over="ignore", invalid="ignore"):
        m, f = _drift(partner, cfg)
        num = partner.u + dt * (alpha * m + f) + _noise_term(cfg, xi) + dt * damp * base_u_next
        u_new = num / (1.0 + dt * alpha + dt * damp)
    _check_finite(u_new, partner.steps + 1, "partner")
    return push_history(partner, u_new)


def hat_gain(cfg: StepperConfig, ledger: ConstantsLedger) -> tuple[float, int]:
    return ledger.K1 * cfg.basis.alpha(ledger.n_star), ledger.n_star


def tilde_gain(cfg: StepperConfig, ledger: ConstantsLedger) -> tuple[float, int]:
    return ledger.K2 * cfg.basis.alpha(ledger.n_bar), ledger.n_bar


def step_hat(hat: GalerkinState, base_u_next, cfg: StepperConfig, ledger: ConstantsLedger,
             xi=None) -> GalerkinState:
    """Hat partner: extra drift ``-K1 alpha_{n*} P_{n*}(u_hat - u)``."""
    gain, n_c = hat_gain(cfg, ledger)
    return _partner_step(hat, base_u_next, cfg, gain, n_c, xi)


def step_tilde(tilde: GalerkinState, base_u_next, cfg: StepperConfig, ledger: ConstantsLedger,
               xi=None) -> GalerkinState:
    """Tilde partner: extra drift ``+K2 alpha_nbar P_nbar(u - u_tilde)``."""
    gain, n_c = tilde_gain(cfg, ledger)
    return _partner_step(tilde, base_u_next, cfg, gain, n_c, xi)


# -- records ------------------------------------------------------------------

SERIES = ("u_h0_sq", "u_h1_sq", "u_h2_sq", "eta_m0_sq", "eta_m1_sq", "g")


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    series: dict
    trajectories: np.ndarray
    snapshots: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.series[name]

    @property
    def n_paths(self) -> int:
        return int(self.trajectories.size)

    @classmethod
    def concatenate(cls, parts: list["TrajectoryRecord"]) -> "TrajectoryRecord":
        parts = sorted(parts, key=lambda r: int(r.trajectories[0]))
        series = {k: np.concatenate([p.series[k] for p in parts]) for k in parts[0].series}
        snaps = None
        if parts[0].snapshots is not None:
            snaps = np.concatenate([p.snapshots for p in parts])
        return cls(parts[0].times, series, np.concatenate([p.trajectories for p in parts]),
                   snaps, dict(parts[0].meta))


class _Recorder:
    def __init__(self, n_samples: int, batch: int, n: int, snapshots: bool):
        self.times = np.empty(n_samples)
        self.series = {k: np.empty((batch, n_samples)) for k in SERIES}
        self.snaps = np.empty((batch, n_samples, n)) if snapshots else None
        self.i = 0

    def record(self, state: GalerkinState):
        i, b = self.i, state.basis
        u = state.u
        self.times[i] = state.t
        s = self.series
        s["u_h0_sq"][:, i] = sobolev_norm_sq(u, 0, b)
        s["u_h1_sq"][:, i] = sobolev_norm_sq(u, 1, b)
        s["u_h2_sq"][:, i] = sobolev_norm_sq(u, 2, b)
        s["eta_m0_sq"][:, i] = state.trace.norm_sq(0)
        s["eta_m1_sq"][:, i] = state.trace.norm_sq(1)
        s["g"][:, i] = 0.5 * (s["u_h0_sq"][:, i] + s["eta_m0_sq"][:, i])
        if self.snaps is not None:
            self.snaps[:, i] = u
        self.i += 1

    def finish(self, trajectories, meta) -> TrajectoryRecord:
        return TrajectoryRecord(self.times, self.series, np.asarray(trajectories), self.snaps, meta)


def _record_steps(n_steps: int, every: int) -> int:
    if every < 1:
        raise ValueError("record interval must be at least one step")
    return n_steps // every + 1


def _noise_source(cfg: StepperConfig, seed: int, trajectories, substeps: int):
    if not np.any(cfg.noise.lambdas):
        return lambda step: None
    return NoisePath(seed, trajectories, cfg.n_modes, substeps=substeps)


def simulate(cfg: StepperConfig, x: InitialData, master_seed: int, trajectories,
             record_every: int = 1, snapshots: bool = False, noise_substeps: int = 1,
             keep_history: bool | None = None) -> TrajectoryRecord:
    """Run the base system for a batch of trajectory indices on their keyed noise."""
    trajectories = np.atleast_1d(np.asarray(trajectories, dtype=np.int64))
    B = trajectories.size
    state = init_state(x.u0, x.eta0, cfg.kernel, cfg.basis, cfg.dt, cfg.tail_tol, batch=B,
                       method=cfg.memory, keep_history=keep_history)
    noise = _noise_source(cfg, master_seed, trajectories, noise_substeps)
    n_steps = cfg.n_steps
    rec = _Recorder(_record_steps(n_steps, record_every), B, cfg.n_modes, snapshots)
    rec.record(state)
    for step in range(n_steps):
        step_base(state, cfg, noise(step))
        if (step + 1) % record_every == 0:
            rec.record(state)
    return rec.finish(trajectories, {"seed": int(master_seed), "dt": cfg.dt, "T": cfg.T})


# -- coupled runs -------------------------------------------------------------

@dataclass
class CoupledRun:
    kind: str
    base: TrajectoryRecord
    partner: TrajectoryRecord
    dist_sq: np.ndarray
    budget: np.ndarray | None
    initial_dist_sq: float

    @property
    def times(self) -> np.ndarray:
        return self.base.times

    @property
    def trajectories(self) -> np.ndarray:
        return self.base.trajectories

    @classmethod
    def concatenate(cls, parts: list["CoupledRun"]) -> "CoupledRun":
        parts = sorted(parts, key=lambda r: int(r.trajectories[0]))
        budget = None
        if parts[0].budget is not None:
            budget = np.concatenate([p.budget for p in parts])
        return cls(parts[0].kind,
                   TrajectoryRecord.concatenate([p.base for p in parts]),
                   TrajectoryRecord.concatenate([p.partner for p in parts]),
                   np.concatenate([p.dist_sq for p in parts]), budget, parts[0].initial_dist_sq)


def run_coupled(kind: str, x: InitialData, y: InitialData | None, cfg: StepperConfig,
                ledger: ConstantsLedger, master_seed: int, trajectories,
                record_every: int = 1) -> CoupledRun:
    """Step the base from x and its hat/tilde partner in lockstep on one noise path.

    The hat partner always starts at the origin. The partner is advanced in
    difference form: ``d = u - partner`` obeys the same scheme with the noise
    cancelled, and the partner is recovered as ``u_next - d_next``.
    """
    if kind not in ("hat", "tilde"):
        raise ValueError("coupling kind must be 'hat' or 'tilde'")
    trajectories = np.atleast_1d(np.asarray(trajectories, dtype=np.int64))
    B, n = trajectories.size, cfg.n_modes
    if kind == "hat":
        y = InitialData(np.zeros(n), InitialHistory.zero())
        gain, n_c = hat_gain(cfg, ledger)
    else:
        if y is None:
            raise ValueError("tilde coupling needs a partner initial condition")
        gain, n_c = tilde_gain(cfg, ledger)
        if cfg.dt * gain >= 1:
            raise ValueError(f"dt*K2*alpha_nbar = {cfg.dt * gain:g} must stay below 1")
        lam = cfg.noise.lambdas[:n_c]
        if np.any(lam <= 0):
            raise AssumptionViolation("Girsanov shift needs lambda_k > 0 for k <= n_bar")

    def start(z: InitialData, hist=None):
        return init_state(z.u0, z.eta0 if hist is None else hist, cfg.kernel, cfg.basis, cfg.dt,
                          cfg.tail_tol, batch=B, method=cfg.memory)

    base, partner = start(x), start(y)
    d0 = np.asarray(x.u0, dtype=float) - np.asarray(y.u0, dtype=float)
    diff = MemoryTrace(np.broadcast_to(d0, (B, n)), history_difference(x.eta0, y.eta0, n),
                       cfg.kernel, cfg.basis, cfg.dt, cfg.tail_tol, cfg.memory)
    d = np.broadcast_to(d0, (B, n)).copy()
    noise = _noise_source(cfg, master_seed, trajectories, 1)
    dt, alpha = cfg.dt, cfg.basis.alphas
    damp = _damping(cfg, gain, n_c)
    denom = 1.0 + dt * alpha + dt * damp

    n_steps = cfg.n_steps
    n_rec = _record_steps(n_steps, record_every)
    rec_b = _Recorder(n_rec, B, n, False)
    rec_p = _Recorder(n_rec, B, n, False)
    dist = np.empty((B, n_rec))
    budget = np.empty((B, n_rec)) if kind == "tilde" else None
    b_acc = np.zeros(B)
    if kind == "tilde":
        shift = gain / cfg.noise.lambdas[:n_c]

    def snapshot(i):
        rec_b.record(base)
        rec_p.record(partner)
        dist[:, i] = sobolev_norm_sq(d, 0, cfg.basis) + diff.norm_sq(0)
        if budget is not None:
            budget[:, i] = b_acc

    snapshot(0)
    i = 1
    for step in range(n_steps):
        if kind == "tilde":
            beta = shift * d[:, :n_c]
            b_acc = b_acc + dt * np.sum(beta * beta, axis=1)
        u_next, _, f = _base_update(base, cfg, noise(step))
        with np.errstate(over="ignore", invalid="ignore"):
            f_p = apply_nonlinearity(partner.u, cfg.nonlinearity, cfg.basis, cfg.M)
            d = (d + dt * (alpha * diff.convolution() + (f - f_p))) / denom
        _check_finite(d, step + 1, "coupling difference")
        push_history(base, u_next)
        push_history(partner, u_next - d)
        diff.push(d)
        if (step + 1) % record_every == 0:
            snapshot(i)
            i += 1

    meta = {"seed": int(master_seed), "dt": cfg.dt, "T": cfg.T, "kind": kind}
    x_norm = initial_norm_sq(x, cfg)
    y_norm = initial_norm_sq(y, cfg)
    d_norm = float(dist[0, 0])
    meta.update(x_norm_sq=x_norm, y_norm_sq=y_norm)
    return CoupledRun(kind, rec_b.finish(trajectories, meta), rec_p.finish(trajectories, meta),
                      dist, budget, d_norm)


def girsanov_budget(run: CoupledRun, ledger: ConstantsLedger | None = None) -> np.ndarray:
    """Cumulative ``sum dt*||beta||^2`` per path at the record times (tilde runs)."""
    if run.kind != "tilde" or run.budget is None:
        raise ValueError("the Girsanov budget is defined for tilde couplings only")
    return run.budget


# -- ensembles ----------------------------------------------------------------

CHUNK = 64


def trajectory_chunks(trajectories, chunk: int = CHUNK) -> list[np.ndarray]:
    """Split indices at fixed absolute boundaries (multiples of ``chunk``).

    Batched linear algebra may round differently for different batch
    shapes, so a trajectory's bits depend on which chunk it lands in; fixing
    the boundaries makes results independent of the worker count.
    """
    idx = np.unique(np.asarray(list(trajectories), dtype=np.int64))
    if idx.size == 0:
        raise ValueError("no trajectories requested")
    groups = idx // chunk
    return [idx[groups == g] for g in np.unique(groups)]


def _map(fn, chunks, jobs: int):
    if jobs <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(chunks))) as pool:
        return list(pool.map(fn, chunks))


def simulate_ensemble(cfg: StepperConfig, x: InitialData, master_seed: int, trajectories,
                      jobs: int = 1, **kwargs) -> TrajectoryRecord:
    fn = partial(_simulate_chunk, cfg, x, master_seed, kwargs)
    return TrajectoryRecord.concatenate(_map(fn, trajectory_chunks(trajectories), jobs))


def _simulate_chunk(cfg, x, seed, kwargs, chunk):
    return simulate(cfg, x, seed, chunk, **kwargs)


def run_coupled_ensemble(kind: str, x: InitialData, y: InitialData | None, cfg: StepperConfig,
                         ledger: ConstantsLedger, master_seed: int, trajectories,
                         record_every: int = 1, jobs: int = 1) -> CoupledRun:
    fn = partial(_coupled_chunk, kind, x, y, cfg, ledger, master_seed, record_every)
    return CoupledRun.concatenate(_map(fn, trajectory_chunks(trajectories), jobs))


def _coupled_chunk(kind, x, y, cfg, ledger, seed, every, chunk):
    return run_coupled(kind, x, y, cfg, ledger, seed, chunk, every)
