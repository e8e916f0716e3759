"""Galerkin state (u, eta) with a lag-aligned memory history.

The memory variable is never interpolated: lag ``j`` of the history is the
coefficient vector stored ``j`` steps ago, or the initial history
``eta0(j*dt - t)`` once the lag reaches back past time zero.

Two evaluators share one quadrature rule (trapezoid over the lag nodes of
``[0, min(t, S)]`` plus the exact contribution of the initial history on
``[t, inf)``):

``direct``
    sums the ring buffer, works for every kernel and history kind;
``recursive``
    exponential kernels only; the same trapezoid sum updated by a geometric
    recursion in O(n) per step. It does not truncate at the horizon S, so it
    differs from ``direct`` by at most the tail mass ``rho(S)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelSpec
from .spectral import SpectralBasis, sobolev_norm_sq

RECURSIVE_RING_LIMIT = 64 * 2**20  # bytes; larger rings are dropped in recursive mode


@dataclass(frozen=True)
class InitialHistory:
    """Initial memory ``eta0(s)``, s > 0.

    kind ``"zero"``, ``"constant"`` (``coeffs``) or ``"sampled"`` (``samples``
    of shape ``(len(s_grid), n)``, linear in s between nodes; beyond the last
    node the value is held when ``hold_tail`` and is zero otherwise).
    """

    kind: str = "zero"
    coeffs: np.ndarray | None = field(default=None, repr=False)
    s_grid: np.ndarray | None = field(default=None, repr=False)
    samples: np.ndarray | None = field(default=None, repr=False)
    hold_tail: bool = False

    def __post_init__(self):
        if self.kind == "constant":
            object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        elif self.kind == "sampled":
            s = np.asarray(self.s_grid, dtype=float)
            v = np.asarray(self.samples, dtype=float)
            if s.ndim != 1 or v.ndim != 2 or v.shape[0] != s.size:
                raise ValueError("sampled history needs samples of shape (len(s_grid), n)")
            if s[0] != 0.0 or np.any(np.diff(s) <= 0):
                raise ValueError("sampled history grid must start at 0 and increase")
            object.__setattr__(self, "s_grid", s)
            object.__setattr__(self, "samples", v)
        elif self.kind != "zero":
            raise ValueError(f"unknown history kind {self.kind!r}")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def constant(cls, coeffs):
        return cls("constant", coeffs=coeffs)

    @classmethod
    def sampled(cls, s_grid, samples, hold_tail: bool = False):
        return cls("sampled", s_grid=s_grid, samples=samples, hold_tail=hold_tail)

    def scaled(self, c: float) -> "InitialHistory":
        if self.kind == "constant":
            return InitialHistory.constant(c * self.coeffs)
        if self.kind == "sampled":
            return InitialHistory.sampled(self.s_grid, c * self.samples, self.hold_tail)
        return self

    def values(self, s, n: int) -> np.ndarray:
        """eta0 at times ``s`` (1-D array); shape ``(len(s), n)``, or
        ``(len(s), B, n)`` for a batched constant history."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.kind == "zero":
            return np.zeros((s.size, n))
        if self.kind == "constant":
            c = np.broadcast_to(self.coeffs[..., :n], self.coeffs.shape[:-1] + (n,))
            return np.broadcast_to(c, (s.size,) + c.shape).copy()
        out = np.empty((s.size, n))
        for k in range(n):
            col = self.samples[:, k] if k < self.samples.shape[1] else np.zeros(self.s_grid.size)
            right = col[-1] if self.hold_tail else 0.0
            out[:, k] = np.interp(s, self.s_grid, col, right=right)
        return out


def _energy(values, basis: SpectralBasis, r: int):
    return sobolev_norm_sq(values, r + 1, basis)


class MemoryTrace:
    """Lag history of one coefficient path plus the two quadrature evaluators."""

    def __init__(self, u0, eta0: InitialHistory, kernel: KernelSpec, basis: SpectralBasis,
                 dt: float, tail_tol: float = 1e-12, method: str = "auto",
                 keep_history: bool | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 < tail_tol < 1:
            raise ValueError("tail_tol must lie in (0, 1)")
        u0 = np.atleast_2d(np.asarray(u0, dtype=float))
        self.batch, self.n = u0.shape
        if self.n != basis.n_modes:
            raise ValueError("initial coefficients must have one entry per mode")
        self.kernel, self.basis, self.eta0 = kernel, basis, eta0
        self.dt = float(dt)
        self.horizon = kernel.horizon(tail_tol)
        self.J = int(math.ceil(self.horizon / self.dt))
        self.steps = 0

        if eta0.kind == "sampled" and eta0.s_grid[-1] < self.horizon and not eta0.hold_tail:
            raise ValueError(
                f"sampled history ends at s={eta0.s_grid[-1]:g} < horizon {self.horizon:g} "
                "and declares no tail")

        recursive_ok = kernel.is_exponential and eta0.kind in ("zero", "constant")
        if method == "auto":
            method = "recursive" if recursive_ok else "direct"
        if method == "recursive" and not recursive_ok:
            raise ValueError("recursive memory needs an exponential kernel and a zero/constant history")
        if method not in ("direct", "recursive"):
            raise ValueError(f"unknown memory method {method!r}")
        self.method = method
        ring_bytes = 8 * (self.J + 1) * self.batch * self.n
        if keep_history is None:
            keep_history = method == "direct" or ring_bytes <= RECURSIVE_RING_LIMIT
        if method == "direct" and not keep_history:
            raise ValueError("direct memory evaluation needs the history ring")
        self.keep_history = keep_history

        self.u_first = u0.copy()
        self.u_last = u0.copy()
        if keep_history:
            self.ring = np.zeros((self.J + 1, self.batch, self.n))
            self.ring_energy = np.zeros((2, self.J + 1, self.batch))
            self.head = 0
            self.ring[0] = u0
            for r in (0, 1):
                self.ring_energy[r, 0] = _energy(u0, basis, r)
        else:
            self.ring = None
        if method == "recursive":
            self._decay = math.exp(-kernel.rate * self.dt)
            self.G = u0.copy()
            self.q_first = np.stack([_energy(u0, basis, r) for r in (0, 1)])
            self.q_last = self.q_first.copy()
            self.E = self.q_first.copy()

        self.truncation_bound = float(kernel.rho(self.horizon)) * self._eta0_sup_energy_beyond()

    # -- bookkeeping --------------------------------------------------------
    @property
    def t(self) -> float:
        return self.steps * self.dt

    def _eta0_sup_energy_beyond(self) -> float:
        e = self.eta0
        if e.kind == "zero":
            return 0.0
        if e.kind == "constant":
            return float(np.max(_energy(e.coeffs, self.basis, 0)))
        beyond = e.s_grid >= self.horizon
        vals = e.samples[beyond] if beyond.any() else e.samples[-1:]
        if not e.hold_tail and not beyond.any():
            return 0.0
        return float(np.max(_energy(vals, self.basis, 0)))

    def push(self, u_new):
        u_new = np.asarray(u_new, dtype=float).reshape(self.batch, self.n)
        self.steps += 1
        self.u_last = u_new.copy()
        if self.ring is not None:
            self.head = (self.head - 1) % (self.J + 1)
            self.ring[self.head] = u_new
            for r in (0, 1):
                self.ring_energy[r, self.head] = _energy(u_new, self.basis, r)
        if self.method == "recursive":
            q = np.stack([_energy(u_new, self.basis, r) for r in (0, 1)])
            self.G = u_new + self._decay * self.G
            self.E = q + self._decay * self.E
            self.q_last = q

    def eta_at(self, j: int) -> np.ndarray:
        """eta(t; j*dt) for the whole batch, shape (B, n)."""
        if j < 0:
            raise ValueError("lag index must be nonnegative")
        if j <= self.steps:
            if j == 0:
                return self.u_last.copy()
            if self.ring is None or j > self.J:
                raise ValueError("lag beyond the stored history")
            return self.ring[(self.head + j) % (self.J + 1)].copy()
        vals = self.eta0.values([(j - self.steps) * self.dt], self.n)[0]
        return np.broadcast_to(vals, (self.batch, self.n)).copy()

    # -- quadrature ---------------------------------------------------------
    def _slot_weights(self, f) -> np.ndarray:
        """Trapezoid weights times f(s_j) laid out in ring-slot order."""
        jmax = min(self.steps, self.J)
        w = np.zeros(self.J + 1)
        if jmax == 0:
            return w
        j = np.arange(jmax + 1)
        wj = np.full(jmax + 1, self.dt)
        wj[0] = wj[-1] = 0.5 * self.dt
        w[(self.head + j) % (self.J + 1)] = wj * f(j * self.dt)
        return w

    def _sampled_tail_nodes(self):
        """Lag nodes in [t, S] covered by the initial history, with trapezoid weights."""
        if self.steps >= self.J:
            return None
        j = np.arange(self.steps, self.J + 1)
        w = np.full(j.size, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        if j.size == 1:
            w[:] = 0.0
        return j * self.dt, w, (j - self.steps) * self.dt

    def convolution(self, method: str | None = None) -> np.ndarray:
        """m_k = int_0^inf K(s) eta_k(t; s) ds, shape (B, n)."""
        method = method or self.method
        t = self.t
        if method == "recursive":
            if self.method != "recursive":
                raise ValueError("recursive accumulators are not active for this trace")
            corr = math.exp(-self.kernel.rate * t)
            traj = self.kernel.amplitude * self.dt * (
                self.G - 0.5 * self.u_last - 0.5 * corr * self.u_first)
        else:
            if self.ring is None:
                raise ValueError("history ring was not kept")
            w = self._slot_weights(self.kernel.K)
            traj = np.tensordot(w, self.ring, axes=(0, 0))
        return traj + self._history_convolution(t)

    def _history_convolution(self, t: float):
        e = self.eta0
        if e.kind == "zero":
            return 0.0
        if e.kind == "constant":
            return float(self.kernel.rho(t)) * e.coeffs
        nodes = self._sampled_tail_nodes()
        if nodes is None:
            return 0.0
        s, w, back = nodes
        vals = e.values(back, self.n)
        return (w * self.kernel.K(s)) @ vals

    def norm_sq(self, r: int = 0, method: str | None = None) -> np.ndarray:
        """||eta||^2 in the weighted memory space of index r (0 or 1), shape (B,)."""
        if r not in (0, 1):
            raise ValueError("memory norms are supported for r in {0, 1}")
        method = method or self.method
        t = self.t
        if method == "recursive":
            if self.method != "recursive":
                raise ValueError("recursive accumulators are not active for this trace")
            corr = math.exp(-self.kernel.rate * t)
            traj = (self.kernel.amplitude / self.kernel.rate) * self.dt * (
                self.E[r] - 0.5 * self.q_last[r] - 0.5 * corr * self.q_first[r])
        else:
            if self.ring is None:
                raise ValueError("history ring was not kept")
            w = self._slot_weights(self.kernel.rho)
            traj = w @ self.ring_energy[r]
        return traj + self._history_norm(t, r)

    def _history_norm(self, t: float, r: int):
        e = self.eta0
        if e.kind == "zero":
            return 0.0
        if e.kind == "constant":
            return float(self.kernel.rho_integral(t)) * _energy(e.coeffs, self.basis, r)
        nodes = self._sampled_tail_nodes()
        if nodes is None:
            return 0.0
        s, w, back = nodes
        vals = e.values(back, self.n)
        return float((w * self.kernel.rho(s)) @ _energy(vals, self.basis, r))


class GalerkinState:
    """Mode coefficients ``u`` (shape (B, n)) together with their memory trace."""

    def __init__(self, u, trace: MemoryTrace):
        self.u = np.atleast_2d(np.asarray(u, dtype=float)).copy()
        self.trace = trace

    @property
    def t(self) -> float:
        return self.trace.t

    @property
    def steps(self) -> int:
        return self.trace.steps

    @property
    def basis(self) -> SpectralBasis:
        return self.trace.basis

    @property
    def kernel(self) -> KernelSpec:
        return self.trace.kernel

    @property
    def dt(self) -> float:
        return self.trace.dt


def init_state(u0, eta0: InitialHistory, kernel: KernelSpec, basis: SpectralBasis, dt: float,
               tail_tol: float = 1e-12, batch: int | None = None, method: str = "auto",
               keep_history: bool | None = None) -> GalerkinState:
    u0 = np.asarray(u0, dtype=float)
    if batch is not None:
        u0 = np.broadcast_to(u0, (batch, basis.n_modes))
    trace = MemoryTrace(u0, eta0, kernel, basis, dt, tail_tol, method, keep_history)
    return GalerkinState(u0, trace)


def push_history(state: GalerkinState, u_new) -> GalerkinState:
    state.trace.push(u_new)
    state.u = np.asarray(u_new, dtype=float).reshape(state.u.shape).copy()
    return state


def eta_at(state: GalerkinState, j: int) -> np.ndarray:
    return state.trace.eta_at(j)


def memory_convolution(state: GalerkinState, method: str | None = None) -> np.ndarray:
    return state.trace.convolution(method)


def memory_norm_sq(state: GalerkinState, r: int = 0, method: str | None = None) -> np.ndarray:
    return state.trace.norm_sq(r, method)


def product_norm_sq(state: GalerkinState, r: int = 0) -> np.ndarray:
    return sobolev_norm_sq(state.u, r, state.basis) + memory_norm_sq(state, r)


def energy_g(state: GalerkinState) -> np.ndarray:
    """Lyapunov energy g = 1/2 ||(u, eta)||^2 in the base product space."""
    return 0.5 * product_norm_sq(state, 0)
