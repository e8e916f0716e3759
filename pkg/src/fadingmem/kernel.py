"""Memory kernels K and their tail weight rho(t) = int_t^inf K(s) ds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

ASSUMPTION_ATOL = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """A positive memory kernel.

    ``family`` is ``"exponential"`` (``K(s) = amplitude * exp(-rate * s)``) or
    ``"tabulated"`` (monotone cubic through ``(grid, values)`` with an
    exponential tail ``exp(-rate * (s - s_max))`` beyond the last node).
    For tabulated kernels ``rate`` is the declared decay rate delta.
    """

    family: str
    rate: float
    amplitude: float = 0.0
    grid: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)
    description: str = ""

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("kernel rate must be positive")
        if self.family == "exponential":
            if self.amplitude <= 0:
                raise ValueError("kernel amplitude must be positive")
        elif self.family == "tabulated":
            grid = np.asarray(self.grid, dtype=float)
            values = np.asarray(self.values, dtype=float)
            if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
                raise ValueError("tabulated kernel needs matching 1-D grid and values")
            if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
                raise ValueError("tabulated grid must start at 0 and increase")
            if np.any(values <= 0):
                raise ValueError("tabulated kernel values must be positive")
            object.__setattr__(self, "grid", grid)
            object.__setattr__(self, "values", values)
            interp = PchipInterpolator(grid, values, extrapolate=False)
            object.__setattr__(self, "_interp", interp)
            object.__setattr__(self, "_deriv", interp.derivative())
            anti = interp.antiderivative()
            anti2 = interp.antiderivative(2)
            object.__setattr__(self, "_anti", anti)
            object.__setattr__(self, "_anti2", anti2)
        else:
            raise ValueError(f"unknown kernel family {self.family!r}")

    @property
    def delta(self) -> float:
        return self.rate

    @property
    def is_exponential(self) -> bool:
        return self.family == "exponential"

    # -- tabulated helpers -------------------------------------------------
    def _s_max(self) -> float:
        return float(self.grid[-1])

    def _tab_K(self, s):
        smax = self._s_max()
        inside = s <= smax
        out = np.empty_like(s)
        out[inside] = self._interp(s[inside])
        out[~inside] = self.values[-1] * np.exp(-self.rate * (s[~inside] - smax))
        return out

    def _tab_dK(self, s):
        smax = self._s_max()
        inside = s <= smax
        out = np.empty_like(s)
        out[inside] = self._deriv(s[inside])
        out[~inside] = -self.rate * self.values[-1] * np.exp(-self.rate * (s[~inside] - smax))
        return out

    def _tab_rho(self, s):
        smax = self._s_max()
        tail = self.values[-1] / self.rate
        inside = s <= smax
        out = np.empty_like(s)
        out[inside] = self._anti(smax) - self._anti(s[inside]) + tail
        out[~inside] = tail * np.exp(-self.rate * (s[~inside] - smax))
        return out

    def _tab_rho_int(self, s):
        smax = self._s_max()
        tail = self.values[-1] / self.rate
        inside = s <= smax
        out = np.empty_like(s)
        si = s[inside]
        # int_s^smax rho = int_s^smax (A(smax) - A(r) + tail) dr
        a_smax = self._anti(smax)
        out[inside] = ((a_smax + tail) * (smax - si)
                       - (self._anti2(smax) - self._anti2(si))
                       + tail / self.rate)
        out[~inside] = tail / self.rate * np.exp(-self.rate * (s[~inside] - smax))
        return out

    # -- public evaluation -------------------------------------------------
    def K(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_exponential:
            return self.amplitude * np.exp(-self.rate * s)
        return self._tab_K(np.atleast_1d(s)).reshape(s.shape)

    def dK(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_exponential:
            return -self.rate * self.amplitude * np.exp(-self.rate * s)
        return self._tab_dK(np.atleast_1d(s)).reshape(s.shape)

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        if self.is_exponential:
            return self.amplitude / self.rate * np.exp(-self.rate * s)
        return self._tab_rho(np.atleast_1d(s)).reshape(s.shape)

    def rho_integral(self, s):
        """``int_s^inf rho(r) dr``, used for the memory norm of constant histories."""
        s = np.asarray(s, dtype=float)
        if self.is_exponential:
            return self.amplitude / self.rate**2 * np.exp(-self.rate * s)
        return self._tab_rho_int(np.atleast_1d(s)).reshape(s.shape)

    def horizon(self, tail_tol: float) -> float:
        """Smallest s with rho(s) <= tail_tol * rho(0)."""
        if not 0 < tail_tol < 1:
            raise ValueError("tail_tol must lie in (0, 1)")
        if self.is_exponential:
            return float(np.log(1.0 / tail_tol) / self.rate)
        target = tail_tol * float(self.rho(0.0))
        smax = self._s_max()
        if float(self.rho(smax)) <= target:
            from scipy.optimize import brentq

            return float(brentq(lambda s: float(self.rho(s)) - target, 0.0, smax))
        tail = self.values[-1] / self.rate
        return float(smax + np.log(tail / target) / self.rate)


def exponential_kernel(amplitude: float, rate: float) -> KernelSpec:
    return KernelSpec("exponential", rate=rate, amplitude=amplitude,
                      description=f"{amplitude}*exp(-{rate}*s)")


def tabulated_kernel(grid, values, rate: float, description: str = "") -> KernelSpec:
    return KernelSpec("tabulated", rate=rate, grid=grid, values=values,
                      description=description)


def kernel_eval(spec: KernelSpec, s):
    """Return ``(K(s), rho(s))``; raises for negative times."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("kernel evaluated at negative time")
    K = spec.K(s_arr)
    rho = spec.rho(s_arr)
    if s_arr.ndim == 0:
        return float(K), float(rho)
    return K, rho


def kernel_l1(spec: KernelSpec) -> float:
    """L1 mass of K on the half line (equals rho(0))."""
    if spec.is_exponential:
        return spec.amplitude / spec.rate
    return float(spec.rho(0.0))


@dataclass(frozen=True)
class KernelReport:
    l1_mass: float
    delta_max: float
    ratio_bound_c: float
    passed: dict
    grid: np.ndarray = field(repr=False)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "l1_mass": self.l1_mass,
            "delta_max": self.delta_max,
            "ratio_bound_c": self.ratio_bound_c,
            "passed": dict(self.passed),
            "grid_size": int(self.grid.size),
        }


def default_check_grid(spec: KernelSpec, size: int = 2048) -> np.ndarray:
    top = 40.0 / spec.rate
    return np.concatenate([[0.0], np.geomspace(1e-6 * top, top, size - 1)])


def check_kernel_assumptions(spec: KernelSpec, grid=None) -> KernelReport:
    """Certify positivity, L1 mass < 1, ``K' + delta K <= 0`` and a finite
    ratio bound ``K <= c rho`` on ``grid``."""
    if grid is None:
        grid = default_check_grid(spec)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("check grid must be nonempty")
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("check grid must start at 0 and increase")

    mass = kernel_l1(spec)
    K = spec.K(grid)
    if spec.is_exponential:
        delta_max = spec.rate
        ratio_c = spec.rate
        decay_ok = True
    else:
        dK = spec.dK(grid)
        decay_ok = bool(np.all(dK + spec.rate * K <= ASSUMPTION_ATOL))
        delta_max = float(np.min(-dK / K))
        # K <= c rho with c = sup K / rho on the grid
        ratio_c = float(np.max(K / spec.rho(grid)))
    passed = {
        "positive": bool(np.all(K > 0)),
        "l1_below_one": bool(mass < 1.0),
        "decay_rate": decay_ok,
        "ratio_bounded": bool(np.isfinite(ratio_c)),
    }
    return KernelReport(mass, float(delta_max), float(ratio_c), passed, grid)
