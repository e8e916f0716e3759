"""Polynomial reaction terms phi and their growth/dissipation constants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P

from .spectral import SpectralBasis, to_physical, to_spectral


class AssumptionViolation(ValueError):
    """An input violates a structural assumption needed downstream."""


@dataclass(frozen=True)
class NonlinearitySpec:
    """``phi(x) = sum_i coeffs[i] x**i`` (ascending order); empty coeffs means zero."""

    coeffs: tuple = ()

    def __post_init__(self):
        c = tuple(float(x) for x in self.coeffs)
        while c and c[-1] == 0.0:
            c = c[:-1]
        if c and c[0] != 0.0:
            raise AssumptionViolation("phi(0) must vanish (constant coefficient is nonzero)")
        object.__setattr__(self, "coeffs", c)

    @property
    def family(self) -> str:
        return "zero" if not self.coeffs else "polynomial"

    @property
    def degree(self) -> int:
        return max(len(self.coeffs) - 1, 0)

    @property
    def is_linear(self) -> bool:
        return self.degree <= 1

    def __call__(self, x):
        return phi_eval(self, x)


def allen_cahn() -> NonlinearitySpec:
    return NonlinearitySpec((0.0, 1.0, 0.0, -1.0))


ZERO = NonlinearitySpec(())


def phi_eval(nl: NonlinearitySpec, x):
    if not nl.coeffs:
        return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
    return P.polyval(x, nl.coeffs)


@dataclass(frozen=True)
class NonlinearityConstants:
    p: float
    a1: float
    a2: float
    a3: float
    a_phi: float

    def to_dict(self) -> dict:
        return {"p": self.p, "a1": self.a1, "a2": self.a2, "a3": self.a3, "a_phi": self.a_phi}


def _poly_max(c, radius: float) -> float:
    """Supremum of an even-degree polynomial with negative leading coefficient
    (or of a constant), via critical points, cross-checked on a grid."""
    c = np.trim_zeros(np.asarray(c, dtype=float), "b")
    if c.size <= 1:
        return float(c[0]) if c.size else 0.0
    dc = P.polyder(c)
    roots = P.polyroots(dc) if dc.size > 1 else np.array([])
    real = roots[np.abs(roots.imag) <= 1e-9 * (1 + np.abs(roots.real))].real
    candidates = [float(np.max(P.polyval(real, c)))] if real.size else []
    grid = np.linspace(-radius, radius, 20001)
    vals = P.polyval(grid, c)
    i = int(np.argmax(vals))
    candidates.append(float(vals[i]))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    candidates.append(_golden_max(lambda x: P.polyval(x, c), lo, hi))
    return max(candidates)


def _golden_max(f, lo, hi, iters: int = 100) -> float:
    g = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = f(x1)
    return float(max(f1, f2, f(lo), f(hi)))


def derive_nl_constants(nl: NonlinearitySpec, search_radius: float = 10.0) -> NonlinearityConstants:
    """Growth exponent and constants (a1, a2, a3, a_phi) for a dissipative polynomial.

    a2 is half the leading magnitude unless phi is a single monomial, in which
    case ``x phi(x) = c x^{p+1}`` holds exactly and the full magnitude is used.
    a1 is the triangle-inequality constant ``sum |c_i|``.
    """
    if nl.family == "zero":
        return NonlinearityConstants(p=1.0, a1=0.0, a2=0.0, a3=0.0, a_phi=0.0)
    c = np.asarray(nl.coeffs)
    p = nl.degree
    lead = c[-1]
    if p % 2 == 0:
        raise AssumptionViolation(f"phi has even degree {p}; x*phi(x) is unbounded above")
    if lead >= 0:
        raise AssumptionViolation("phi needs a negative leading coefficient")

    monomial = np.count_nonzero(c) == 1
    a2 = abs(lead) if monomial else abs(lead) / 2
    # x phi(x) + a2 x^{p+1}; |x|^{p+1} = x^{p+1} since p is odd
    xphi = np.concatenate([[0.0], c])
    h = xphi.copy()
    h[p + 1] += a2
    a3 = max(_poly_max(h, search_radius), 0.0)
    a_phi = _poly_max(P.polyder(c), search_radius)
    a1 = float(np.sum(np.abs(c)))
    return NonlinearityConstants(p=float(p), a1=a1, a2=float(a2), a3=float(a3), a_phi=float(a_phi))


def apply_nonlinearity(coeffs, nl: NonlinearitySpec, basis: SpectralBasis, M: int | None = None):
    """Mode coefficients of ``P_n phi(u)`` evaluated pseudospectrally on M nodes.

    Linear phi acts diagonally and skips the transform pair.
    """
    u = np.asarray(coeffs, dtype=float)
    if nl.family == "zero":
        return np.zeros_like(u)
    if nl.is_linear:
        return nl.coeffs[1] * u
    n = u.shape[-1]
    if M is None:
        M = 4 * n
    values = to_physical(u, M, basis)
    return to_spectral(phi_eval(nl, values), n, basis)
