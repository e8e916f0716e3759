"""Dirichlet eigenbasis, Sobolev-scale norms, projections and the noise operator."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class UnsupportedTransformError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    """Eigenvalues ``alphas`` of the Dirichlet Laplacian, ordered increasingly."""

    alphas: np.ndarray = field(repr=False)
    domain_length: float
    source: str = "interval1d"

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float)
        if alphas.ndim != 1 or alphas.size == 0:
            raise ValueError("basis needs at least one eigenvalue")
        if alphas[0] <= 0 or np.any(np.diff(alphas) <= 0):
            raise ValueError("eigenvalues must be positive and strictly increasing")
        if self.domain_length <= 0:
            raise ValueError("domain length must be positive")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def n_modes(self) -> int:
        return int(self.alphas.size)

    def alpha(self, k: int) -> float:
        """Eigenvalue of mode ``k`` (1-based, as in the math)."""
        return float(self.alphas[k - 1])


def build_basis(n: int, L: float) -> SpectralBasis:
    if n < 1:
        raise ValueError("basis needs n >= 1 modes")
    if L <= 0:
        raise ValueError("domain length must be positive")
    k = np.arange(1, n + 1)
    return SpectralBasis((k * np.pi / L) ** 2, float(L), "interval1d")


def user_basis(alphas, volume: float) -> SpectralBasis:
    return SpectralBasis(np.asarray(alphas, dtype=float), float(volume), "user")


def sobolev_norm_sq(coeffs, r: float, basis: SpectralBasis):
    """``sum_k alpha_k^r u_k^2`` over the last axis of ``coeffs``."""
    u = np.asarray(coeffs, dtype=float)
    n = u.shape[-1]
    if n > basis.n_modes:
        raise ValueError("more coefficients than basis modes")
    w = basis.alphas[:n] ** r
    return np.sum(w * u * u, axis=-1)


def project(coeffs, m: int):
    if m < 0:
        raise ValueError("projection index must be nonnegative")
    u = np.array(coeffs, dtype=float, copy=True)
    u[..., m:] = 0.0
    return u


@lru_cache(maxsize=32)
def _sine_matrix(n: int, M: int, L: float) -> np.ndarray:
    j = np.arange(1, M + 1)[:, None]
    k = np.arange(1, n + 1)[None, :]
    mat = np.sqrt(2.0 / L) * np.sin(np.pi * j * k / (M + 1))
    mat.setflags(write=False)
    return mat


def collocation_nodes(M: int, basis: SpectralBasis) -> np.ndarray:
    L = basis.domain_length
    return np.arange(1, M + 1) * L / (M + 1)


def _check_transform(n: int, M: int, basis: SpectralBasis):
    if basis.source != "interval1d":
        raise UnsupportedTransformError("physical transforms need an interval basis")
    if M < n:
        raise ValueError(f"collocation count M={M} is below the mode count n={n}")


def to_physical(coeffs, M: int, basis: SpectralBasis):
    """Values at the interior nodes ``x_j = j L / (M + 1)``, j = 1..M."""
    u = np.asarray(coeffs, dtype=float)
    n = u.shape[-1]
    _check_transform(n, M, basis)
    return u @ _sine_matrix(n, M, basis.domain_length).T


def to_spectral(values, n: int, basis: SpectralBasis):
    v = np.asarray(values, dtype=float)
    M = v.shape[-1]
    _check_transform(n, M, basis)
    L = basis.domain_length
    return (L / (M + 1)) * (v @ _sine_matrix(n, M, L))


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal noise amplitudes ``lambda_k`` (one per mode)."""

    lambdas: np.ndarray = field(repr=False)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("noise amplitudes must be a finite nonnegative sequence")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def power_law(cls, amplitude: float, power: float, n: int) -> "NoiseSpec":
        k = np.arange(1, n + 1, dtype=float)
        return cls(amplitude / k**power)

    @property
    def op_norm(self) -> float:
        return float(np.max(self.lambdas)) if self.lambdas.size else 0.0

    def trace_q(self) -> float:
        return float(np.sum(self.lambdas**2))

    def scaled(self, gamma: float) -> "NoiseSpec":
        return NoiseSpec(gamma * self.lambdas)


def apply_noise_operator(coeffs, noise: NoiseSpec):
    u = np.asarray(coeffs, dtype=float)
    return noise.lambdas[: u.shape[-1]] * u


def check_noise_assumptions(noise: NoiseSpec, basis: SpectralBasis, n_bar: int) -> dict:
    if noise.lambdas.size != basis.n_modes:
        raise ValueError("noise length must match the number of modes")
    if not 1 <= n_bar <= basis.n_modes:
        raise ValueError(f"n_bar={n_bar} outside 1..{basis.n_modes}")
    a_q = float(np.min(noise.lambdas[:n_bar]))
    return {
        "trace_AQQ": float(np.sum(noise.lambdas**2 * basis.alphas)),
        "op_norm": noise.op_norm,
        "a_Q": a_q,
        "forced_ok": a_q > 0,
    }
