"""Derived constants for the moment bounds, the hat/tilde couplings and d_N contraction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .kernel import KernelSpec, check_kernel_assumptions, kernel_l1
from .nonlinearity import AssumptionViolation, NonlinearityConstants
from .spectral import NoiseSpec, SpectralBasis


class BasisTooSmall(AssumptionViolation):
    pass


LEDGER_KEYS = (
    "eps1", "K1", "beta_max", "n_bar", "n_star", "eps2", "K2", "zeta", "a_Q",
    "zeta1", "N_min", "c_lyap", "B_lyap", "c_hat",
)


@dataclass(frozen=True)
class ConstantsLedger:
    eps1: float
    K1: float
    beta_max: float
    n_bar: int
    n_star: int
    eps2: float
    K2: float
    zeta: float
    a_Q: float
    zeta1: float
    N_min: float
    c_lyap: float
    B_lyap: float
    c_hat: float

    def to_dict(self) -> dict:
        return asdict(self)

    def alpha(self, N: float) -> float:
        """Contraction factor ``exp(-zeta) + zeta1 / N`` for d_N."""
        return math.exp(-self.zeta) + self.zeta1 / N

    def default_beta(self) -> float:
        return min(1.0, 0.01 * self.beta_max)


def _first_index(threshold: float, coeff: float, alphas: np.ndarray, name: str) -> int:
    # strict inequality a_phi < coeff * alpha_k; ties move to the next index
    hits = np.nonzero(coeff * alphas > threshold)[0]
    if hits.size == 0:
        raise BasisTooSmall(
            f"no mode k <= {alphas.size} satisfies a_phi < {coeff:g}*alpha_k ({name}); enlarge the basis")
    return int(hits[0]) + 1


def derive_ledger(kernel: KernelSpec, basis: SpectralBasis, noise: NoiseSpec,
                  nl_constants: NonlinearityConstants) -> ConstantsLedger:
    report = check_kernel_assumptions(kernel)
    if not report.all_passed:
        failed = [k for k, ok in report.passed.items() if not ok]
        raise AssumptionViolation(f"kernel fails assumption checks: {', '.join(failed)}")
    a_phi = nl_constants.a_phi
    if not math.isfinite(a_phi):
        raise AssumptionViolation("a_phi must be finite")
    if noise.lambdas.size != basis.n_modes:
        raise ValueError("noise length must match the number of modes")

    mass = kernel_l1(kernel)
    delta = kernel.delta
    alphas = basis.alphas
    lam = noise.lambdas

    eps1 = (1 - mass) / mass
    K1 = (1 - mass) / 2
    n_bar = _first_index(a_phi, 1 - mass, alphas, "n_bar")
    n_star = _first_index(a_phi, K1, alphas, "n_star")
    a_bar = alphas[n_bar - 1]
    eps2 = ((1 - mass) * a_bar - a_phi) / (mass * a_bar)
    K2 = 1 - (1 + eps2 / 2) * mass
    zeta = min(2 * (K2 * a_bar - a_phi), eps2 * delta / (1 + eps2))
    a_Q = float(np.min(lam[:n_bar]))
    if a_Q <= 0:
        raise AssumptionViolation(
            f"noise does not force every mode k <= n_bar={n_bar} (a_Q = 0)")
    zeta1 = K2 * a_bar / (a_Q * math.sqrt(2 * zeta))
    N_min = zeta1 / (1 - math.exp(-zeta))
    q_norm = float(np.max(lam))
    beta_max = 2 * K1 * alphas[0] / q_norm**2
    c_lyap = min(2 * K1 * alphas[0], eps1 * delta / (1 + eps1))
    B_lyap = nl_constants.a3 * basis.domain_length + 0.5 * float(np.sum(lam**2))
    c_hat = min(2 * (K1 * alphas[n_star - 1] - a_phi), eps1 * delta / (1 + eps1))
    return ConstantsLedger(
        eps1=float(eps1), K1=float(K1), beta_max=float(beta_max), n_bar=n_bar,
        n_star=n_star, eps2=float(eps2), K2=float(K2), zeta=float(zeta), a_Q=a_Q,
        zeta1=float(zeta1), N_min=float(N_min), c_lyap=float(c_lyap),
        B_lyap=float(B_lyap), c_hat=float(c_hat),
    )


def lyapunov_constants(kernel: KernelSpec, basis: SpectralBasis, noise: NoiseSpec,
                       nl_constants: NonlinearityConstants) -> tuple[float, float]:
    """``(c_lyap, B_lyap)`` of the energy drift inequality.

    Unlike :func:`derive_ledger` this needs no forced modes, so it also
    covers the noise-free case.
    """
    mass = kernel_l1(kernel)
    if not mass < 1:
        raise AssumptionViolation("kernel L1 mass must be below one")
    eps1 = (1 - mass) / mass if mass > 0 else math.inf
    K1 = (1 - mass) / 2
    memory_rate = kernel.delta if math.isinf(eps1) else eps1 * kernel.delta / (1 + eps1)
    c = min(2 * K1 * basis.alphas[0], memory_rate)
    B = nl_constants.a3 * basis.domain_length + 0.5 * float(np.sum(noise.lambdas**2))
    return float(c), float(B)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "margin": float(self.margin)}


def validate_ledger(ledger: ConstantsLedger | None, kernel: KernelSpec, basis: SpectralBasis,
                    noise: NoiseSpec, nl_constants: NonlinearityConstants) -> list[Check]:
    """Re-derive the side conditions independently and report margins.

    ``ledger`` may be None when derivation itself failed; the report then
    names the failing precondition instead of raising.
    """
    mass = kernel_l1(kernel)
    a_phi = nl_constants.a_phi
    alphas = basis.alphas
    checks = [Check("kernel_mass_below_one", mass < 1, 1 - mass)]

    # threshold indices by direct scan, counting down from the top
    bar_ok = [k for k in range(basis.n_modes, 0, -1) if (1 - mass) * alphas[k - 1] - a_phi > 0]
    star_ok = [k for k in range(basis.n_modes, 0, -1) if 0.5 * (1 - mass) * alphas[k - 1] - a_phi > 0]
    checks.append(Check("n_bar_resolvable", bool(bar_ok),
                        (1 - mass) * alphas[-1] - a_phi))
    checks.append(Check("n_star_resolvable", bool(star_ok),
                        0.5 * (1 - mass) * alphas[-1] - a_phi))
    if ledger is None or not bar_ok:
        if bar_ok:
            n_bar = min(bar_ok)
            a_q = float(np.min(noise.lambdas[:n_bar]))
            checks.append(Check("a_Q_positive", a_q > 0, a_q))
        return checks

    n_bar = min(bar_ok)
    a_bar = alphas[n_bar - 1]
    checks.append(Check("n_bar_minimal", ledger.n_bar == n_bar, float(n_bar - ledger.n_bar)))
    if star_ok:
        checks.append(Check("n_star_minimal", ledger.n_star == min(star_ok),
                            float(min(star_ok) - ledger.n_star)))
    lhs = ledger.K2 * a_bar
    rhs = 0.5 * (a_phi + a_bar * (1 - mass))
    ident = abs(lhs - rhs)
    slack = 1e-12 * max(1.0, abs(rhs))
    checks.append(Check("K2_identity", ident <= slack, slack - ident))
    checks.append(Check("K2_alpha_exceeds_a_phi", lhs > a_phi, lhs - a_phi))
    k1_star = 0.5 * (1 - mass) * alphas[ledger.n_star - 1]
    checks.append(Check("K1_alpha_exceeds_a_phi", k1_star > a_phi, k1_star - a_phi))
    checks.append(Check("eps1_positive", ledger.eps1 > 0, ledger.eps1))
    checks.append(Check("K1_positive", ledger.K1 > 0, ledger.K1))
    checks.append(Check("zeta_positive", ledger.zeta > 0, ledger.zeta))
    checks.append(Check("zeta1_positive", ledger.zeta1 > 0, ledger.zeta1))
    cap = ledger.eps2 * kernel.delta / (1 + ledger.eps2)
    checks.append(Check("zeta_below_memory_cap", ledger.zeta <= cap * (1 + 1e-15), cap - ledger.zeta))
    a_q = float(np.min(noise.lambdas[:n_bar]))
    checks.append(Check("a_Q_positive", a_q > 0, a_q))
    N = ledger.N_min * (1 + 1e-9)
    alpha = math.exp(-ledger.zeta) + ledger.zeta1 / N
    checks.append(Check("alpha_below_one_at_N_min", alpha < 1, 1 - alpha))
    return checks
