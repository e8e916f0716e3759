import numpy as np
import pytest

from fadingmem.constants import derive_ledger
from fadingmem.integrator import StepperConfig
from fadingmem.kernel import exponential_kernel
from fadingmem.nonlinearity import allen_cahn, derive_nl_constants
from fadingmem.spectral import NoiseSpec, build_basis

REF_N = 32


def ref1_stepper(**overrides) -> StepperConfig:
    kw = dict(basis=build_basis(REF_N, 1.0), kernel=exponential_kernel(0.5, 1.0),
              noise=NoiseSpec.power_law(0.1, 2, REF_N), nonlinearity=allen_cahn(),
              dt=1e-3, T=1.0, M=128, tail_tol=1e-12)
    kw.update(overrides)
    return StepperConfig(**kw)


def unit(k: int, n: int = REF_N) -> np.ndarray:
    v = np.zeros(n)
    v[k - 1] = 1.0
    return v


@pytest.fixture(scope="session")
def ref1():
    return ref1_stepper()


@pytest.fixture(scope="session")
def ref1_ledger(ref1):
    return derive_ledger(ref1.kernel, ref1.basis, ref1.noise,
                         derive_nl_constants(ref1.nonlinearity))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
