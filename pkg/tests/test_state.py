import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from fadingmem.kernel import exponential_kernel, tabulated_kernel
from fadingmem.spectral import build_basis, sobolev_norm_sq
from fadingmem.state import (
    InitialHistory, MemoryTrace, energy_g, eta_at, init_state, memory_convolution,
    memory_norm_sq, product_norm_sq, push_history,
)

from conftest import unit

K = exponential_kernel(0.5, 1.0)
B32 = build_basis(32, 1.0)
PI2 = math.pi**2


def test_zero_history_has_zero_memory():
    s = init_state(np.zeros(32), InitialHistory.zero(), K, B32, 1e-3)
    assert memory_norm_sq(s)[0] == 0.0
    np.testing.assert_array_equal(memory_convolution(s), 0.0)
    assert product_norm_sq(s)[0] == 0.0


def test_constant_history_closed_forms():
    s = init_state(unit(1), InitialHistory.constant(unit(1)), K, B32, 1e-3)
    assert memory_norm_sq(s)[0] == pytest.approx(0.5 * PI2, rel=1e-14)
    assert memory_convolution(s)[0, 0] == pytest.approx(0.5, rel=1e-14)
    assert product_norm_sq(s)[0] == pytest.approx(1 + 0.5 * PI2, rel=1e-14)
    assert energy_g(s)[0] == pytest.approx(0.5 * (1 + 0.5 * PI2), rel=1e-14)


def test_horizon_and_lag_count():
    tr = MemoryTrace(np.zeros(32), InitialHistory.zero(), K, B32, 1e-3)
    assert tr.horizon == pytest.approx(27.631021, abs=1e-6)
    assert tr.J == 27632


def test_unsupported_norm_index():
    s = init_state(np.zeros(32), InitialHistory.zero(), K, B32, 1e-3)
    with pytest.raises(ValueError):
        memory_norm_sq(s, 2)


def test_short_sampled_history_needs_tail():
    with pytest.raises(ValueError):
        MemoryTrace(np.zeros(4), InitialHistory.sampled([0.0, 1.0], np.ones((2, 4))), K,
                    build_basis(4, 1.0), 1e-2)


def test_lag_storage_is_exact():
    basis = build_basis(4, 1.0)
    rng = np.random.default_rng(0)
    hist = InitialHistory.constant(np.array([0.3, -0.1, 0.0, 0.2]))
    s = init_state(rng.normal(size=4), hist, K, basis, 0.05, method="direct")
    np.testing.assert_array_equal(eta_at(s, 3)[0], hist.coeffs)
    path = [s.u[0].copy()]
    for _ in range(40):
        push_history(s, rng.normal(size=4))
        path.append(s.u[0].copy())
        np.testing.assert_array_equal(eta_at(s, 0)[0], s.u[0])
        np.testing.assert_array_equal(eta_at(s, 1)[0], path[-2])
    m = len(path) - 1
    for j in range(m + 1):
        np.testing.assert_array_equal(eta_at(s, j)[0], path[m - j])
    np.testing.assert_array_equal(eta_at(s, m + 5)[0], hist.coeffs)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 300), st.floats(-2, 2), st.sampled_from(["zero", "constant"]))
def test_recursive_matches_direct(steps, scale, kind):
    basis = build_basis(6, 1.0)
    rng = np.random.default_rng(steps)
    hist = InitialHistory.zero() if kind == "zero" else InitialHistory.constant(scale * rng.normal(size=6))
    u0 = rng.normal(size=6)
    a = init_state(u0, hist, K, basis, 0.1, tail_tol=1e-6, method="direct")
    b = init_state(u0, hist, K, basis, 0.1, tail_tol=1e-6, method="recursive")
    for _ in range(steps):
        v = rng.normal(size=6)
        push_history(a, v)
        push_history(b, v)
    # the recursion keeps lags beyond the horizon, the ring drops them
    tail = float(K.rho(a.trace.horizon))
    scale_u = 1 + np.max(np.abs(u0))
    np.testing.assert_allclose(memory_convolution(a), memory_convolution(b), atol=20 * tail * scale_u)
    for r in (0, 1):
        na, nb = memory_norm_sq(a, r)[0], memory_norm_sq(b, r)[0]
        assert abs(na - nb) <= 1e-12 * max(nb, 1) + 20 * tail * sobolev_norm_sq(scale_u * np.ones(6), r + 1, basis)


def test_markov_embedding_oracle():
    # m' = kappa u - delta m on a smooth path; trapezoid error is O(dt^2)
    basis = build_basis(1, 1.0)
    dt = 1e-3
    u = lambda t: np.cos(3 * t) + 0.5
    hist = InitialHistory.constant([1.5])
    s = init_state([u(0.0)], hist, K, basis, dt, method="direct")
    for i in range(1, 2001):
        push_history(s, [u(i * dt)])
    sol = solve_ivp(lambda t, m: 0.5 * u(t) - m, (0, 2.0), [0.5 * 1.5], rtol=1e-12, atol=1e-14)
    assert memory_convolution(s)[0, 0] == pytest.approx(sol.y[0, -1], rel=1e-6)


def test_sampled_history_refinement_oracle():
    basis = build_basis(3, 1.0)
    grid = np.linspace(0, 40, 4001)
    samples = np.stack([np.exp(-0.3 * grid) * np.cos(grid), np.sin(0.5 * grid) / (1 + grid),
                        np.full(grid.size, 0.2)], axis=1)
    hist = InitialHistory.sampled(grid, samples)
    coarse = init_state(samples[0], hist, K, basis, 1e-2, method="direct")
    fine = init_state(samples[0], hist, K, basis, 1e-3, method="direct")
    for _ in range(50):
        push_history(coarse, samples[0])
    for _ in range(500):
        push_history(fine, samples[0])
    np.testing.assert_allclose(memory_convolution(coarse), memory_convolution(fine), rtol=1e-4)
    for r in (0, 1):
        assert memory_norm_sq(coarse, r)[0] == pytest.approx(memory_norm_sq(fine, r)[0], rel=1e-4)


def test_tabulated_kernel_uses_direct_path():
    g = np.linspace(0, 30, 3001)
    k = tabulated_kernel(g, 0.5 * np.exp(-g), 0.99)
    s = init_state(unit(1, 4), InitialHistory.constant(unit(1, 4)), k, build_basis(4, 1.0), 1e-2)
    assert s.trace.method == "direct"
    assert memory_norm_sq(s)[0] == pytest.approx(0.5 * PI2, rel=1e-5)


def test_transport_balance_residual_shrinks():
    # d/dt ||eta||^2 = rho(0)||u||_{H1}^2 + int rho' ||eta||_{H1}^2 for a smooth path
    basis = build_basis(2, 1.0)
    residuals = []
    for dt in (2e-2, 1e-2, 5e-3):
        path = lambda t: np.array([np.sin(t) + 1.0, 0.3 * np.cos(2 * t)])
        s = init_state(path(0.0), InitialHistory.constant(path(0.0)), K, basis, dt, tail_tol=1e-8,
                       method="direct")
        steps = int(round(1.0 / dt))
        for i in range(1, steps + 1):
            push_history(s, path(i * dt))
        before = memory_norm_sq(s)[0]
        push_history(s, path((steps + 1) * dt))
        after = memory_norm_sq(s)[0]
        tr = s.trace
        w = tr._slot_weights(lambda x: -K.K(x))
        drift = K.rho(0.0) * sobolev_norm_sq(s.u[0], 1, basis) + float(w @ tr.ring_energy[0, :, 0])
        # the constant initial history contributes -rho(t) ||eta0||_{H1}^2
        drift -= float(K.rho(tr.t)) * sobolev_norm_sq(path(0.0), 1, basis)
        residuals.append(abs((after - before) / dt - drift))
    assert residuals[1] < 0.7 * residuals[0] and residuals[2] < 0.7 * residuals[1]


def test_kernel_embedding_bound():
    basis = build_basis(4, 1.0)
    rng = np.random.default_rng(5)
    s = init_state(rng.normal(size=4), InitialHistory.zero(), K, basis, 1e-2, tail_tol=1e-8, method="direct")
    for _ in range(500):
        push_history(s, rng.normal(size=4))
    tr = s.trace
    for r in (0, 1):
        lhs = float(tr._slot_weights(K.K) @ tr.ring_energy[r, :, 0])
        assert lhs <= 1.0 * memory_norm_sq(s, r)[0] * (1 + 1e-12)
