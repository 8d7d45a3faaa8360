"""Time stepping oracles: decay rates, Duhamel composition, discrete duality."""

from __future__ import annotations

import numpy as np
import pytest

from parasource import fem
from parasource.forward import (
    BlockStepper,
    CouplingMatrix,
    FieldSeries,
    SigmaProfile,
    TimeGrid,
    duhamel_compose,
    solve_backward,
    solve_duhamel_kernel,
    solve_forward,
)
from parasource.meshing import build_interval_mesh


# ===================================================================
# TimeGrid / SigmaProfile
# ===================================================================

class TestTimeGrid:
    def test_basics(self):
        grid = TimeGrid(T=0.5, n_steps=50)
        assert grid.dt == pytest.approx(0.01)
        t = grid.times()
        assert t.shape == (51,)
        assert t[0] == 0.0 and t[-1] == pytest.approx(0.5)

    def test_index_of(self):
        grid = TimeGrid(T=0.5, n_steps=50)
        assert grid.index_of(0.25) == 25
        with pytest.raises(ValueError):
            grid.index_of(0.255)
        with pytest.raises(ValueError):
            grid.index_of(0.7)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            TimeGrid(T=-1.0, n_steps=10)
        with pytest.raises(ValueError):
            TimeGrid(T=1.0, n_steps=0)


class TestSigmaProfile:
    def test_constant(self):
        grid = TimeGrid(1.0, 10)
        sig = SigmaProfile.constant(2.0, grid)
        assert sig.sigma0 == 2.0 and sig.sigmaT == 2.0
        np.testing.assert_array_equal(sig.derivative_samples, 0.0)

    def test_cosine_plateau_values(self):
        grid = TimeGrid(0.5, 500)
        sig = SigmaProfile.cosine_plateau(grid)  # t0 = 0.05
        assert sig.sigma0 == pytest.approx(1.5)
        assert sig.sigmaT == pytest.approx(1.5)
        # plateau region: everything past T - t0 = 0.45 is the constant 3/2
        t = grid.times()
        np.testing.assert_allclose(sig.samples[t >= 0.45], 1.5)
        np.testing.assert_allclose(sig.derivative_samples[t >= 0.45], 0.0)

    def test_cosine_plateau_is_c1_at_junction(self):
        grid = TimeGrid(0.5, 100000)
        sig = SigmaProfile.cosine_plateau(grid)
        j = grid.index_of(0.45)
        # one sample before the junction: value -> 3/2, slope -> 0
        assert sig.samples[j - 1] == pytest.approx(1.5, abs=1e-7)
        assert sig.derivative_samples[j - 1] == pytest.approx(0.0, abs=1e-2)

    def test_cosine_plateau_range(self):
        grid = TimeGrid(0.5, 200)
        sig = SigmaProfile.cosine_plateau(grid)
        assert sig.samples.min() >= 0.5 - 1e-12
        assert sig.samples.max() <= 1.5 + 1e-12

    def test_from_callable_with_derivative(self):
        grid = TimeGrid(1.0, 20)
        sig = SigmaProfile.from_callable(np.exp, grid, dfn=np.exp)
        np.testing.assert_allclose(sig.samples, sig.derivative_samples)

    def test_from_callable_fd_fallback(self):
        grid = TimeGrid(1.0, 2000)
        sig = SigmaProfile.from_callable(lambda t: t * t, grid)
        t = grid.times()
        np.testing.assert_allclose(sig.derivative_samples[1:-1], 2 * t[1:-1], atol=1e-8)

    def test_rejects_vanishing_final_value(self):
        grid = TimeGrid(1.0, 10)
        with pytest.raises(ValueError):
            SigmaProfile(np.linspace(1, 0, 11), np.zeros(11), grid)

    def test_rejects_shape_mismatch(self):
        grid = TimeGrid(1.0, 10)
        with pytest.raises(ValueError):
            SigmaProfile(np.ones(5), np.zeros(5), grid)


class TestCouplingMatrix:
    def test_constant_roundtrip(self):
        Q = CouplingMatrix.constant([[1.0, 4.0], [0.0, 1.0]])
        np.testing.assert_array_equal(Q.constant_array(), [[1, 4], [0, 1]])
        np.testing.assert_array_equal(Q.transpose().constant_array(), [[1, 0], [4, 1]])

    def test_lower_2x2_variable(self):
        q = np.linspace(0, 1, 11)
        Q = CouplingMatrix.lower_2x2(q)
        assert not Q.is_constant
        assert Q.entry_is_zero(0, 0) and Q.entry_is_zero(0, 1) and Q.entry_is_zero(1, 1)
        Qt = Q.transpose()
        assert Qt.entry_is_zero(1, 0)
        np.testing.assert_array_equal(Qt.entries[0][1], q)
        with pytest.raises(ValueError):
            Q.constant_array()

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            CouplingMatrix([[0.0, 1.0]])


# ===================================================================
# Field series shape contracts
# ===================================================================

class TestFieldSeries:
    def test_shape_validation(self, unit_interval_100):
        grid = TimeGrid(1.0, 5)
        with pytest.raises(ValueError):
            FieldSeries(np.zeros((5, 1, 101)), unit_interval_100, grid)

    def test_backward_differences(self, unit_interval_100):
        grid = TimeGrid(1.0, 4)
        t = grid.times()
        data = np.zeros((5, 1, 101))
        data[:, 0, :] = t[:, None]  # linear in time
        series = FieldSeries(data, unit_interval_100, grid)
        d = series.backward_differences()
        assert d.shape == (4, 1, 101)
        np.testing.assert_allclose(d, 1.0)


# ===================================================================
# Stepping oracles
# ===================================================================

def _phi(mesh, k):
    x = mesh.coords()[:, 0]
    return np.sqrt(2.0 / np.pi) * np.sin(k * x)


class TestKernelDecay:
    def test_scalar_mode_decay(self):
        # dW/dt = -W in mode 1 on (0, pi) with nu=1: W(T) ~ exp(-T) * phi_1
        mesh = build_interval_mesh(0.0, np.pi, 200)
        grid = TimeGrid(0.5, 200)
        Q = CouplingMatrix.zero(1)
        F = _phi(mesh, 1)[None, :]
        W = solve_duhamel_kernel(mesh, Q, nu=1.0, F=F, sigma0=1.0, grid=grid)
        M = fem.assemble_mass(mesh)
        coef = fem.mass_inner(M, W.data[-1, 0], _phi(mesh, 1))
        assert coef == pytest.approx(np.exp(-0.5), rel=5e-3)

    def test_sigma0_scales_datum(self):
        mesh = build_interval_mesh(0.0, np.pi, 40)
        grid = TimeGrid(0.1, 10)
        Q = CouplingMatrix.zero(1)
        F = _phi(mesh, 1)[None, :]
        W1 = solve_duhamel_kernel(mesh, Q, 1.0, F, sigma0=1.0, grid=grid)
        W2 = solve_duhamel_kernel(mesh, Q, 1.0, F, sigma0=1.5, grid=grid)
        np.testing.assert_allclose(W2.data, 1.5 * W1.data, atol=1e-13)
        np.testing.assert_allclose(W2.data[0, 0], 1.5 * F[0], atol=1e-14)

    def test_nilpotent_coupling_oracle(self):
        # Q = [[0,0],[c,0]]: mode ODE gives w2(t) = -c t exp(-t) for lam=1
        c = 5.0
        mesh = build_interval_mesh(0.0, np.pi, 200)
        grid = TimeGrid(0.5, 400)
        Q = CouplingMatrix.constant([[0.0, 0.0], [c, 0.0]])
        F = np.vstack([_phi(mesh, 1), np.zeros(mesh.node_count)])
        W = solve_duhamel_kernel(mesh, Q, nu=1.0, F=F, sigma0=1.0, grid=grid)
        M = fem.assemble_mass(mesh)
        w2 = fem.mass_inner(M, W.data[-1, 1], _phi(mesh, 1))
        assert w2 == pytest.approx(-c * 0.5 * np.exp(-0.5), rel=1e-2)

    def test_dirichlet_nodes_pinned(self):
        mesh = build_interval_mesh(0.0, 1.0, 30)
        grid = TimeGrid(0.2, 20)
        Q = CouplingMatrix.constant([[0.0, 0.0], [2.0, 0.0]])
        F = np.vstack([np.sin(np.pi * mesh.coords()[:, 0]), np.zeros(31)])
        W = solve_duhamel_kernel(mesh, Q, 0.1, F, 1.0, grid)
        np.testing.assert_array_equal(W.data[:, :, mesh.boundary_nodes], 0.0)


class TestForwardSolve:
    def test_zero_initial_state(self, unit_interval_100):
        grid = TimeGrid(0.5, 10)
        sig = SigmaProfile.constant(1.0, grid)
        Q = CouplingMatrix.zero(1)
        F = np.ones((1, 101))
        Y = solve_forward(unit_interval_100, Q, 0.1, sig, F, grid)
        np.testing.assert_array_equal(Y.data[0], 0.0)

    def test_sigma_sampled_at_new_time_level(self):
        # one step: Y^1 = (M + dt K)^{-1} dt sigma(t_1) M F
        mesh = build_interval_mesh(0.0, 1.0, 20)
        grid = TimeGrid(0.1, 1)
        samples = np.array([7.0, 3.0])  # sigma(0)=7 must NOT enter
        sig = SigmaProfile(samples, np.zeros(2), grid)
        Q = CouplingMatrix.zero(1)
        F = np.sin(np.pi * mesh.coords()[:, 0])[None, :]
        Y = solve_forward(mesh, Q, 1.0, sig, F, grid)

        free = mesh.interior_nodes
        M = fem.restrict_matrix(fem.assemble_mass(mesh), free)
        S = fem.restrict_matrix(fem.assemble_stiffness(mesh, 1.0), free)
        A = (M + grid.dt * S).toarray()
        expected = np.linalg.solve(A, grid.dt * 3.0 * (M @ F[0][free]))
        np.testing.assert_allclose(Y.data[1, 0, free], expected, atol=1e-13)

    def test_linearity_in_source(self):
        mesh = build_interval_mesh(0.0, 1.0, 50)
        grid = TimeGrid(0.3, 15)
        sig = SigmaProfile.cosine_plateau(grid, t0=0.03)
        Q = CouplingMatrix.constant([[0.0, 1.0], [2.0, 0.0]])
        x = mesh.coords()[:, 0]
        F = np.vstack([np.sin(2 * np.pi * x), -np.sin(np.pi * x)])
        Y1 = solve_forward(mesh, Q, 0.1, sig, F, grid)
        Y2 = solve_forward(mesh, Q, 0.1, sig, -2.0 * F, grid)
        np.testing.assert_allclose(Y2.data, -2.0 * Y1.data, atol=1e-12)

    def test_rejects_bad_source_shape(self, unit_interval_100):
        grid = TimeGrid(0.5, 5)
        sig = SigmaProfile.constant(1.0, grid)
        with pytest.raises(ValueError):
            solve_forward(unit_interval_100, CouplingMatrix.zero(2), 0.1, sig, np.ones((1, 101)), grid)


# ===================================================================
# Duhamel composition
# ===================================================================

class TestDuhamel:
    def test_static_kernel_integrates_sigma(self, unit_interval_100):
        # W(t) = G frozen in time, sigma = 1: Y(t_m) = t_m * G exactly
        grid = TimeGrid(1.0, 8)
        G = np.sin(np.pi * unit_interval_100.coords()[:, 0])
        data = np.broadcast_to(G, (9, 1, 101)).copy()
        W = FieldSeries(data, unit_interval_100, grid)
        sig = SigmaProfile.constant(1.0, grid)
        Y = duhamel_compose(W, sig)
        for m in range(9):
            np.testing.assert_allclose(Y.data[m, 0], grid.times()[m] * G, atol=1e-14)

    def test_matches_direct_forward_solve(self):
        mesh = build_interval_mesh(0.0, 1.0, 100)
        grid = TimeGrid(0.5, 50)
        x = mesh.coords()[:, 0]
        q = -(x**3) + 4 * x**2 - 3 * x + 1
        Q = CouplingMatrix.lower_2x2(q)
        sig = SigmaProfile.cosine_plateau(grid)
        F = np.vstack([np.sin(2 * np.pi * x), -np.sin(2 * np.pi * x)])

        Y_direct = solve_forward(mesh, Q, 0.1, sig, F, grid)
        W = solve_duhamel_kernel(mesh, Q, 0.1, F, sigma0=1.0, grid=grid)
        Y_comp = duhamel_compose(W, sig)

        num = np.sqrt(((Y_comp.data - Y_direct.data) ** 2).sum())
        den = np.sqrt((Y_direct.data**2).sum())
        h, dt = 0.01, 0.01
        assert num / den <= 5.0 * (dt + h**2)

    def test_grid_mismatch_raises(self, unit_interval_100):
        W = FieldSeries(np.zeros((9, 1, 101)), unit_interval_100, TimeGrid(1.0, 8))
        sig = SigmaProfile.constant(1.0, TimeGrid(1.0, 4))
        with pytest.raises(ValueError):
            duhamel_compose(W, sig)


# ===================================================================
# Backward solve and the exact discrete duality
# ===================================================================

class TestBackward:
    def test_terminal_datum_and_zero_fill(self):
        mesh = build_interval_mesh(0.0, 1.0, 40)
        grid = TimeGrid(0.5, 20)
        Qt = CouplingMatrix.constant([[0.0, 3.0], [0.0, 0.0]])
        term = np.vstack([np.sin(np.pi * mesh.coords()[:, 0]), np.zeros(41)])
        Psi = solve_backward(mesh, Qt, 0.1, None, term, grid, tau=0.25)
        j = grid.index_of(0.25)
        np.testing.assert_allclose(Psi.data[j], term, atol=1e-15)
        np.testing.assert_array_equal(Psi.data[j + 1 :], 0.0)
        assert np.abs(Psi.data[0]).max() > 0  # it actually marched

    def test_discrete_duality_homogeneous(self, rng):
        # (W^0, Psi(0))_M == (W^N, Psi^N)_M exactly for the transposed stepper
        mesh = build_interval_mesh(0.0, 1.0, 60)
        grid = TimeGrid(0.4, 25)
        Q = CouplingMatrix.constant([[0.5, -1.2], [2.0, 0.3]])
        F = rng.standard_normal((2, 61))
        F[:, mesh.boundary_nodes] = 0.0
        W = solve_duhamel_kernel(mesh, Q, 0.1, F, 1.0, grid)

        term = rng.standard_normal((2, 61))
        term[:, mesh.boundary_nodes] = 0.0
        Psi = solve_backward(mesh, Q.transpose(), 0.1, None, term, grid)

        M = fem.assemble_mass(mesh)
        pair = lambda a, b: sum(fem.mass_inner(M, a[i], b[i]) for i in range(2))
        lhs = pair(W.data[0], Psi.data[0])
        rhs = pair(W.data[-1], Psi.data[-1])
        assert lhs == pytest.approx(rhs, rel=1e-11)

    def test_discrete_duality_with_rhs(self, rng):
        # (W^0,Psi(0)) - (W^N,Psi^tau) = dt * sum_m (W^m, r^{m-1})_M exactly
        mesh = build_interval_mesh(0.0, 1.0, 50)
        grid = TimeGrid(0.3, 18)
        x = mesh.coords()[:, 0]
        Q = CouplingMatrix.lower_2x2(4 * x - 2)
        F = rng.standard_normal((2, 51))
        F[:, mesh.boundary_nodes] = 0.0
        W = solve_duhamel_kernel(mesh, Q, 0.1, F, 1.0, grid)

        rdata = rng.standard_normal((19, 2, 51))
        rdata[:, :, mesh.boundary_nodes] = 0.0
        r = FieldSeries(rdata, mesh, grid)
        term = rng.standard_normal((2, 51))
        term[:, mesh.boundary_nodes] = 0.0
        Psi = solve_backward(mesh, Q.transpose(), 0.1, r, term, grid)

        M = fem.assemble_mass(mesh)
        pair = lambda a, b: sum(fem.mass_inner(M, a[i], b[i]) for i in range(2))
        lhs = pair(W.data[0], Psi.data[0]) - pair(W.data[-1], Psi.data[-1])
        rhs = grid.dt * sum(pair(W.data[m], r.data[m - 1]) for m in range(1, 19))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

    def test_stepper_reuse_matches_fresh(self):
        mesh = build_interval_mesh(0.0, 1.0, 30)
        grid = TimeGrid(0.2, 10)
        Q = CouplingMatrix.constant([[0.0, 0.0], [5.0, 0.0]])
        stepper = BlockStepper(mesh, Q, 0.1, grid)
        sig = SigmaProfile.constant(1.0, grid)
        F = np.vstack([np.sin(np.pi * mesh.coords()[:, 0]), np.zeros(31)])
        Y1 = solve_forward(mesh, Q, 0.1, sig, F, grid, stepper=stepper)
        Y2 = solve_forward(mesh, Q, 0.1, sig, F, grid)
        np.testing.assert_array_equal(Y1.data, Y2.data)
