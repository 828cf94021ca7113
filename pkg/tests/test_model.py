import math

import numpy as np
import pytest

from dhinf.errors import ConfigError, UnsupportedModelError
from dhinf.model import (
    AllenCahnConfig,
    ControlSystem,
    build_allen_cahn,
    contact_hamiltonian,
    contact_rhs,
    contact_rhs_batch,
    coupling_matrix,
    dirichlet_laplacian,
    rescale_system,
    saddle_inputs,
    scalar_benchmark,
)

from conftest import central_difference


class TestAllenCahn:
    def test_laplacian_n4(self):
        # h = 1/2: off-diagonal 1/h^2 = 4, diagonal -8
        A = dirichlet_laplacian(4)
        expected = np.array([[-8.0, 4.0, 0.0], [4.0, -8.0, 4.0], [0.0, 4.0, -8.0]])
        np.testing.assert_allclose(A, expected)

    def test_equilibrium_at_origin(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=7, sigma=0.3, gamma=2.0))
        assert np.linalg.norm(sys_.drift(np.zeros(sys_.n))) <= 1e-12

    def test_n31_costs(self):
        cfg = AllenCahnConfig(N=31, sigma=0.1, gamma=1.2)
        assert cfg.n == 30
        assert cfg.h == pytest.approx(2.0 / 31)
        sys_ = build_allen_cahn(cfg)
        for M in (sys_.Q, sys_.W, sys_.G):
            np.testing.assert_allclose(M, (2.0 / 31) * np.eye(30))

    def test_invalid_grid(self):
        with pytest.raises(ConfigError):
            AllenCahnConfig(N=2)

    def test_drift_jacobian_matches_finite_differences(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=9, sigma=0.2, gamma=1.5))
        rng = np.random.default_rng(3)
        x = rng.uniform(-0.7, 0.7, size=sys_.n)
        J = sys_.drift_jacobian(x)
        J_fd = central_difference(sys_.drift, x)
        np.testing.assert_allclose(J, J_fd, rtol=1e-6, atol=1e-8)

    def test_batched_callbacks_match_pointwise(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=8, sigma=0.15, gamma=1.3))
        rng = np.random.default_rng(11)
        X = rng.uniform(-0.5, 0.5, size=(6, sys_.n))
        P = rng.standard_normal((6, sys_.n))
        F = sys_.drift_batch(X)
        JTp = sys_.jacT_costate_batch(X, P)
        for i in range(6):
            np.testing.assert_allclose(F[i], sys_.drift(X[i]), atol=1e-14)
            np.testing.assert_allclose(JTp[i], sys_.drift_jacobian(X[i]).T @ P[i],
                                       atol=1e-13)


class TestSaddleInputs:
    def test_scalar_control(self):
        sys_ = scalar_benchmark()
        u, d = saddle_inputs(sys_, np.array([0.3]), np.array([0.5]))
        assert u[0] == pytest.approx(-0.25)
        assert d[0] == 0.0  # infinite gamma kills the disturbance channel

    def test_zero_costate(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=6, sigma=0.1, gamma=1.5))
        u, d = saddle_inputs(sys_, np.full(sys_.n, 0.2), np.zeros(sys_.n))
        assert np.all(u == 0) and np.all(d == 0)

    def test_scalar_disturbance_finite_gamma(self):
        sys_ = scalar_benchmark(gamma=2.0)
        _, d = saddle_inputs(sys_, np.array([0.0]), np.array([1.0]))
        assert d[0] == pytest.approx(1.0 / 8.0)

    def test_control_is_the_minimizer(self):
        # u -> u^T W u + p^T g u is strictly convex with minimizer u*
        sys_ = build_allen_cahn(AllenCahnConfig(N=7, sigma=0.1, gamma=1.4))
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.4, 0.4, size=sys_.n)
        p = rng.standard_normal(sys_.n)
        g = sys_.input_map(x)

        def objective(u):
            return u @ sys_.W @ u + p @ g @ u

        u_star, _ = saddle_inputs(sys_, x, p)
        base = objective(u_star)
        for _ in range(20):
            delta = 1e-3 * rng.standard_normal(sys_.m)
            assert objective(u_star + delta) > base


class TestContactHamiltonian:
    def test_equilibrium(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=6, sigma=0.1, gamma=1.2))
        assert contact_hamiltonian(sys_, np.zeros(sys_.n), 0.0, np.zeros(sys_.n)) == 0.0

    def test_scalar_riccati_root_is_on_the_zero_level(self):
        sys_ = scalar_benchmark()
        p_star = -2.0 + 2.0 * math.sqrt(2.0)
        val = contact_hamiltonian(sys_, np.array([1.0]), 123.0, np.array([p_star]))
        assert abs(val) < 1e-12  # alpha = 0, so V is irrelevant

    def test_scalar_off_manifold(self):
        sys_ = scalar_benchmark()
        assert contact_hamiltonian(sys_, np.array([1.0]), 0.0, np.array([0.0])) == \
            pytest.approx(1.0)

    def test_matches_game_hamiltonian_at_saddle(self):
        # substitute (u*, d*) into the game Hamiltonian
        #   x Q x + u W u - gamma^2 d G d - alpha V + p^T (f + g u + k d)
        sys_ = build_allen_cahn(
            AllenCahnConfig(N=8, sigma=0.2, gamma=1.7)).with_alpha(0.3)
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = rng.uniform(-0.5, 0.5, size=sys_.n)
            p = rng.standard_normal(sys_.n)
            V = rng.standard_normal()
            u, d = saddle_inputs(sys_, x, p)
            g = sys_.input_map(x)
            k = sys_.disturbance_map(x)
            game = (x @ sys_.Q @ x + u @ sys_.W @ u
                    - sys_.gamma**2 * (d @ sys_.G @ d) - sys_.alpha * V
                    + p @ (sys_.drift(x) + g @ u + k @ d))
            assert game == pytest.approx(contact_hamiltonian(sys_, x, V, p), abs=1e-12)


class TestContactRhs:
    def test_equilibrium_fixed_point(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=6, sigma=0.1, gamma=1.2))
        xd, pd, vd = contact_rhs(sys_, np.zeros(sys_.n), np.zeros(sys_.n), 5.0)
        assert np.all(xd == 0) and np.all(pd == 0) and vd == 0.0

    def test_linear_scalar_values(self):
        sys_ = scalar_benchmark()
        xd, pd, vd = contact_rhs(sys_, np.array([1.0]), np.array([0.0]))
        assert xd[0] == pytest.approx(-1.0)
        assert pd[0] == pytest.approx(-2.0)
        assert vd == 0.0

    def test_allen_cahn_value_rate_identity(self):
        # dV/dt = f(X)^T P + (1/2h)(gamma^-2 - 1) P^T P for the benchmark
        cfg = AllenCahnConfig(N=9, sigma=0.1, gamma=1.2)
        sys_ = build_allen_cahn(cfg).with_alpha(0.25)
        rng = np.random.default_rng(9)
        for _ in range(5):
            x = rng.uniform(-0.6, 0.6, size=sys_.n)
            p = rng.standard_normal(sys_.n)
            _, _, vd = contact_rhs(sys_, x, p)
            expected = sys_.drift(x) @ p + (sys_.inv_gamma_sq - 1.0) / (2 * cfg.h) * (p @ p)
            assert vd == pytest.approx(expected, rel=1e-12)

    def test_batch_matches_pointwise(self):
        sys_ = build_allen_cahn(AllenCahnConfig(N=7, sigma=0.2, gamma=1.5)).with_alpha(0.2)
        rng = np.random.default_rng(13)
        X = rng.uniform(-0.5, 0.5, size=(5, sys_.n))
        P = rng.standard_normal((5, sys_.n))
        Xd, Pd = contact_rhs_batch(sys_, X, P)
        for i in range(5):
            xd, pd, _ = contact_rhs(sys_, X[i], P[i])
            np.testing.assert_allclose(Xd[i], xd, atol=1e-13)
            np.testing.assert_allclose(Pd[i], pd, atol=1e-13)

    def test_state_dependent_inputs_need_gradient_callback(self):
        one = np.eye(1)
        sys_ = ControlSystem(
            n=1, m=1, l=1,
            drift=lambda x: -x,
            drift_jacobian=lambda x: -one,
            input_map=lambda x: (1.0 + x[0]**2) * one,
            disturbance_map=lambda x: one,
            Q=one, W=one.copy(), G=one.copy(),
            gamma=math.inf, alpha=0.0, domain_radius=1.0,
            constant_inputs=False)
        with pytest.raises(UnsupportedModelError):
            contact_rhs(sys_, np.array([0.5]), np.array([1.0]))


class TestGammaLimit:
    def test_infinite_gamma_coupling_has_no_disturbance_term(self):
        cfg = AllenCahnConfig(N=6, sigma=0.1, gamma=math.inf)
        sys_ = build_allen_cahn(cfg)
        M = coupling_matrix(sys_, np.zeros(sys_.n))
        np.testing.assert_allclose(M, -0.25 / cfg.h * np.eye(sys_.n))

    def test_invariants_rejected(self):
        one = np.eye(1)
        with pytest.raises(ConfigError):
            ControlSystem(n=1, m=1, l=1,
                          drift=lambda x: x + 1.0,  # f(0) != 0
                          drift_jacobian=lambda x: one,
                          input_map=lambda x: one,
                          disturbance_map=lambda x: one,
                          Q=one, W=one.copy(), G=one.copy(),
                          gamma=1.0, alpha=0.0, domain_radius=1.0)
        with pytest.raises(ConfigError):
            ControlSystem(n=1, m=1, l=1,
                          drift=lambda x: -x,
                          drift_jacobian=lambda x: -one,
                          input_map=lambda x: one,
                          disturbance_map=lambda x: one,
                          Q=-one, W=one.copy(), G=one.copy(),  # Q not PD
                          gamma=1.0, alpha=0.0, domain_radius=1.0)


class TestRescale:
    def test_scalar_rescale_preserves_hamiltonian(self):
        sys_ = scalar_benchmark(alpha=0.5)
        scaled = rescale_system(sys_, np.array([2.0]))
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.uniform(-0.5, 0.5, size=1)
            p = rng.standard_normal(1)
            V = rng.standard_normal()
            # y = x / 2 with costate transforming contravariantly: q = 2 p
            h_orig = contact_hamiltonian(sys_, x, V, p)
            h_scaled = contact_hamiltonian(scaled, x / 2.0, V, 2.0 * p)
            assert h_scaled == pytest.approx(h_orig, rel=1e-12, abs=1e-12)
