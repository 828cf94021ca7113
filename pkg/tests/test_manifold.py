import math

import numpy as np
import pytest
import scipy.linalg

from dhinf.errors import GenerationError, SpectrumError, ValueRecoveryError
from dhinf.kernels import cumulative_quadratic
from dhinf.linear_analysis import build_decoupling, hamiltonian_matrix, linearize, solve_gare
from dhinf.manifold import (
    GenerationSettings,
    extend_backward,
    generate_dataset,
    generate_trajectory,
    load_dataset_jsonl,
    pick_horizon,
    recover_value,
    save_dataset_jsonl,
    solve_local_bvp,
    trajectory_to_csv,
)
from dhinf.model import scalar_benchmark

from conftest import build_pipeline, desk_settings


class TestPickHorizon:
    def test_case1_rule(self):
        T = pick_horizon(0.277, 1e-5)
        assert T == pytest.approx(41.6, abs=1.0)

    def test_case2_rule(self):
        assert pick_horizon(0.500, 1e-5) == pytest.approx(23.3, abs=0.5)

    def test_exact_logarithm(self):
        assert pick_horizon(1.0, math.exp(-10.0)) == pytest.approx(10.0)

    def test_rejects_bad_margin(self):
        with pytest.raises(SpectrumError):
            pick_horizon(0.0, 1e-5)
        with pytest.raises(ValueError):
            pick_horizon(1.0, 2.0)


class TestKernelQuadrature:
    def test_cumulative_matches_closed_form(self):
        t = np.linspace(0.0, 2.0, 401)
        f = np.sin(3.0 * t)
        exact = (1.0 - np.cos(3.0 * t)) / 3.0
        approx = cumulative_quadratic(f, t[1] - t[0])
        assert np.abs(approx - exact).max() < 1e-7

    def test_third_order_convergence(self):
        errs = []
        for npts in (101, 201, 401):
            t = np.linspace(0.0, 1.0, npts)
            f = np.exp(t) * np.cos(5.0 * t)
            exact = (np.exp(t) * (np.cos(5 * t) + 5 * np.sin(5 * t)) - 1.0) / 26.0
            errs.append(np.abs(cumulative_quadratic(f, t[1] - t[0]) - exact).max())
        assert errs[0] / errs[1] > 6.0 and errs[1] / errs[2] > 6.0


class TestLinearBvp:
    def test_one_iteration_and_graph_property(self, scalar_pipeline):
        sys_, lin, cert, dtrans = scalar_pipeline
        t, x, p, iterations, converged = solve_local_bvp(
            sys_, dtrans, np.array([0.7]), T_inf=10.0,
            settings=GenerationSettings(grid_dt=0.01))
        assert converged and iterations == 1
        gap = np.abs(p - x @ cert.P.T).max()
        assert gap <= 1e-9

    def test_zero_initial_condition(self, scalar_pipeline):
        sys_, lin, cert, dtrans = scalar_pipeline
        t, x, p, iterations, converged = solve_local_bvp(
            sys_, dtrans, np.zeros(1), T_inf=5.0)
        assert converged
        assert np.abs(x).max() == 0.0 and np.abs(p).max() == 0.0

    def test_matches_matrix_exponential_flow(self, scalar_pipeline):
        sys_, lin, cert, dtrans = scalar_pipeline
        t, x, p, _, _ = solve_local_bvp(sys_, dtrans, np.array([0.4]), T_inf=8.0,
                                        settings=GenerationSettings(grid_dt=0.02))
        B = dtrans.B
        for i in (0, 100, 250, 400):
            expected = scipy.linalg.expm(B * t[i]) @ np.array([0.4])
            assert np.abs(x[i] - expected).max() < 1e-12


class TestBackwardExtension:
    def test_empty_for_zero_t_minus(self, scalar_pipeline):
        sys_, _, _, _ = scalar_pipeline
        t, x, p = extend_backward(sys_, np.array([0.5]),
                                  np.array([0.4]), 0.0)
        assert t.size == 0 and x.shape == (0, 1)

    def test_linear_backward_flow_matches_exponential(self, scalar_pipeline):
        sys_, lin, cert, dtrans = scalar_pipeline
        x0 = np.array([0.3])
        p0 = cert.P @ x0
        t, x, p = extend_backward(sys_, x0, p0, -0.5,
                                  settings=GenerationSettings(n_backward=20))
        Hc = hamiltonian_matrix(lin, 0.0)
        for i in range(t.size):
            z = scipy.linalg.expm(Hc * t[i]) @ np.concatenate([x0, p0])
            assert np.abs(np.concatenate([x[i], p[i]]) - z).max() < 1e-8


class TestValueRecovery:
    def test_equilibrium_trajectory(self, scalar_pipeline_discounted):
        sys_, lin, cert, dtrans = scalar_pipeline_discounted
        t = np.linspace(0.0, 1.0, 50)
        zeros = np.zeros((50, 1))
        for method in ("ode", "algebraic"):
            V = recover_value(sys_, t, zeros, zeros, cert.P, method=method)
            np.testing.assert_allclose(V, 0.0, atol=1e-15)

    def test_linear_methods_agree_with_quadratic_value(self, scalar_pipeline_discounted):
        sys_, lin, cert, dtrans = scalar_pipeline_discounted
        t, x, p, _, converged = solve_local_bvp(
            sys_, dtrans, np.array([0.6]), T_inf=8.0,
            settings=GenerationSettings(grid_dt=0.004))
        assert converged
        quad = 0.5 * np.einsum("ij,ij->i", x @ cert.P.T, x)
        v_ode = recover_value(sys_, t, x, p, cert.P, method="ode")
        v_alg = recover_value(sys_, t, x, p, cert.P, method="algebraic")
        scale = np.abs(quad).max()
        assert np.abs(v_ode - quad).max() <= 1e-6 * scale
        assert np.abs(v_alg - quad).max() <= 1e-6 * scale

    def test_algebraic_needs_discount(self, scalar_pipeline):
        sys_, lin, cert, dtrans = scalar_pipeline
        t = np.linspace(0.0, 1.0, 10)
        z = np.zeros((10, 1))
        with pytest.raises(ValueRecoveryError):
            recover_value(sys_, t, z, z, cert.P, method="algebraic")


@pytest.fixture(scope="module")
def small_case():
    import dhinf.model as model
    from dhinf.linear_analysis import alpha_bar
    cfg = model.AllenCahnConfig(N=7, sigma=0.1, gamma=1.2)
    sys_ = model.build_allen_cahn(cfg)
    ab = alpha_bar(linearize(sys_))
    return build_pipeline(sys_.with_alpha(0.5 * ab))


class TestTrajectoryGeneration:
    def test_accepted_trajectory_invariants(self, small_case):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        settings = desk_settings(T_inf)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(sys_.n)
        x0 *= 0.8 / np.linalg.norm(x0)
        traj = generate_trajectory(sys_, dtrans, x0, T_inf, settings)
        assert traj.converged
        assert traj.h_residual_max <= 1e-5
        assert traj.value_discrepancy <= 1e-5 * (1.0 + np.abs(traj.V).max())
        # exponential tail
        head = np.linalg.norm(traj.x[traj.t == 0.0][0])
        tail = np.linalg.norm(traj.x[-1])
        assert tail <= 1e-3 * head
        # strictly increasing time stamps spanning [t_minus, T_inf]
        assert np.all(np.diff(traj.t) > 0)
        assert traj.t[0] == pytest.approx(settings.t_minus)
        assert traj.t[-1] == pytest.approx(T_inf)

    def test_graph_property_near_origin(self, small_case):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        ds, _ = generate_dataset(sys_, cert, dtrans, count=5, radius=0.8,
                                 n_pos=22, n_neg=4, seed=3, T_inf=T_inf,
                                 settings=desk_settings(T_inf))
        norms = np.linalg.norm(ds.x, axis=1)
        near = norms <= 0.1 * 0.8
        assert near.any()
        gap = np.linalg.norm(ds.p[near] - ds.x[near] @ cert.P.T, axis=1)
        assert np.all(gap <= 0.2 * norms[near])

    def test_dataset_counts(self, small_case):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        ds, rejected = generate_dataset(sys_, cert, dtrans, count=3, radius=0.6,
                                        n_pos=5, n_neg=2, seed=1, T_inf=T_inf,
                                        settings=desk_settings(T_inf))
        assert rejected == 0
        assert len(ds) == 3 * 7
        assert np.unique(ds.traj_id).size == 3

    def test_empty_dataset(self, small_case):
        sys_, lin, cert, dtrans = small_case
        ds, rejected = generate_dataset(sys_, cert, dtrans, count=0, radius=0.6,
                                        n_pos=5, n_neg=2, seed=1, T_inf=20.0)
        assert len(ds) == 0 and rejected == 0

    def test_determinism(self, small_case):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        settings = desk_settings(T_inf)
        a, _ = generate_dataset(sys_, cert, dtrans, count=3, radius=0.7,
                                n_pos=4, n_neg=2, seed=9, T_inf=T_inf,
                                settings=settings)
        b, _ = generate_dataset(sys_, cert, dtrans, count=3, radius=0.7,
                                n_pos=4, n_neg=2, seed=9, T_inf=T_inf,
                                settings=settings)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.p, b.p)
        assert np.array_equal(a.V, b.V) and np.array_equal(a.t, b.t)

    def test_generation_failure_reported(self, small_case):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        impossible = GenerationSettings(grid_dt=T_inf / 4000.0, residual_tol=1e-300)
        with pytest.raises(GenerationError) as err:
            generate_dataset(sys_, cert, dtrans, count=4, radius=0.7,
                             n_pos=4, n_neg=2, seed=2, T_inf=T_inf,
                             settings=impossible)
        assert err.value.diagnostics


class TestPersistence:
    def test_jsonl_round_trip_bit_exact(self, small_case, tmp_path):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        ds, _ = generate_dataset(sys_, cert, dtrans, count=2, radius=0.7,
                                 n_pos=4, n_neg=2, seed=5, T_inf=T_inf,
                                 settings=desk_settings(T_inf))
        path = tmp_path / "ds.jsonl"
        save_dataset_jsonl(ds, path)
        loaded = load_dataset_jsonl(path)
        assert np.array_equal(ds.x, loaded.x)
        assert np.array_equal(ds.p, loaded.p)
        assert np.array_equal(ds.V, loaded.V)
        assert np.array_equal(ds.traj_id, loaded.traj_id)
        assert np.array_equal(ds.t, loaded.t)
        # writing the loaded dataset again reproduces the file byte for byte
        path2 = tmp_path / "ds2.jsonl"
        save_dataset_jsonl(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_trajectory_csv(self, small_case, tmp_path):
        sys_, lin, cert, dtrans = small_case
        T_inf = pick_horizon(cert.stable_margin, 1e-5)
        traj = generate_trajectory(sys_, dtrans,
                                   0.5 * np.ones(sys_.n) / math.sqrt(sys_.n),
                                   T_inf, desk_settings(T_inf))
        path = tmp_path / "traj.csv"
        trajectory_to_csv(sys_, traj, path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[0] == "t"
        assert len(lines) == traj.t.size + 1
        assert len(lines[1].split(",")) == 2 * sys_.n + 3
