"""Shared fixtures.

The desk-scale Allen-Cahn runs (N = 11) are expensive enough to build
once per session: pipeline objects, generated datasets, and the trained
approximators for both the finite-gamma and infinite-gamma cases.
"""

import math
import time

import numpy as np
import pytest

from dhinf import (
    AllenCahnConfig,
    LossWeights,
    alpha_bar,
    build_allen_cahn,
    build_decoupling,
    generate_dataset,
    init_params,
    linearize,
    pick_horizon,
    scalar_benchmark,
    solve_gare,
    train,
)
from dhinf.manifold import GenerationSettings

DESK_N = 11
DESK_SIGMA = 0.1


def build_pipeline(sys_):
    lin = linearize(sys_)
    cert = solve_gare(lin, sys_.alpha)
    dtrans = build_decoupling(lin, cert)
    return sys_, lin, cert, dtrans


def make_desk_case(gamma):
    cfg = AllenCahnConfig(N=DESK_N, sigma=DESK_SIGMA, gamma=gamma, alpha_fraction=0.5)
    sys_ = build_allen_cahn(cfg)
    ab = alpha_bar(linearize(sys_))
    return build_pipeline(sys_.with_alpha(0.5 * ab))


def desk_settings(T_inf):
    return GenerationSettings(grid_dt=T_inf / 4000.0)


@pytest.fixture(scope="session")
def scalar_pipeline():
    """Scalar LQ system at gamma = inf, alpha = 0 (all closed forms)."""
    return build_pipeline(scalar_benchmark())


@pytest.fixture(scope="session")
def scalar_pipeline_discounted():
    """Scalar LQ system at gamma = inf, alpha = 1."""
    return build_pipeline(scalar_benchmark(alpha=1.0))


@pytest.fixture(scope="session")
def desk_case1():
    """Allen-Cahn N=11, gamma=1.2, alpha = 0.5 alpha_bar."""
    return make_desk_case(1.2)


@pytest.fixture(scope="session")
def desk_case2():
    """Allen-Cahn N=11, gamma=inf, alpha = 0.5 alpha_bar."""
    return make_desk_case(math.inf)


def generate_desk_dataset(pipeline, count, seed):
    sys_, lin, cert, dtrans = pipeline
    T_inf = pick_horizon(cert.stable_margin, 1e-5)
    t0 = time.perf_counter()
    ds, rejected = generate_dataset(
        sys_, cert, dtrans, count=count, radius=0.8, n_pos=22, n_neg=4,
        seed=seed, T_inf=T_inf, settings=desk_settings(T_inf))
    return ds, rejected, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_dataset_case1(desk_case1):
    """300-trajectory training set for the finite-gamma desk case."""
    return generate_desk_dataset(desk_case1, count=300, seed=42)


@pytest.fixture(scope="session")
def desk_valset_case1(desk_case1):
    return generate_desk_dataset(desk_case1, count=30, seed=777)


@pytest.fixture(scope="session")
def desk_dataset_case2(desk_case2):
    return generate_desk_dataset(desk_case2, count=300, seed=42)


@pytest.fixture(scope="session")
def desk_valset_case2(desk_case2):
    return generate_desk_dataset(desk_case2, count=30, seed=777)


def train_desk(pipeline, train_ds, val_ds, epochs=4000, seed=0):
    sys_, lin, cert, dtrans = pipeline
    theta = init_params(sys_.n, hidden=(60, 60, 60), seed=seed)
    t0 = time.perf_counter()
    theta, report = train(theta, train_ds, val_ds, epochs=epochs, base_lr=1e-3,
                          w=LossWeights(), P=cert.P, seed=seed)
    return theta, report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_theta_case1(desk_case1, desk_dataset_case1, desk_valset_case1):
    """4000-epoch trained approximator for the finite-gamma desk case."""
    return train_desk(desk_case1, desk_dataset_case1[0], desk_valset_case1[0])


@pytest.fixture(scope="session")
def desk_theta_case2(desk_case2, desk_dataset_case2, desk_valset_case2):
    return train_desk(desk_case2, desk_dataset_case2[0], desk_valset_case2[0])


def central_difference(fn, x, eps=1e-6):
    """Componentwise central finite-difference Jacobian of fn at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = eps
        J[:, j] = (np.asarray(fn(x + dx)) - np.asarray(fn(x - dx))) / (2 * eps)
    return J
