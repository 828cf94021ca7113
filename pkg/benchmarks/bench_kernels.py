#!/usr/bin/env python3
"""Benchmark the numba-jitted convolution sweep against the pure-numpy
fallback, and time one full boundary-value solve under each path.

Run:  python3 benchmarks/bench_kernels.py
The active default path follows DHINF_NO_NUMBA (see dhinf.kernels).
"""

import time

import numpy as np

from dhinf import kernels
from dhinf.kernels import _sweep_numba, _sweep_numpy
from dhinf.linear_analysis import alpha_bar, build_decoupling, linearize, solve_gare
from dhinf.manifold import GenerationSettings, pick_horizon, solve_local_bvp
from dhinf.model import AllenCahnConfig, build_allen_cahn


def time_fn(fn, *args, repeats=5):
    fn(*args)  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def bench_sweep():
    print("convolution sweep (one Picard half-iteration)")
    print(f"{'n':>4} {'grid':>7} {'numpy [ms]':>12} {'numba [ms]':>12} {'speedup':>9}")
    rng = np.random.default_rng(0)
    for n, steps in ((10, 4000), (10, 16000), (30, 4000), (30, 16000)):
        E = np.eye(n) * 0.98
        mats = [0.01 * rng.standard_normal((n, n)) for _ in range(6)]
        N = rng.standard_normal((steps + 1, n))
        y0 = rng.standard_normal(n)
        args = (E, *mats, N, y0)
        t_np = time_fn(_sweep_numpy, *args)
        t_nb = time_fn(_sweep_numba, *args)
        np.testing.assert_allclose(_sweep_numpy(*args), _sweep_numba(*args),
                                   rtol=1e-12, atol=1e-13)
        print(f"{n:>4} {steps:>7} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
              f"{t_np / t_nb:>9.1f}")


def bench_bvp():
    print("\nfull boundary-value solve (Allen-Cahn N=11, one trajectory)")
    cfg = AllenCahnConfig(N=11, sigma=0.1, gamma=1.2)
    sys_ = build_allen_cahn(cfg)
    lin = linearize(sys_)
    alpha = 0.5 * alpha_bar(lin)
    sys_ = sys_.with_alpha(alpha)
    cert = solve_gare(lin, alpha)
    dtrans = build_decoupling(lin, cert)
    T_inf = pick_horizon(cert.stable_margin, 1e-5)
    settings = GenerationSettings(grid_dt=T_inf / 4000.0)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(sys_.n)
    x0 *= 0.8 / np.linalg.norm(x0)

    for use_numba in (False, True):
        kernels.USING_NUMBA = use_numba
        t = time_fn(solve_local_bvp, sys_, dtrans, x0, T_inf, settings, repeats=3)
        label = "numba" if use_numba else "numpy"
        print(f"  {label:>5}: {t * 1e3:8.1f} ms per trajectory")


if __name__ == "__main__":
    print(f"numba path active by default: {kernels.USING_NUMBA}\n")
    bench_sweep()
    bench_bvp()
