"""Hot numerical kernels with numba-jitted and pure-numpy variants.

The convolution sweep below is the inner loop of the Picard iteration for
the stable-manifold boundary-value problem: a linear recurrence

    y[i+1] = E y[i] + Km N[i-1] + K0 N[i] + Kp N[i+1]

over tens of thousands of grid steps per trajectory, where E is a matrix
exponential propagator and (Km, K0, Kp) are exponential-quadrature weights
for a quadratic interpolant of the forcing N.  The first step uses a
forward-biased stencil (J0, J1, J2) because N[-1] does not exist.

Set the environment variable ``DHINF_NO_NUMBA=1`` to force the pure-numpy
path (used by the benchmark and as a fallback when numba is unavailable).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


def _sweep_numpy(E, Km, K0, Kp, J0, J1, J2, N, y0):
    steps = N.shape[0] - 1
    out = np.empty_like(N)
    out[0] = y0
    out[1] = E @ y0 + J0 @ N[0] + J1 @ N[1] + J2 @ N[2]
    for i in range(1, steps):
        out[i + 1] = E @ out[i] + Km @ N[i - 1] + K0 @ N[i] + Kp @ N[i + 1]
    return out


@njit(cache=True)
def _sweep_numba(E, Km, K0, Kp, J0, J1, J2, N, y0):  # pragma: no cover - jitted
    steps = N.shape[0] - 1
    n = y0.shape[0]
    out = np.empty((steps + 1, n))
    for r in range(n):
        out[0, r] = y0[r]
    for r in range(n):
        acc = 0.0
        for c in range(n):
            acc += (E[r, c] * y0[c] + J0[r, c] * N[0, c]
                    + J1[r, c] * N[1, c] + J2[r, c] * N[2, c])
        out[1, r] = acc
    for i in range(1, steps):
        for r in range(n):
            acc = 0.0
            for c in range(n):
                acc += (E[r, c] * out[i, c] + Km[r, c] * N[i - 1, c]
                        + K0[r, c] * N[i, c] + Kp[r, c] * N[i + 1, c])
            out[i + 1, r] = acc
    return out


USING_NUMBA = _HAVE_NUMBA and os.environ.get("DHINF_NO_NUMBA", "") != "1"


def convolution_sweep(E, Km, K0, Kp, J0, J1, J2, N, y0):
    """Run the exponential-quadrature recurrence over a forcing array.

    Parameters are n-by-n weight matrices, the forcing ``N`` of shape
    (grid+1, n) sampled on a uniform grid, and the initial vector ``y0``.
    Returns the propagated array of shape (grid+1, n).
    """
    N = np.ascontiguousarray(N, dtype=np.float64)
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    if N.shape[0] < 3:
        raise ValueError("convolution sweep needs at least 3 grid points")
    if USING_NUMBA:
        return _sweep_numba(E, Km, K0, Kp, J0, J1, J2, N, y0)
    return _sweep_numpy(E, Km, K0, Kp, J0, J1, J2, N, y0)


def cumulative_quadratic(f, dt):
    """Cumulative integral of samples ``f`` on a uniform grid, one order
    above the trapezoid rule (quadratic interpolation per interval).

    Returns ``F`` with F[0] = 0 and F[i] approximating the integral of f
    from the first node to node i.  Works on (K,) or (K, n) arrays.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] < 3:
        # fall back to trapezoid on very short grids
        seg = 0.5 * dt * (f[:-1] + f[1:])
    else:
        seg = np.empty_like(f[:-1])
        seg[1:] = dt * (-f[:-2] / 12.0 + 8.0 * f[1:-1] / 12.0 + 5.0 * f[2:] / 12.0)
        seg[0] = dt * (5.0 * f[0] / 12.0 + 8.0 * f[1] / 12.0 - f[2] / 12.0)
    out = np.zeros_like(f)
    np.cumsum(seg, axis=0, out=out[1:])
    return out
