"""Control-affine system model, running-cost data, and the contact
Hamiltonian of the discounted zero-sum game.

A :class:`ControlSystem` bundles the dynamics

    dx/dt = f(x) + g(x) u + k(x) d,        f(0) = 0,

with positive-definite cost matrices Q (state), W (control), G
(disturbance), an attenuation level ``gamma`` (``math.inf`` selects the
pure optimal-control limit, in which every gamma^-2 term is exactly
zero), and a discount rate ``alpha``.

The saddle inputs of the game, the contact Hamiltonian whose zero level
set carries the value function, and the characteristic (contact
Hamiltonian) right-hand side all live here, together with the built-in
Allen-Cahn benchmark and a scalar LQ test system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, UnsupportedModelError

__all__ = [
    "ControlSystem",
    "AllenCahnConfig",
    "build_allen_cahn",
    "scalar_benchmark",
    "saddle_inputs",
    "coupling_matrix",
    "contact_hamiltonian",
    "contact_rhs",
    "contact_rhs_batch",
    "rescale_system",
]


def _check_spd(M: np.ndarray, name: str) -> None:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ConfigError(f"{name} must be positive definite")


@dataclass
class ControlSystem:
    """Control-affine dynamics with quadratic running costs.

    Callbacks take and return plain 1-D/2-D numpy arrays.  ``drift_batch``
    and ``jacT_costate_batch`` are optional vectorized fast paths used by
    the trajectory generator: ``drift_batch(X)`` maps an (B, n) stack of
    states to the (B, n) stack of drifts, and ``jacT_costate_batch(X, P)``
    returns the rows (df/dx(x_i))^T p_i.  When absent, the generator falls
    back to row-by-row calls of the pointwise callbacks.

    ``constant_inputs`` declares that g and k do not depend on x, so the
    costate equation has no quadratic coupling-derivative term.  A
    state-dependent g or k is accepted only together with ``m_gradient``,
    a callback returning the vector with components p^T (dM/dx_i) p.
    """

    n: int
    m: int
    l: int
    drift: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    disturbance_map: Callable[[np.ndarray], np.ndarray]
    Q: np.ndarray
    W: np.ndarray
    G: np.ndarray
    gamma: float
    alpha: float
    domain_radius: float
    state_scale: Optional[np.ndarray] = None
    constant_inputs: bool = True
    m_gradient: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    drift_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacT_costate_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.l < 1:
            raise ConfigError("dimensions n, m, l must be positive")
        self.Q = np.asarray(self.Q, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        for M, name, d in ((self.Q, "Q", self.n), (self.W, "W", self.m), (self.G, "G", self.l)):
            if M.shape != (d, d):
                raise ConfigError(f"{name} must be {d}x{d}")
            _check_spd(M, name)
        if not (self.gamma > 0):
            raise ConfigError("gamma must be positive (math.inf allowed)")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if not (self.domain_radius > 0):
            raise ConfigError("domain_radius must be positive")
        if self.state_scale is None:
            self.state_scale = np.ones(self.n)
        else:
            self.state_scale = np.asarray(self.state_scale, dtype=float)
            if self.state_scale.shape != (self.n,) or np.any(self.state_scale <= 0):
                raise ConfigError("state_scale must be a positive length-n vector")
        f0 = np.asarray(self.drift(np.zeros(self.n)), dtype=float)
        if np.linalg.norm(f0) > 1e-12:
            raise ConfigError(f"drift must vanish at the origin, |f(0)| = {np.linalg.norm(f0):.3e}")

    @property
    def inv_gamma_sq(self) -> float:
        """gamma^-2 with the infinite-gamma limit handled exactly."""
        return 0.0 if math.isinf(self.gamma) else 1.0 / self.gamma**2

    def with_alpha(self, alpha: float) -> "ControlSystem":
        """Copy of this system with the discount rate replaced."""
        return replace(self, alpha=alpha)


def coupling_matrix(sys: ControlSystem, x: np.ndarray) -> np.ndarray:
    """Quadratic costate-coupling matrix M(x) of the Hamiltonian:
    (1/4) gamma^-2 k G^-1 k^T - (1/4) g W^-1 g^T."""
    g = np.atleast_2d(sys.input_map(x))
    M = -0.25 * (g @ np.linalg.solve(sys.W, g.T))
    ig2 = sys.inv_gamma_sq
    if ig2 != 0.0:
        k = np.atleast_2d(sys.disturbance_map(x))
        M = M + 0.25 * ig2 * (k @ np.linalg.solve(sys.G, k.T))
    return M


def saddle_inputs(sys: ControlSystem, x: np.ndarray, p: np.ndarray):
    """Game-optimal control and worst-case disturbance for costate p:
    u = -(1/2) W^-1 g(x)^T p  and  d = (1/2) gamma^-2 G^-1 k(x)^T p.

    For infinite gamma the disturbance channel is identically zero.
    """
    g = np.atleast_2d(sys.input_map(x))
    u = -0.5 * np.linalg.solve(sys.W, g.T @ p)
    ig2 = sys.inv_gamma_sq
    if ig2 == 0.0:
        d = np.zeros(sys.l)
    else:
        k = np.atleast_2d(sys.disturbance_map(x))
        d = 0.5 * ig2 * np.linalg.solve(sys.G, k.T @ p)
    return u, d


def contact_hamiltonian(sys: ControlSystem, x: np.ndarray, V: float, p: np.ndarray) -> float:
    """Contact Hamiltonian p^T f + p^T M(x) p - alpha V + x^T Q x.

    Vanishes identically on the graph of a solution of the discounted
    game's stationary PDE, which is what the trajectory validator checks.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    f = np.asarray(sys.drift(x), dtype=float)
    M = coupling_matrix(sys, x)
    return float(p @ f + p @ (M @ p) - sys.alpha * V + x @ (sys.Q @ x))


def contact_rhs(sys: ControlSystem, x: np.ndarray, p: np.ndarray, V: float = 0.0):
    """Right-hand side of the characteristic contact system.

    Returns (dx/dt, dp/dt, dV/dt) with

        dx/dt = f + 2 M(x) p
        dp/dt = alpha p - (df/dx)^T p - p^T (dM/dx) p - 2 Q x
        dV/dt = (dx/dt)^T p.

    The quadratic coupling-derivative term is zero for constant g, k; a
    state-dependent input or disturbance map requires the ``m_gradient``
    callback on the system.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    f = np.asarray(sys.drift(x), dtype=float)
    M = coupling_matrix(sys, x)
    xdot = f + 2.0 * (M @ p)
    J = np.asarray(sys.drift_jacobian(x), dtype=float)
    pdot = sys.alpha * p - J.T @ p - 2.0 * (sys.Q @ x)
    if not sys.constant_inputs:
        if sys.m_gradient is None:
            raise UnsupportedModelError(
                "state-dependent input/disturbance maps need an m_gradient callback")
        pdot = pdot - np.asarray(sys.m_gradient(x, p), dtype=float)
    vdot = float(xdot @ p)
    return xdot, pdot, vdot


def contact_rhs_batch(sys: ControlSystem, X: np.ndarray, P: np.ndarray):
    """Vectorized (dx/dt, dp/dt) over row stacks X, P of shape (B, n).

    Only valid for constant g, k (checked); uses the batched callbacks
    when the system provides them.
    """
    if not sys.constant_inputs and sys.m_gradient is None:
        raise UnsupportedModelError(
            "state-dependent input/disturbance maps need an m_gradient callback")
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    if sys.drift_batch is not None:
        F = sys.drift_batch(X)
    else:
        F = np.stack([np.asarray(sys.drift(x), dtype=float) for x in X])
    M = coupling_matrix(sys, X[0]) if sys.constant_inputs else None
    if M is not None:
        Xdot = F + 2.0 * (P @ M.T)
    else:
        Xdot = F + 2.0 * np.stack([coupling_matrix(sys, x) @ p for x, p in zip(X, P)])
    if sys.jacT_costate_batch is not None:
        JTp = sys.jacT_costate_batch(X, P)
    else:
        JTp = np.stack([np.asarray(sys.drift_jacobian(x), dtype=float).T @ p
                        for x, p in zip(X, P)])
    Pdot = sys.alpha * P - JTp - 2.0 * (X @ sys.Q.T)
    if not sys.constant_inputs:
        Pdot = Pdot - np.stack([np.asarray(sys.m_gradient(x, p), dtype=float)
                                for x, p in zip(X, P)])
    return Xdot, Pdot


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

@dataclass
class AllenCahnConfig:
    """Spatial discretization of the Dirichlet Allen-Cahn problem on
    [-1, 1]: N grid intervals (state dimension n = N - 1, mesh width
    h = 2/N), viscosity sigma, attenuation gamma, and the fraction of the
    maximal admissible discount to use (alpha = alpha_fraction * alpha_bar,
    resolved by the caller once alpha_bar is known)."""

    N: int = 31
    sigma: float = 0.1
    gamma: float = 1.2
    alpha_fraction: float = 0.5
    domain_radius: float = 0.8

    def __post_init__(self):
        if self.N < 3:
            raise ConfigError("N must be at least 3")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not (self.gamma > 0):
            raise ConfigError("gamma must be positive (math.inf allowed)")
        if not (0.0 <= self.alpha_fraction < 1.0):
            raise ConfigError("alpha_fraction must lie in [0, 1)")

    @property
    def h(self) -> float:
        return 2.0 / self.N

    @property
    def n(self) -> int:
        return self.N - 1


def dirichlet_laplacian(N: int) -> np.ndarray:
    """Second-difference matrix tridiag(1, -2, 1) / h^2 for N intervals on
    [-1, 1] with homogeneous Dirichlet boundaries (size N-1)."""
    n = N - 1
    h = 2.0 / N
    lap = np.diag(-2.0 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    return lap / h**2


def build_allen_cahn(cfg: AllenCahnConfig, alpha: float = 0.0) -> ControlSystem:
    """Semidiscrete Allen-Cahn reaction-diffusion control system.

    Dynamics dX/dt = (sigma A + I) X - X^3 + u + d with A the Dirichlet
    second-difference matrix, fully actuated and fully disturbed
    (g = k = I), and costs Q = W = G = h I.  The discount defaults to 0;
    use ``with_alpha`` once the admissible bound has been computed.
    """
    n = cfg.n
    lin = cfg.sigma * dirichlet_laplacian(cfg.N) + np.eye(n)
    eye = np.eye(n)
    hI = cfg.h * eye

    def drift(x):
        return lin @ x - x**3

    def drift_jacobian(x):
        return lin - 3.0 * np.diag(x**2)

    return ControlSystem(
        n=n, m=n, l=n,
        drift=drift,
        drift_jacobian=drift_jacobian,
        input_map=lambda x: eye,
        disturbance_map=lambda x: eye,
        Q=hI, W=hI.copy(), G=hI.copy(),
        gamma=cfg.gamma,
        alpha=alpha,
        domain_radius=cfg.domain_radius,
        drift_batch=lambda X: X @ lin.T - X**3,
        jacT_costate_batch=lambda X, P: P @ lin - 3.0 * X**2 * P,
    )


def scalar_benchmark(gamma: float = math.inf, alpha: float = 0.0,
                     a: float = -1.0, domain_radius: float = 1.0) -> ControlSystem:
    """Scalar LQ test system dx/dt = a x + u + d with unit costs.

    Everything about it has closed forms, which the test suite uses as
    oracles for the Riccati, transform, and boundary-value machinery.
    """
    one = np.eye(1)
    return ControlSystem(
        n=1, m=1, l=1,
        drift=lambda x: a * x,
        drift_jacobian=lambda x: a * one,
        input_map=lambda x: one,
        disturbance_map=lambda x: one,
        Q=one, W=one.copy(), G=one.copy(),
        gamma=gamma,
        alpha=alpha,
        domain_radius=domain_radius,
        drift_batch=lambda X: a * X,
        jacT_costate_batch=lambda X, P: a * P,
    )


def rescale_system(sys: ControlSystem, scale: np.ndarray) -> ControlSystem:
    """Diagonal change of state coordinates y = diag(scale)^-1 x.

    Returns an equivalent system expressed in the scaled coordinates with
    costs transformed so the game value is unchanged; used to condition
    badly scaled models before trajectory generation.
    """
    s = np.asarray(scale, dtype=float)
    if s.shape != (sys.n,) or np.any(s <= 0):
        raise ConfigError("scale must be a positive length-n vector")
    Sm = np.diag(s)
    Sinv = np.diag(1.0 / s)
    drift, jac = sys.drift, sys.drift_jacobian
    gmap, kmap = sys.input_map, sys.disturbance_map
    return replace(
        sys,
        drift=lambda y: Sinv @ np.asarray(drift(Sm @ y), dtype=float),
        drift_jacobian=lambda y: Sinv @ np.asarray(jac(Sm @ y), dtype=float) @ Sm,
        input_map=lambda y: Sinv @ np.atleast_2d(gmap(Sm @ y)),
        disturbance_map=lambda y: Sinv @ np.atleast_2d(kmap(Sm @ y)),
        Q=Sm @ sys.Q @ Sm,
        state_scale=s,
        drift_batch=None,
        jacT_costate_batch=None,
    )
