"""Linear analysis at the origin: Hamiltonian matrices, hyperbolicity
margins, the discount bound, the stabilizing Riccati solution, and the
decoupling transform that block-diagonalizes the characteristic system.

Conventions
-----------
With A = df/dx(0), B = g(0), D = k(0) and the coupling block

    R = -(1/2) (B W^-1 B^T - gamma^-2 D G^-1 D^T),

the characteristic-form Hamiltonian matrix is

    Hc(alpha, gamma) = [[A, R], [-2Q, -A^T + alpha I]],

and the symmetric form H(alpha, gamma) subtracts (alpha/2) I from the
whole matrix.  The stabilizing Riccati solution P is read off the stable
invariant subspace of the symmetric form; the induced closed-loop matrix
is A + R P and the Riccati residual is evaluated in the characteristic
form  2Q + A^T P + P A - alpha P + P R P.

The maximal admissible discount is alpha_bar = dist(sigma_-(H0), iR)
where H0 is the zero-discount matrix.  It is computed at a caller-chosen
gamma; the default is the system's working gamma (the published spectral
values for the Allen-Cahn benchmark follow that convention, not the
infinite-gamma one, and both are exposed here).

Certificates report two margins: ``h_stable_margin`` is the literal
spectral distance of the stable eigenvalues of H(alpha, gamma) to the
imaginary axis, while ``stable_margin = alpha_bar - alpha`` is the
guaranteed decay-rate bound for the closed-loop block, which is the
quantity the horizon rule consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import LyapunovError, RiccatiError, SpectrumError, TransformError
from .model import ControlSystem, contact_rhs

__all__ = [
    "Linearization",
    "StabilityCertificate",
    "DecouplingTransform",
    "linearize",
    "coupling_block",
    "hamiltonian_matrix",
    "stable_spectral_distance",
    "alpha_bar",
    "solve_gare",
    "solve_lyapunov",
    "decoupling_transform",
    "build_decoupling",
    "nonlinear_residuals",
]

HYPERBOLICITY_TOL = 1e-8


@dataclass
class Linearization:
    """Linearized data at the origin plus the cost matrices needed to
    form Hamiltonian matrices at any attenuation level."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    W: np.ndarray
    G: np.ndarray
    gamma: float
    R: np.ndarray = field(init=False)

    def __post_init__(self):
        self.R = coupling_block(self, self.gamma)

    @property
    def n(self) -> int:
        return self.A.shape[0]


def linearize(sys: ControlSystem) -> Linearization:
    """Extract (A, B, D) = (df/dx(0), g(0), k(0)) and the coupling block."""
    zero = np.zeros(sys.n)
    return Linearization(
        A=np.asarray(sys.drift_jacobian(zero), dtype=float),
        B=np.atleast_2d(np.asarray(sys.input_map(zero), dtype=float)),
        D=np.atleast_2d(np.asarray(sys.disturbance_map(zero), dtype=float)),
        Q=sys.Q, W=sys.W, G=sys.G, gamma=sys.gamma,
    )


def coupling_block(lin: Linearization, gamma: Optional[float] = None) -> np.ndarray:
    """Coupling block -(1/2)(B W^-1 B^T - gamma^-2 D G^-1 D^T) at the
    given attenuation level (default: the linearization's own)."""
    if gamma is None:
        gamma = lin.gamma
    R = -0.5 * (lin.B @ np.linalg.solve(lin.W, lin.B.T))
    if not math.isinf(gamma):
        R = R + 0.5 / gamma**2 * (lin.D @ np.linalg.solve(lin.G, lin.D.T))
    return R


def hamiltonian_matrix(lin: Linearization, alpha: float,
                       gamma: Optional[float] = None,
                       form: str = "characteristic") -> np.ndarray:
    """Assemble the 2n-by-2n Hamiltonian matrix in either form.

    ``characteristic``: [[A, R], [-2Q, -A^T + alpha I]] — the linear part
    of the characteristic flow.  ``symmetric``: the same matrix shifted by
    -(alpha/2) I, whose spectrum is symmetric about the imaginary axis.
    """
    n = lin.n
    R = coupling_block(lin, gamma)
    H = np.block([[lin.A, R], [-2.0 * lin.Q, -lin.A.T + alpha * np.eye(n)]])
    if form == "symmetric":
        H = H - 0.5 * alpha * np.eye(2 * n)
    elif form != "characteristic":
        raise ValueError(f"unknown form {form!r}")
    return H


def stable_spectral_distance(H: np.ndarray, hyperbolicity_tol: float = HYPERBOLICITY_TOL):
    """Distance of the stable spectrum of H to the imaginary axis.

    Returns ``(dist, hyperbolic)`` where ``dist`` is the minimum |Re| over
    eigenvalues with negative real part and ``hyperbolic`` says whether
    every eigenvalue keeps |Re| above the tolerance.
    """
    ev = np.linalg.eigvals(np.asarray(H, dtype=float))
    neg = ev[ev.real < 0]
    if neg.size == 0:
        raise SpectrumError("no eigenvalue with negative real part")
    dist = float(np.min(np.abs(neg.real)))
    hyperbolic = bool(np.min(np.abs(ev.real)) > hyperbolicity_tol)
    return dist, hyperbolic


def alpha_bar(lin: Linearization, gamma: Optional[float] = None) -> float:
    """Maximal admissible discount: spectral distance of the stable part
    of the zero-discount Hamiltonian matrix to the imaginary axis.

    Requires that matrix to be hyperbolic.  ``gamma`` chooses the
    attenuation level of the matrix; the default is the working gamma.
    """
    H0 = hamiltonian_matrix(lin, 0.0, gamma=gamma, form="characteristic")
    dist, hyperbolic = stable_spectral_distance(H0)
    if not hyperbolic:
        raise SpectrumError(
            "zero-discount Hamiltonian matrix is not hyperbolic; "
            "no admissible discount bound exists")
    return dist


@dataclass
class StabilityCertificate:
    """Output of the Riccati solve: the stabilizing solution P, its
    residual, the discount bound data, and the closed-loop spectrum."""

    P: np.ndarray
    gare_residual: float
    delta0: float
    alpha_bar: float
    stable_margin: float
    h_stable_margin: float
    closedloop_spectrum: np.ndarray
    alpha: float
    gamma: float

    def to_dict(self) -> dict:
        """JSON-ready summary (row-major P, [re, im] eigenvalue pairs)."""
        return {
            "alpha": self.alpha,
            "gamma": self.gamma if math.isfinite(self.gamma) else "inf",
            "alpha_bar": self.alpha_bar,
            "delta0": self.delta0,
            "stable_margin": self.stable_margin,
            "h_stable_margin": self.h_stable_margin,
            "gare_residual": self.gare_residual,
            "P": [float(v) for v in self.P.ravel()],
            "closedloop_spectrum": [[float(ev.real), float(ev.imag)]
                                    for ev in self.closedloop_spectrum],
        }


def solve_gare(lin: Linearization, alpha: float,
               gamma: Optional[float] = None) -> StabilityCertificate:
    """Stabilizing Riccati solution via the ordered real Schur form.

    Takes the n-dimensional stable invariant subspace of the symmetric-form
    Hamiltonian matrix, stacks a real basis [X; Y], and returns
    P = sym(Y X^-1).  Fails if the stable subspace has the wrong dimension
    (not hyperbolic), is not a graph over the state space (X singular), or
    yields a P that is not positive definite.
    """
    if gamma is None:
        gamma = lin.gamma
    n = lin.n
    H = hamiltonian_matrix(lin, alpha, gamma=gamma, form="symmetric")
    T, Z, sdim = scipy.linalg.schur(H, output="real", sort=lambda re, im: re < 0.0)
    if sdim != n:
        raise SpectrumError(
            f"stable subspace has dimension {sdim}, expected {n}: "
            "symmetric Hamiltonian matrix is not hyperbolic")
    X = Z[:n, :n]
    Y = Z[n:, :n]
    if np.linalg.matrix_rank(X, tol=1e-10 * max(1.0, np.linalg.norm(X))) < n:
        raise RiccatiError("stable subspace is not a graph over the state space")
    P = np.linalg.solve(X.T, Y.T).T
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P).min() <= 0:
        raise RiccatiError("candidate Riccati solution is not positive definite")

    R = coupling_block(lin, gamma)
    residual = 2.0 * lin.Q + lin.A.T @ P + P @ lin.A - alpha * P + P @ R @ P
    gare_residual = float(np.linalg.norm(residual))

    closedloop = lin.A + R @ P
    cl_spectrum = np.linalg.eigvals(closedloop)
    if np.max(cl_spectrum.real) >= min(0.0, alpha / 2):
        raise RiccatiError("closed-loop matrix is not Hurwitz: solution not stabilizing")

    ab = alpha_bar(lin, gamma=gamma)
    h_margin, _ = stable_spectral_distance(H)
    return StabilityCertificate(
        P=P,
        gare_residual=gare_residual,
        delta0=2.0 * ab,
        alpha_bar=ab,
        stable_margin=ab - alpha,
        h_stable_margin=h_margin,
        closedloop_spectrum=cl_spectrum,
        alpha=alpha,
        gamma=gamma,
    )


def solve_lyapunov(Acl: np.ndarray, RHS: np.ndarray) -> np.ndarray:
    """Solve Acl S + S Acl^T = RHS by dense Kronecker vectorization.

    Adequate at desk scale (n up to a few tens).  Requires the spectra of
    Acl and -Acl to be disjoint, which holds whenever Acl is Hurwitz.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    RHS = np.atleast_2d(np.asarray(RHS, dtype=float))
    n = Acl.shape[0]
    K = np.kron(np.eye(n), Acl) + np.kron(Acl, np.eye(n))
    try:
        s = np.linalg.solve(K, RHS.ravel())
    except np.linalg.LinAlgError as exc:
        raise LyapunovError(f"resonant spectrum: {exc}") from exc
    S = s.reshape(n, n)
    res = np.linalg.norm(Acl @ S + S @ Acl.T - RHS)
    if res > 1e-10 * np.linalg.norm(RHS):
        raise LyapunovError(f"residual {res:.3e} exceeds tolerance; spectrum near-resonant")
    return S


@dataclass
class DecouplingTransform:
    """Change of variables (x, p) = T (xb, pb) splitting the linear part
    of the characteristic flow into a stable block B and an anti-stable
    block -F, with the closed-form inverse [[I + S P, -S], [-P, I]]."""

    P: np.ndarray
    S: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray
    B: np.ndarray
    F: np.ndarray
    alpha: float

    @property
    def n(self) -> int:
        return self.B.shape[0]

    def to_full(self, xbar: np.ndarray, pbar: np.ndarray):
        """Map transformed coordinates (row stacks allowed) to (x, p)."""
        n = self.n
        if xbar.ndim == 1:
            z = self.T @ np.concatenate([xbar, pbar])
            return z[:n], z[n:]
        Z = np.hstack([xbar, pbar]) @ self.T.T
        return Z[:, :n], Z[:, n:]

    def to_split(self, x: np.ndarray, p: np.ndarray):
        """Map (x, p) (row stacks allowed) to transformed coordinates."""
        n = self.n
        if x.ndim == 1:
            z = self.T_inv @ np.concatenate([x, p])
            return z[:n], z[n:]
        Z = np.hstack([x, p]) @ self.T_inv.T
        return Z[:, :n], Z[:, n:]


def decoupling_transform(P: np.ndarray, S: np.ndarray, lin: Linearization,
                         alpha: float) -> DecouplingTransform:
    """Assemble T = [[I, S], [P, P S + I]] and verify both the closed-form
    inverse and the block-diagonalization of the characteristic matrix.

    ``S`` must solve (B - (alpha/2) I) S + S (B - (alpha/2) I)^T = -R with
    B = A + R P; ``build_decoupling`` computes it.  Raises if either
    identity fails beyond tolerance.
    """
    n = lin.n
    eye = np.eye(n)
    R = coupling_block(lin)
    B = lin.A + R @ P
    F = (B - alpha * eye).T
    T = np.block([[eye, S], [P, P @ S + eye]])
    T_inv = np.block([[eye + S @ P, -S], [-P, eye]])
    if np.abs(T @ T_inv - np.eye(2 * n)).max() > 1e-10:
        raise TransformError("closed-form inverse failed the identity check")
    Hc = hamiltonian_matrix(lin, alpha, form="characteristic")
    blocked = T_inv @ Hc @ T
    target = np.block([[B, np.zeros((n, n))], [np.zeros((n, n)), -F]])
    err = np.abs(blocked - target).max()
    if err > 1e-8 * max(1.0, np.abs(Hc).max()):
        raise TransformError(
            f"block-diagonalization residual {err:.3e}: S inconsistent with (P, A, R)")
    return DecouplingTransform(P=P, S=S, T=T, T_inv=T_inv, B=B, F=F, alpha=alpha)


def build_decoupling(lin: Linearization, cert: StabilityCertificate) -> DecouplingTransform:
    """Solve the shifted Lyapunov equation for S and assemble the verified
    transform for the certificate's (alpha, P)."""
    n = lin.n
    R = coupling_block(lin)
    B = lin.A + R @ cert.P
    S = solve_lyapunov(B - 0.5 * cert.alpha * np.eye(n), -R)
    return decoupling_transform(cert.P, S, lin, cert.alpha)


def nonlinear_residuals(sys: ControlSystem, dt: DecouplingTransform,
                        xbar: np.ndarray, pbar: np.ndarray):
    """Nonlinear forcing (Ns, Nu) of the transformed characteristic flow:
    the full right-hand side mapped through T^-1 minus its linear part
    (B xbar, -F pbar).  Identically zero for linear dynamics."""
    x, p = dt.to_full(np.asarray(xbar, dtype=float), np.asarray(pbar, dtype=float))
    v1, v2, _ = contact_rhs(sys, x, p)
    w1, w2 = dt.to_split(v1, v2)
    return w1 - dt.B @ xbar, w2 + dt.F @ pbar
