"""Trajectory generation on the stable manifold of the characteristic
contact system.

Pipeline per trajectory: a Picard iteration solves the two-point
boundary-value problem near the equilibrium in decoupled coordinates
(state component pinned at t = 0, anti-stable component pinned to zero at
the far horizon), an adaptive Runge-Kutta integration extends the head of
the local solution backward in time, and the value is recovered along the
whole path both by integrating its characteristic equation and, when the
discount is positive, from the algebraic zero-level relation of the
contact Hamiltonian.  Accepted trajectories keep the contact Hamiltonian
within ``residual_tol`` of zero everywhere, which is the invariance-based
acceptance check.

The Picard convolution integrals use exponential quadrature: the linear
propagators are exact matrix exponentials and the nonlinear forcing is
interpolated quadratically between grid nodes, giving third-order
accuracy on the default grid.  The per-step recurrence runs in the
numba/numpy kernel of :mod:`dhinf.kernels`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.integrate
import scipy.linalg

from .errors import BvpError, ExtensionError, GenerationError, SpectrumError, ValueRecoveryError
from .kernels import convolution_sweep, cumulative_quadratic
from .linear_analysis import DecouplingTransform, StabilityCertificate
from .model import ControlSystem, contact_rhs_batch, coupling_matrix

__all__ = [
    "TrajectoryPoint",
    "Trajectory",
    "Dataset",
    "GenerationSettings",
    "pick_horizon",
    "solve_local_bvp",
    "extend_backward",
    "recover_value",
    "generate_trajectory",
    "generate_dataset",
    "save_dataset_jsonl",
    "load_dataset_jsonl",
    "trajectory_to_csv",
]


class TrajectoryPoint(NamedTuple):
    t: float
    x: np.ndarray
    p: np.ndarray
    V: float


@dataclass
class Trajectory:
    """Time-stamped (t, x, p, V) samples of one stable-manifold
    trajectory spanning [T_minus, T_inf], with validation metadata."""

    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    V: np.ndarray
    h_residual_max: float
    bvp_iterations: int
    converged: bool
    value_discrepancy: float = 0.0
    tail_ratio: float = 0.0

    @property
    def points(self):
        return [TrajectoryPoint(float(tt), xx, pp, float(vv))
                for tt, xx, pp, vv in zip(self.t, self.x, self.p, self.V)]

    def accepted(self, residual_tol: float) -> bool:
        return bool(self.converged and self.h_residual_max <= residual_tol)


@dataclass
class GenerationSettings:
    """Tolerances and discretization knobs for trajectory generation.

    ``grid_dt`` of None means the default horizon/2000.  ``blowup_factor``
    scales the sampling radius into the early-reject cap on the iterates.
    ``store_stride`` thins the stored grid (head and tail nodes always
    kept); the residual check still runs on the full grid.
    """

    grid_dt: Optional[float] = None
    bvp_tol: float = 1e-8
    max_iter: int = 100
    residual_tol: float = 1e-5
    integrator_tol: float = 1e-9
    blowup_factor: float = 1e3
    tail_tol: float = 1e-5
    t_minus: float = -0.015
    n_backward: int = 40
    store_stride: int = 1
    value_method: str = "ode"


def pick_horizon(margin: float, tail_tol: float) -> float:
    """Far horizon from the decay-rate rule exp(-margin * T) <= tail_tol,
    rounded up to one decimal."""
    if margin <= 0:
        raise SpectrumError("decay margin must be positive to pick a horizon")
    if not (0.0 < tail_tol < 1.0):
        raise ValueError("tail_tol must lie in (0, 1)")
    T = -math.log(tail_tol) / margin
    return math.ceil(10.0 * T) / 10.0


def _phi_weights(M: np.ndarray, h: float):
    """Propagator E = exp(M h) and exponential-quadrature weights.

    (Km, K0, Kp) integrate a quadratic through forcing samples at
    (-h, 0, h) against the kernel exp(M (h - tau)); (J0, J1, J2) do the
    same for the first interval using samples at (0, h, 2h).
    """
    n = M.shape[0]
    Z = np.zeros((n, n))
    eye = np.eye(n)
    aug = np.block([[M, eye, Z, Z], [Z, Z, eye, Z], [Z, Z, Z, eye], [Z, Z, Z, Z]])
    E = scipy.linalg.expm(aug * h)
    p1 = E[:n, n:2 * n]          # h phi1
    p2 = E[:n, 2 * n:3 * n]      # h^2 phi2
    p3 = E[:n, 3 * n:4 * n]      # h^3 phi3
    Km = p3 / h**2 - p2 / (2 * h)
    K0 = p1 - 2 * p3 / h**2
    Kp = p2 / (2 * h) + p3 / h**2
    J0 = p1 - 1.5 * p2 / h + p3 / h**2
    J1 = 2 * p2 / h - 2 * p3 / h**2
    J2 = -p2 / (2 * h) + p3 / h**2
    return np.ascontiguousarray(E[:n, :n]), (Km, K0, Kp), (J0, J1, J2)


def _forcing(sys: ControlSystem, dt: DecouplingTransform,
             xbar: np.ndarray, pbar: np.ndarray):
    """Batched nonlinear forcing (Ns, Nu) in decoupled coordinates."""
    X, P = dt.to_full(xbar, pbar)
    V1, V2 = contact_rhs_batch(sys, X, P)
    W1, W2 = dt.to_split(V1, V2)
    return W1 - xbar @ dt.B.T, W2 + pbar @ dt.F.T


def solve_local_bvp(sys: ControlSystem, dt: DecouplingTransform,
                    xbar0: np.ndarray, T_inf: float,
                    settings: GenerationSettings = GenerationSettings()):
    """Picard iteration for the local boundary-value problem on [0, T_inf].

    Iterates the variation-of-constants maps

        xb <- exp(B t) xb0 + int_0^t exp(B (t-s)) Ns(s) ds
        pb <- -int_t^T exp(F (s-t)) Nu(s) ds

    from the seed (exp(B t) xb0, 0) until the sup-norm update drops below
    ``bvp_tol``.  The anti-stable component is pinned to zero at T_inf in
    every iterate.  Returns (t, x, p, iterations, converged) in original
    coordinates on the uniform grid.

    Raises :class:`BvpError` when an iterate blows past the cap; a run
    that merely exhausts ``max_iter`` is returned with converged=False so
    the caller can reject it.
    """
    n = dt.n
    grid_dt = settings.grid_dt if settings.grid_dt is not None else T_inf / 2000.0
    steps = max(int(math.ceil(T_inf / grid_dt)), 8)
    h = T_inf / steps
    t = np.linspace(0.0, T_inf, steps + 1)
    EB, KB, JB = _phi_weights(dt.B, h)
    EF, KF, JF = _phi_weights(dt.F, h)

    xbar0 = np.asarray(xbar0, dtype=float)
    cap = settings.blowup_factor * max(np.linalg.norm(xbar0), 1e-12)
    xbar = convolution_sweep(EB, *KB, *JB, np.zeros((steps + 1, n)), xbar0)
    pbar = np.zeros((steps + 1, n))

    converged = False
    iterations = 0
    for iterations in range(1, settings.max_iter + 1):
        Ns, Nu = _forcing(sys, dt, xbar, pbar)
        xbar_new = convolution_sweep(EB, *KB, *JB, Ns, xbar0)
        pbar_new = -convolution_sweep(EF, *KF, *JF, Nu[::-1], np.zeros(n))[::-1]
        delta = max(np.abs(xbar_new - xbar).max(), np.abs(pbar_new - pbar).max())
        xbar, pbar = xbar_new, pbar_new
        if not np.isfinite(delta) or np.abs(xbar).max() > cap:
            raise BvpError(
                f"iterate blew past the cap after {iterations} sweeps "
                f"(|xb| = {np.abs(xbar).max():.3e})")
        if delta < settings.bvp_tol:
            converged = True
            break

    x, p = dt.to_full(xbar, pbar)
    return t, x, p, iterations, converged


def extend_backward(sys: ControlSystem, x0: np.ndarray, p0: np.ndarray,
                    t_minus: float, settings: GenerationSettings = GenerationSettings()):
    """Integrate the characteristic (x, p) equations backward over
    [t_minus, 0) with an adaptive embedded Runge-Kutta pair.

    Returns (t, x, p) at ``n_backward`` uniform output times, in
    increasing t, excluding t = 0.  An empty extension is returned for
    t_minus = 0.  Integrator stall raises :class:`ExtensionError` with the
    partial result attached; leaving the domain box rejects likewise.
    """
    n = sys.n
    if t_minus == 0.0:
        empty = np.zeros((0, n))
        return np.zeros(0), empty, empty.copy()
    if t_minus > 0:
        raise ValueError("t_minus must be nonpositive")

    def rhs(_t, z):
        X = z[:n].reshape(1, n)
        P = z[n:].reshape(1, n)
        Xd, Pd = contact_rhs_batch(sys, X, P)
        return np.concatenate([Xd[0], Pd[0]])

    t_eval = np.linspace(t_minus, 0.0, settings.n_backward + 1)[:-1]
    sol = scipy.integrate.solve_ivp(
        rhs, (0.0, t_minus), np.concatenate([x0, p0]),
        method="RK45", rtol=settings.integrator_tol, atol=settings.integrator_tol,
        t_eval=t_eval[::-1], dense_output=False)
    if not sol.success:
        raise ExtensionError(f"stiff extension: {sol.message}",
                             partial=(sol.t[::-1], sol.y.T[::-1]))
    x = sol.y[:n].T[::-1]
    p = sol.y[n:].T[::-1]
    box = 10.0 * sys.domain_radius
    if np.abs(x).max(initial=0.0) > box:
        raise ExtensionError("backward extension left the domain box",
                             partial=(t_eval, np.hstack([x, p])))
    return t_eval, x, p


def _hamiltonian_batch(sys: ControlSystem, X: np.ndarray, V: np.ndarray,
                       P: np.ndarray) -> np.ndarray:
    F = sys.drift_batch(X) if sys.drift_batch is not None else \
        np.stack([np.asarray(sys.drift(x), dtype=float) for x in X])
    M = coupling_matrix(sys, np.zeros(sys.n)) if sys.constant_inputs else None
    if M is not None:
        pMp = np.einsum("ij,ij->i", P @ M.T, P)
    else:
        pMp = np.array([p @ coupling_matrix(sys, x) @ p for x, p in zip(X, P)])
    return (np.einsum("ij,ij->i", P, F) + pMp - sys.alpha * V
            + np.einsum("ij,ij->i", X @ sys.Q.T, X))


def recover_value(sys: ControlSystem, t: np.ndarray, x: np.ndarray, p: np.ndarray,
                  P: np.ndarray, method: str = "ode",
                  terminal: Optional[float] = None) -> np.ndarray:
    """Value samples along a characteristic (t, x, p) path.

    ``ode`` integrates dV/dt = (dx/dt)^T p backward from the terminal
    condition V(T) = x(T)^T P x(T) / 2 (quadratic tail of the value);
    ``algebraic`` evaluates the zero-level relation of the contact
    Hamiltonian pointwise, which needs alpha > 0.  The grid must be
    uniform for the ode method.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if method == "algebraic":
        if sys.alpha <= 0:
            raise ValueRecoveryError("algebraic value recovery needs alpha > 0")
        zero_v = np.zeros(x.shape[0])
        return _hamiltonian_batch(sys, x, zero_v, p) / sys.alpha
    if method != "ode":
        raise ValueError(f"unknown value-recovery method {method!r}")
    if terminal is None:
        terminal = 0.5 * float(x[-1] @ P @ x[-1])
    xdot, _ = contact_rhs_batch(sys, x, p)
    vdot = np.einsum("ij,ij->i", xdot, p)
    dt_grid = float(t[1] - t[0])
    if not np.allclose(np.diff(t), dt_grid, rtol=1e-8, atol=1e-12):
        raise ValueError("ode value recovery expects a uniform grid")
    cum = cumulative_quadratic(vdot, dt_grid)
    return terminal - (cum[-1] - cum)


def generate_trajectory(sys: ControlSystem, dtrans: DecouplingTransform,
                        x0: np.ndarray, T_inf: float,
                        settings: GenerationSettings = GenerationSettings()) -> Trajectory:
    """One full stable-manifold trajectory: local BVP on [0, T_inf],
    backward extension to ``settings.t_minus``, value recovery, and the
    contact-Hamiltonian residual over the combined path."""
    t_loc, x_loc, p_loc, iterations, converged = solve_local_bvp(
        sys, dtrans, x0, T_inf, settings)
    h = t_loc[1] - t_loc[0]

    v_loc = recover_value(sys, t_loc, x_loc, p_loc, dtrans.P, method="ode")
    discrepancy = 0.0
    if sys.alpha > 0:
        v_alg = recover_value(sys, t_loc, x_loc, p_loc, dtrans.P, method="algebraic")
        discrepancy = float(np.abs(v_loc - v_alg).max())
        if settings.value_method == "algebraic":
            v_loc = v_alg

    if settings.t_minus < 0.0:
        t_neg, x_neg, p_neg = extend_backward(
            sys, x_loc[0], p_loc[0], settings.t_minus, settings)
        if t_neg.size:
            # V on the extension: integrate dV/dt backward from V(0)
            x_ext = np.concatenate([x_neg, x_loc[:1]])
            p_ext = np.concatenate([p_neg, p_loc[:1]])
            xd_ext, _ = contact_rhs_batch(sys, x_ext, p_ext)
            vd = np.einsum("ij,ij->i", xd_ext, p_ext)
            grid = np.concatenate([t_neg, [0.0]])
            cum = cumulative_quadratic(vd, float(grid[1] - grid[0]))
            v_neg = v_loc[0] - (cum[-1] - cum[:-1])
        else:
            v_neg = np.zeros(0)
    else:
        t_neg = np.zeros(0)
        x_neg = np.zeros((0, sys.n))
        p_neg = np.zeros((0, sys.n))
        v_neg = np.zeros(0)

    stride = max(int(settings.store_stride), 1)
    keep = np.zeros(t_loc.size, dtype=bool)
    keep[::stride] = True
    keep[0] = keep[-1] = True

    t_all = np.concatenate([t_neg, t_loc[keep]])
    x_all = np.concatenate([x_neg, x_loc[keep]])
    p_all = np.concatenate([p_neg, p_loc[keep]])
    v_all = np.concatenate([v_neg, v_loc[keep]])

    resid_loc = np.abs(_hamiltonian_batch(sys, x_loc, v_loc, p_loc)).max()
    resid_neg = np.abs(_hamiltonian_batch(sys, x_neg, v_neg, p_neg)).max(initial=0.0)
    x0_norm = np.linalg.norm(x_loc[0])
    tail = np.linalg.norm(x_loc[-1]) / x0_norm if x0_norm > 0 else 0.0
    return Trajectory(
        t=t_all, x=x_all, p=p_all, V=v_all,
        h_residual_max=float(max(resid_loc, resid_neg)),
        bvp_iterations=iterations,
        converged=converged,
        value_discrepancy=discrepancy,
        tail_ratio=float(tail),
    )


@dataclass
class Dataset:
    """Flat sample table (x, p, V) drawn from accepted trajectories, with
    trajectory ids, sample times, and the generation metadata."""

    x: np.ndarray
    p: np.ndarray
    V: np.ndarray
    traj_id: np.ndarray
    t: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.p[idx], self.V[idx],
                       self.traj_id[idx], self.t[idx], dict(self.meta))

    @staticmethod
    def concatenate(parts) -> "Dataset":
        return Dataset(
            np.concatenate([d.x for d in parts]),
            np.concatenate([d.p for d in parts]),
            np.concatenate([d.V for d in parts]),
            np.concatenate([d.traj_id for d in parts]),
            np.concatenate([d.t for d in parts]),
            dict(parts[0].meta),
        )


def _sphere_point(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.standard_normal(n)
    nrm = np.linalg.norm(v)
    while nrm < 1e-12:  # pragma: no cover - essentially impossible
        v = rng.standard_normal(n)
        nrm = np.linalg.norm(v)
    return radius * v / nrm


def _sample_trajectory(rng: np.random.Generator, traj: Trajectory,
                       n_pos: int, n_neg: int):
    pos = np.flatnonzero(traj.t >= 0.0)
    neg = np.flatnonzero(traj.t < 0.0)
    if n_pos > pos.size or n_neg > neg.size:
        raise GenerationError(
            f"trajectory stores {pos.size} forward / {neg.size} backward points; "
            f"cannot draw {n_pos}/{n_neg}")
    sel = np.sort(np.concatenate([
        rng.choice(pos, size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=int),
        rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=int),
    ]))
    return sel


def generate_dataset(sys: ControlSystem, cert: StabilityCertificate,
                     dtrans: DecouplingTransform, count: int, radius: float,
                     n_pos: int, n_neg: int, seed: int,
                     T_inf: Optional[float] = None,
                     settings: GenerationSettings = GenerationSettings(),
                     initial_points: Optional[np.ndarray] = None):
    """Generate ``count`` stable-manifold trajectories and sample them.

    Initial states are drawn uniformly on the sphere of the given radius
    (deterministically from ``seed``; trajectory i uses the sub-stream
    (seed, i)), and the decoupled initial condition is the state itself.
    Each accepted trajectory contributes ``n_pos`` samples at t >= 0 and
    ``n_neg`` at t < 0.  Returns (dataset, rejected_count); an acceptance
    rate below 50% raises :class:`GenerationError` with diagnostics.
    """
    if T_inf is None:
        T_inf = pick_horizon(cert.stable_margin, settings.tail_tol)
    parts = []
    diagnostics = []
    rejected = 0
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        x0 = initial_points[i] if initial_points is not None \
            else _sphere_point(rng, sys.n, radius)
        try:
            traj = generate_trajectory(sys, dtrans, x0, T_inf, settings)
        except (BvpError, ExtensionError) as exc:
            rejected += 1
            diagnostics.append({"traj": i, "reason": str(exc)})
            continue
        if not traj.accepted(settings.residual_tol):
            rejected += 1
            diagnostics.append({
                "traj": i,
                "reason": "validation",
                "converged": traj.converged,
                "h_residual_max": traj.h_residual_max,
            })
            continue
        sel = _sample_trajectory(rng, traj, n_pos, n_neg)
        parts.append(Dataset(
            x=traj.x[sel], p=traj.p[sel], V=traj.V[sel],
            traj_id=np.full(sel.size, i, dtype=np.int64), t=traj.t[sel],
        ))
    meta = {
        "seed": seed, "count": count, "radius": radius,
        "n_pos": n_pos, "n_neg": n_neg, "T_inf": T_inf,
        "rejected": rejected,
        "tolerances": {
            "bvp_tol": settings.bvp_tol,
            "residual_tol": settings.residual_tol,
            "integrator_tol": settings.integrator_tol,
            "tail_tol": settings.tail_tol,
            "t_minus": settings.t_minus,
            "grid_dt": settings.grid_dt,
        },
    }
    if count > 0 and rejected > count / 2:
        raise GenerationError(
            f"only {count - rejected}/{count} trajectories accepted",
            diagnostics=diagnostics)
    if parts:
        ds = Dataset.concatenate(parts)
        ds.meta = meta
    else:
        n = sys.n
        ds = Dataset(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0),
                     np.zeros(0, dtype=np.int64), np.zeros(0), meta)
    return ds, rejected


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_dataset_jsonl(ds: Dataset, path) -> None:
    """One meta header line, then one JSON object per sample.  Floats are
    emitted through repr and round-trip bit-exactly."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": ds.meta}) + "\n")
        for i in range(len(ds)):
            rec = {
                "traj": int(ds.traj_id[i]),
                "t": float(ds.t[i]),
                "x": [float(v) for v in ds.x[i]],
                "p": [float(v) for v in ds.p[i]],
                "V": float(ds.V[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset_jsonl(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        meta = header.get("meta", {})
        xs, ps, vs, ids, ts = [], [], [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            xs.append(rec["x"])
            ps.append(rec["p"])
            vs.append(rec["V"])
            ids.append(rec["traj"])
            ts.append(rec["t"])
    if xs:
        return Dataset(np.array(xs), np.array(ps), np.array(vs),
                       np.array(ids, dtype=np.int64), np.array(ts), meta)
    return Dataset(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0),
                   np.zeros(0, dtype=np.int64), np.zeros(0), meta)


def trajectory_to_csv(sys: ControlSystem, traj: Trajectory, path) -> None:
    """Full trajectory table: t, x_1..x_n, p_1..p_n, V, H_residual."""
    n = sys.n
    resid = _hamiltonian_batch(sys, traj.x, traj.V, traj.p)
    header = (["t"] + [f"x_{i+1}" for i in range(n)]
              + [f"p_{i+1}" for i in range(n)] + ["V", "H_residual"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(traj.t.size):
            row = ([repr(float(traj.t[i]))]
                   + [repr(float(v)) for v in traj.x[i]]
                   + [repr(float(v)) for v in traj.p[i]]
                   + [repr(float(traj.V[i])), repr(float(resid[i]))])
            fh.write(",".join(row) + "\n")
