"""Zero-shifted feedforward approximator of the manifold graph (p, V),
its three-term loss, adaptive-moment training, adaptive data refinement,
and the induced feedback controller.

The network is a plain trunk of sine-activated hidden layers with n + 1
linear outputs; the published output is the raw output minus the raw
output at the origin, so (p(0), V(0)) = (0, 0) holds exactly for every
parameter state.  All gradients — including the one of the
input-Jacobian penalty tying dp/dx(0) to the Riccati solution — are
computed by hand in closed form, so the whole trainer is plain numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import RefineError, TrainingDivergedError
from .linear_analysis import DecouplingTransform, StabilityCertificate
from .manifold import Dataset, GenerationSettings, generate_dataset
from .model import ControlSystem

__all__ = [
    "ApproximatorParams",
    "LossWeights",
    "TrainReport",
    "init_params",
    "forward",
    "forward_batch",
    "jacobian_at_zero",
    "loss",
    "loss_and_grad",
    "learning_rate",
    "train",
    "adaptive_refine",
    "train_with_refinement",
    "nn_controller",
    "save_checkpoint",
    "load_checkpoint",
    "save_loss_history",
]


@dataclass
class ApproximatorParams:
    """Weights and biases of the sine-activated trunk.  ``widths`` runs
    input, hidden..., output (= state dimension + 1)."""

    weights: list
    biases: list
    widths: list
    activation: str = "sine"
    seed: int = 0

    @property
    def n(self) -> int:
        return self.widths[0]

    def copy(self) -> "ApproximatorParams":
        return ApproximatorParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            list(self.widths), self.activation, self.seed)


def init_params(n: int, hidden=(60, 60, 60), seed: int = 0) -> ApproximatorParams:
    """Seeded uniform initialization with per-layer bound
    sqrt(6 / (fan_in + fan_out))."""
    widths = [n, *hidden, n + 1]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fi, fo in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-bound, bound, size=(fo, fi)))
        biases.append(rng.uniform(-bound, bound, size=fo))
    return ApproximatorParams(weights, biases, widths, seed=seed)


def _forward_raw(theta: ApproximatorParams, X: np.ndarray):
    """Raw network pass; returns (output, preactivations, activations)."""
    acts = [X]
    zs = []
    a = X
    for k in range(len(theta.weights) - 1):
        z = a @ theta.weights[k].T + theta.biases[k]
        zs.append(z)
        a = np.sin(z)
        acts.append(a)
    out = a @ theta.weights[-1].T + theta.biases[-1]
    return out, zs, acts


def forward_batch(theta: ApproximatorParams, X: np.ndarray):
    """Zero-shifted outputs for a row stack X: returns (P, V) of shapes
    (B, n) and (B,)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out, _, _ = _forward_raw(theta, X)
    out0, _, _ = _forward_raw(theta, np.zeros((1, theta.n)))
    shifted = out - out0
    return shifted[:, :theta.n], shifted[:, theta.n]


def forward(theta: ApproximatorParams, x: np.ndarray):
    """Zero-shifted (p, V) at a single state."""
    P, V = forward_batch(theta, np.asarray(x, dtype=float).reshape(1, -1))
    return P[0], float(V[0])


def jacobian_at_zero(theta: ApproximatorParams) -> np.ndarray:
    """Exact input-Jacobian of the p-output at the origin (the zero-shift
    constant drops out of the derivative)."""
    n = theta.n
    _, zs0, _ = _forward_raw(theta, np.zeros((1, n)))
    J = theta.weights[-1][:n]
    for k in range(len(theta.weights) - 2, -1, -1):
        J = (J * np.cos(zs0[k][0])) @ theta.weights[k]
    return J


@dataclass
class LossWeights:
    """Weights of the three loss terms (mean-power, max, Jacobian gap)
    plus the mean-term exponent nu and the matrix norm used for the gap
    (Frobenius by default; 'spectral' selects the operator 2-norm)."""

    sigma1: float = 1.0
    sigma2: float = 0.01
    sigma3: float = 0.01
    nu: float = 2.0
    jacobian_norm: str = "frobenius"

    def __post_init__(self):
        if min(self.sigma1, self.sigma2, self.sigma3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.sigma1, self.sigma2, self.sigma3) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.nu < 1:
            raise ValueError("nu must be at least 1")
        if self.jacobian_norm not in ("frobenius", "spectral"):
            raise ValueError("jacobian_norm must be 'frobenius' or 'spectral'")


def _targets(ds: Dataset) -> np.ndarray:
    return np.hstack([ds.p, ds.V[:, None]])


def _jac_gap(theta: ApproximatorParams, P: np.ndarray, w: LossWeights):
    gap = jacobian_at_zero(theta) - P
    if w.jacobian_norm == "spectral":
        U, s, Vt = np.linalg.svd(gap)
        return float(s[0]), np.outer(U[:, 0], Vt[0])
    nrm = float(np.linalg.norm(gap))
    direction = gap / nrm if nrm > 0 else np.zeros_like(gap)
    return nrm, direction


def loss(theta: ApproximatorParams, ds: Dataset, w: LossWeights,
         P: np.ndarray) -> float:
    """Three-term fit loss over a dataset slice:
    sigma1 * mean ||err_i||^nu + sigma2 * max ||err_i||
    + sigma3 * ||dp/dx(0) - P||."""
    if len(ds) == 0:
        raise ValueError("loss needs a nonempty batch")
    pred_p, pred_v = forward_batch(theta, ds.x)
    err = np.hstack([pred_p, pred_v[:, None]]) - _targets(ds)
    nrm = np.linalg.norm(err, axis=1)
    value = w.sigma1 * float(np.mean(nrm**w.nu)) + w.sigma2 * float(nrm.max())
    if w.sigma3 > 0:
        value += w.sigma3 * _jac_gap(theta, P, w)[0]
    return value


def loss_and_grad(theta: ApproximatorParams, ds: Dataset, w: LossWeights,
                  P: np.ndarray):
    """Loss with its exact parameter gradient.

    The data terms backpropagate through both the x-pass and the shared
    origin pass of the zero shift (the latter with opposite sign); the
    max term propagates through its achieving sample; the Jacobian-gap
    term combines the explicit weight appearances in the layer-product
    Jacobian with the implicit dependence through the origin
    preactivations.
    """
    if len(ds) == 0:
        raise ValueError("loss needs a nonempty batch")
    X = ds.x
    B = X.shape[0]
    n = theta.n
    Ws, bs = theta.weights, theta.biases
    L = len(Ws)

    out, zs, acts = _forward_raw(theta, X)
    out0, zs0, acts0 = _forward_raw(theta, np.zeros((1, n)))
    err = (out - out0) - _targets(ds)
    nrm = np.linalg.norm(err, axis=1)
    imax = int(np.argmax(nrm))
    mean_term = float(np.mean(nrm**w.nu))
    max_term = float(nrm[imax])
    value = w.sigma1 * mean_term + w.sigma2 * max_term

    # d(loss)/d(shifted output)
    safe = np.maximum(nrm, 1e-300)
    dout = w.sigma1 * (w.nu / B) * (safe ** (w.nu - 2.0))[:, None] * err
    if w.sigma2 > 0 and nrm[imax] > 0:
        dout[imax] += w.sigma2 * err[imax] / nrm[imax]

    gW = [np.zeros_like(W) for W in Ws]
    gb = [np.zeros_like(b) for b in bs]

    delta = dout
    for k in range(L - 1, -1, -1):
        gW[k] += delta.T @ acts[k]
        gb[k] += delta.sum(axis=0)
        if k > 0:
            delta = (delta @ Ws[k]) * np.cos(zs[k - 1])
    delta = -dout.sum(axis=0, keepdims=True)
    for k in range(L - 1, -1, -1):
        gW[k] += delta.T @ acts0[k]
        gb[k] += delta.sum(axis=0)
        if k > 0:
            delta = (delta @ Ws[k]) * np.cos(zs0[k - 1])

    if w.sigma3 > 0:
        gap_norm, direction = _jac_gap(theta, P, w)
        value += w.sigma3 * gap_norm
        E = w.sigma3 * direction
        cos0 = [np.cos(z[0]) for z in zs0]
        # prefix input-Jacobians B_k and raw layer maps M_k = W_k B_{k-1}
        Bk = [np.eye(n)]
        Mk = []
        for k in range(L - 1):
            M = Ws[k] @ Bk[-1]
            Mk.append(M)
            Bk.append(cos0[k][:, None] * M)
        # suffix transposed products G_k
        Gk = [None] * (L - 1)
        Gcur = Ws[-1][:n].T @ E
        for k in range(L - 2, -1, -1):
            Gk[k] = Gcur
            if k > 0:
                Gcur = Ws[k].T @ (cos0[k][:, None] * Gcur)
        gW[-1][:n] += E @ Bk[-1].T
        inject = []
        for k in range(L - 1):
            gW[k] += (cos0[k][:, None] * Gk[k]) @ Bk[k].T
            inject.append(-np.sin(zs0[k][0]) * np.einsum("ij,ij->i", Gk[k], Mk[k]))
        delta = np.zeros((1, theta.widths[-2]))
        for k in range(L - 2, -1, -1):
            delta = delta + inject[k][None, :]
            gW[k] += delta.T @ acts0[k]
            gb[k] += delta.sum(axis=0)
            if k > 0:
                delta = (delta @ Ws[k]) * np.cos(zs0[k - 1])

    return value, gW, gb


def learning_rate(base_lr: float, epoch: int, half_period: int = 1500) -> float:
    """Stepwise-halving schedule: base_lr * (1/2)^floor(epoch / period)."""
    return base_lr * 0.5 ** (epoch // half_period)


@dataclass
class TrainReport:
    """Per-epoch history and final summary of a training run."""

    epochs: int
    train_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    final_train_loss: float = math.nan
    final_val_loss: float = math.nan
    max_pointwise_error: float = math.nan
    jacobian_gap: float = math.nan


def _max_pointwise_error(theta: ApproximatorParams, ds: Dataset) -> float:
    pred_p, pred_v = forward_batch(theta, ds.x)
    err = np.hstack([pred_p, pred_v[:, None]]) - _targets(ds)
    return float(np.linalg.norm(err, axis=1).max())


def train(theta: ApproximatorParams, train_ds: Dataset, val_ds: Dataset,
          epochs: int, base_lr: float, w: LossWeights, P: np.ndarray,
          seed: int = 0, batch_size: Optional[int] = None,
          lr_half_period: int = 1500):
    """Adaptive-moment full-batch training (optional deterministic
    mini-batches) under the halving learning-rate schedule.

    Returns (trained params, report).  A non-finite loss raises
    :class:`TrainingDivergedError` carrying the last finite parameters.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation datasets must be nonempty")
    theta = theta.copy()
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    mW = [np.zeros_like(W) for W in theta.weights]
    vW = [np.zeros_like(W) for W in theta.weights]
    mb = [np.zeros_like(b) for b in theta.biases]
    vb = [np.zeros_like(b) for b in theta.biases]
    report = TrainReport(epochs=epochs)
    rng = np.random.default_rng(seed)
    size = len(train_ds)
    step = 0
    last_finite = theta.copy()
    for epoch in range(epochs):
        lr = learning_rate(base_lr, epoch, lr_half_period)
        if batch_size is None or batch_size >= size:
            batches = [np.arange(size)]
        else:
            perm = rng.permutation(size)
            batches = [perm[i:i + batch_size] for i in range(0, size, batch_size)]
        epoch_loss = 0.0
        for idx in batches:
            value, gW, gb, = loss_and_grad(theta, train_ds.subset(idx), w, P)
            if not math.isfinite(value):
                report.final_train_loss = value
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", last_params=last_finite,
                    report=report)
            epoch_loss += value * len(idx) / size
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for i in range(len(theta.weights)):
                mW[i] = beta1 * mW[i] + (1 - beta1) * gW[i]
                vW[i] = beta2 * vW[i] + (1 - beta2) * gW[i] ** 2
                theta.weights[i] -= lr * (mW[i] / c1) / (np.sqrt(vW[i] / c2) + eps)
                mb[i] = beta1 * mb[i] + (1 - beta1) * gb[i]
                vb[i] = beta2 * vb[i] + (1 - beta2) * gb[i] ** 2
                theta.biases[i] -= lr * (mb[i] / c1) / (np.sqrt(vb[i] / c2) + eps)
        last_finite = theta.copy()
        report.train_history.append(epoch_loss)
        report.lr_history.append(lr)
        report.val_history.append(loss(theta, val_ds, w, P))
    if epochs > 0:
        report.final_train_loss = loss(theta, train_ds, w, P)
        report.final_val_loss = report.val_history[-1]
        report.max_pointwise_error = _max_pointwise_error(theta, train_ds)
        report.jacobian_gap = float(np.linalg.norm(jacobian_at_zero(theta) - P))
    return theta, report


def adaptive_refine(theta: ApproximatorParams, ds: Dataset, sys: ControlSystem,
                    cert: StabilityCertificate, dtrans: DecouplingTransform,
                    q: float, per_point: int, seed: int,
                    settings: GenerationSettings = GenerationSettings(),
                    T_inf: Optional[float] = None,
                    angle_scale: float = 0.15) -> Dataset:
    """Grow the dataset around the worst-fit samples.

    Ranks samples by pointwise error, takes the top ``q`` fraction, and
    spawns ``per_point`` fresh boundary-value problems per selected
    sample, seeding each from the sample's state radially projected onto
    the sampling sphere and nudged by isotropic angular noise.  New
    trajectories pass the standard validation gates; returns the union
    dataset.
    """
    if q < 0 or q > 1:
        raise ValueError("q must lie in [0, 1]")
    if q == 0 or per_point == 0 or len(ds) == 0:
        return ds
    radius = float(ds.meta.get("radius", sys.domain_radius))
    pred_p, pred_v = forward_batch(theta, ds.x)
    err = np.linalg.norm(np.hstack([pred_p, pred_v[:, None]]) - _targets(ds), axis=1)
    n_top = max(int(math.ceil(q * len(ds))), 1)
    top = np.argsort(err)[::-1][:n_top]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    seeds_x = []
    for idx in top:
        base = ds.x[idx]
        nrm = np.linalg.norm(base)
        direction = base / nrm if nrm > 1e-12 else _unit(rng, sys.n)
        for _ in range(per_point):
            nudged = direction + angle_scale * rng.standard_normal(sys.n)
            nudged /= np.linalg.norm(nudged)
            seeds_x.append(radius * nudged)
    seeds_x = np.array(seeds_x)
    try:
        extra, rejected = generate_dataset(
            sys, cert, dtrans, count=len(seeds_x), radius=radius,
            n_pos=int(ds.meta.get("n_pos", 22)), n_neg=int(ds.meta.get("n_neg", 4)),
            seed=seed + 1, T_inf=T_inf, settings=settings, initial_points=seeds_x)
    except Exception as exc:
        raise RefineError(f"refinement generation failed: {exc}") from exc
    if len(extra) == 0:
        raise RefineError("all refinement trajectories were rejected")
    extra.traj_id = extra.traj_id + int(ds.traj_id.max(initial=-1)) + 1
    merged = Dataset.concatenate([ds, extra])
    merged.meta = dict(ds.meta)
    merged.meta["refined"] = merged.meta.get("refined", 0) + 1
    return merged


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def train_with_refinement(theta: ApproximatorParams, train_ds: Dataset,
                          val_ds: Dataset, sys: ControlSystem,
                          cert: StabilityCertificate, dtrans: DecouplingTransform,
                          epochs: int, base_lr: float, w: LossWeights,
                          seed: int = 0, val_threshold: float = 1e-2,
                          max_rounds: int = 3, q: float = 0.1,
                          per_point: int = 1,
                          settings: GenerationSettings = GenerationSettings()):
    """Train, then refine-and-retrain until the validation loss clears the
    threshold or the round budget runs out.  Returns
    (theta, reports, final dataset)."""
    reports = []
    ds = train_ds
    theta, report = train(theta, ds, val_ds, epochs, base_lr, w, cert.P, seed=seed)
    reports.append(report)
    rounds = 0
    while report.final_val_loss > val_threshold and rounds < max_rounds:
        rounds += 1
        ds = adaptive_refine(theta, ds, sys, cert, dtrans, q, per_point,
                             seed + rounds, settings=settings)
        theta, report = train(theta, ds, val_ds, epochs, base_lr, w, cert.P,
                              seed=seed + rounds)
        reports.append(report)
    return theta, reports, ds


def nn_controller(theta: ApproximatorParams, sys: ControlSystem):
    """Feedback law u(x) = -(1/2) W^-1 g(x)^T p(x) from the trained
    costate head; u(0) = 0 exactly thanks to the zero shift."""
    Winv = np.linalg.inv(sys.W)

    def controller(x: np.ndarray) -> np.ndarray:
        p, _ = forward(theta, x)
        g = np.atleast_2d(sys.input_map(np.asarray(x, dtype=float)))
        return -0.5 * Winv @ (g.T @ p)

    return controller


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_checkpoint(theta: ApproximatorParams, path, meta: Optional[dict] = None) -> None:
    doc = {
        "widths": list(theta.widths),
        "activation": theta.activation,
        "seed": theta.seed,
        "weights": [[float(v) for v in W.ravel()] for W in theta.weights],
        "biases": [[float(v) for v in b] for b in theta.biases],
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ApproximatorParams:
    with open(path) as fh:
        doc = json.load(fh)
    widths = doc["widths"]
    weights = []
    for k, flat in enumerate(doc["weights"]):
        weights.append(np.array(flat, dtype=float).reshape(widths[k + 1], widths[k]))
    biases = [np.array(b, dtype=float) for b in doc["biases"]]
    return ApproximatorParams(weights, biases, widths,
                              activation=doc.get("activation", "sine"),
                              seed=int(doc.get("seed", 0)))


def save_loss_history(report: TrainReport, path) -> None:
    """CSV history: epoch, lr, train_loss, val_loss."""
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,val_loss\n")
        for e, (lr, tr, va) in enumerate(zip(report.lr_history,
                                             report.train_history,
                                             report.val_history)):
            fh.write(f"{e},{lr!r},{tr!r},{va!r}\n")
