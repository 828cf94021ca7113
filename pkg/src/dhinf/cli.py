"""Command-line surface: config handling and the pipeline commands.

Commands (each takes ``--config PATH`` plus stage-specific flags):

* ``analyze``   — linear analysis report (discount bound, Riccati
  solution, margins, closed-loop spectrum) as JSON.
* ``gen-data``  — stable-manifold trajectory generation to a JSONL
  dataset.
* ``train``     — fit the approximator to a dataset, write a JSON
  checkpoint and a loss-history CSV.
* ``simulate``  — closed-loop run under a disturbance expression, CSV
  trace out.
* ``gain``      — discounted-gain certification, JSON certificate out.
* ``track``     — sampled-reference tracking, CSV trace out.

Exit codes: 0 success, 1 validation failure (gates not met, generation
or training failed), 2 usage/config error.  All randomness is governed
by the config seeds, overridable with ``--seed``; outputs contain no
timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import sys as _sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import approximator as apx
from . import closedloop as cl
from . import manifold as mf
from .errors import ConfigError, DhinfError
from .linear_analysis import build_decoupling, linearize, solve_gare
from .model import AllenCahnConfig, ControlSystem, build_allen_cahn, scalar_benchmark
from .signals import parse_signal

CONFIG_VERSION = 1

_SYSTEM_KEYS = {"name", "N", "sigma", "gamma", "alpha_fraction", "alpha",
                "domain_radius", "a"}
_GENERATION_KEYS = {"count", "radius", "n_pos", "n_neg", "seed", "T_inf",
                    "t_minus", "grid_dt", "bvp_tol", "max_iter", "residual_tol",
                    "integrator_tol", "tail_tol", "store_stride", "n_backward"}
_TRAINING_KEYS = {"hidden", "epochs", "base_lr", "sigma1", "sigma2", "sigma3",
                  "nu", "seed", "batch_size", "val_fraction", "lr_half_period",
                  "refine_rounds", "val_threshold", "refine_q", "refine_per_point"}
_SIMULATION_KEYS = {"T", "integrator_tol", "n_out", "x0", "x0_radius", "x0_seed",
                    "disturbance", "gamma_threshold", "update_rate_hz", "track_T",
                    "reference", "discount_floor", "epsilon_budget"}


def _check_keys(section: dict, allowed: set, name: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) in {name}: {sorted(unknown)}")


def _parse_gamma(value) -> float:
    if value in ("inf", "Infinity", None):
        return math.inf
    g = float(value)
    if not g > 0:
        raise ConfigError("gamma must be positive")
    return g


@dataclass
class RunConfig:
    """Validated configuration document."""

    system: dict
    generation: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        _check_keys(doc, {"version", "system", "generation", "training",
                          "simulation"}, "config")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(
                f"config version must be {CONFIG_VERSION}, got {doc.get('version')!r}")
        if "system" not in doc:
            raise ConfigError("config needs a 'system' section")
        cfg = RunConfig(system=doc["system"],
                        generation=doc.get("generation", {}),
                        training=doc.get("training", {}),
                        simulation=doc.get("simulation", {}))
        _check_keys(cfg.system, _SYSTEM_KEYS, "system")
        _check_keys(cfg.generation, _GENERATION_KEYS, "generation")
        _check_keys(cfg.training, _TRAINING_KEYS, "training")
        _check_keys(cfg.simulation, _SIMULATION_KEYS, "simulation")
        if cfg.system.get("name") not in ("allen_cahn", "scalar_lq"):
            raise ConfigError("system.name must be 'allen_cahn' or 'scalar_lq'")
        return cfg


def build_pipeline(cfg: RunConfig):
    """Resolve the configured system, its certificate, and the transform.

    For the Allen-Cahn system the discount is alpha_fraction times the
    computed admissible bound; the scalar test system takes alpha
    directly.
    """
    spec = cfg.system
    gamma = _parse_gamma(spec.get("gamma", "inf"))
    if spec["name"] == "allen_cahn":
        ac = AllenCahnConfig(
            N=int(spec.get("N", 31)),
            sigma=float(spec.get("sigma", 0.1)),
            gamma=gamma,
            alpha_fraction=float(spec.get("alpha_fraction", 0.5)),
            domain_radius=float(spec.get("domain_radius", 0.8)),
        )
        sys_ = build_allen_cahn(ac)
        lin = linearize(sys_)
        from .linear_analysis import alpha_bar as _alpha_bar
        alpha = ac.alpha_fraction * _alpha_bar(lin)
        sys_ = sys_.with_alpha(alpha)
    else:
        alpha = float(spec.get("alpha", 0.0))
        sys_ = scalar_benchmark(gamma=gamma, alpha=alpha,
                                a=float(spec.get("a", -1.0)),
                                domain_radius=float(spec.get("domain_radius", 1.0)))
        lin = linearize(sys_)
    cert = solve_gare(lin, sys_.alpha)
    dtrans = build_decoupling(lin, cert)
    return sys_, lin, cert, dtrans


def _settings_from(cfg: RunConfig) -> mf.GenerationSettings:
    g = cfg.generation
    return mf.GenerationSettings(
        grid_dt=g.get("grid_dt"),
        bvp_tol=float(g.get("bvp_tol", 1e-8)),
        max_iter=int(g.get("max_iter", 100)),
        residual_tol=float(g.get("residual_tol", 1e-5)),
        integrator_tol=float(g.get("integrator_tol", 1e-9)),
        tail_tol=float(g.get("tail_tol", 1e-5)),
        t_minus=float(g.get("t_minus", -0.015)),
        store_stride=int(g.get("store_stride", 1)),
        n_backward=int(g.get("n_backward", 40)),
    )


def _emit(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")


def cmd_analyze(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, _ = build_pipeline(cfg)
    report = cert.to_dict()
    report["T_inf"] = mf.pick_horizon(cert.stable_margin,
                                      float(cfg.generation.get("tail_tol", 1e-5)))
    _emit(report, args.out)
    return 0


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, dtrans = build_pipeline(cfg)
    g = cfg.generation
    seed = args.seed if args.seed is not None else int(g.get("seed", 0))
    count = args.count if args.count is not None else int(g.get("count", 100))
    radius = args.radius if args.radius is not None else float(g.get("radius", 0.8))
    settings = _settings_from(cfg)
    ds, rejected = mf.generate_dataset(
        sys_, cert, dtrans, count=count, radius=radius,
        n_pos=int(g.get("n_pos", 22)), n_neg=int(g.get("n_neg", 4)),
        seed=seed, T_inf=g.get("T_inf"), settings=settings)
    out = args.out or "dataset.jsonl"
    mf.save_dataset_jsonl(ds, out)
    print(f"wrote {len(ds)} samples from {count - rejected}/{count} "
          f"accepted trajectories to {out}")
    return 0


def _load_train_val(args, cfg: RunConfig):
    if not args.data:
        raise ConfigError("train needs --data pointing at a JSONL dataset")
    try:
        ds = mf.load_dataset_jsonl(args.data)
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {args.data}")
    if args.val_data:
        try:
            val = mf.load_dataset_jsonl(args.val_data)
        except FileNotFoundError:
            raise ConfigError(f"validation dataset file not found: {args.val_data}")
        return ds, val
    frac = float(cfg.training.get("val_fraction", 0.1))
    n_val = max(int(len(ds) * frac), 1)
    idx = np.arange(len(ds))
    return ds.subset(idx[:-n_val]), ds.subset(idx[-n_val:])


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, dtrans = build_pipeline(cfg)
    tr = cfg.training
    train_ds, val_ds = _load_train_val(args, cfg)
    seed = args.seed if args.seed is not None else int(tr.get("seed", 0))
    epochs = args.epochs if args.epochs is not None else int(tr.get("epochs", 4000))
    weights = apx.LossWeights(
        sigma1=float(tr.get("sigma1", 1.0)),
        sigma2=float(tr.get("sigma2", 0.01)),
        sigma3=float(tr.get("sigma3", 0.01)),
        nu=float(tr.get("nu", 2.0)))
    theta = apx.init_params(sys_.n, hidden=tuple(tr.get("hidden", (60, 60, 60))),
                            seed=seed)
    rounds = int(tr.get("refine_rounds", 0))
    base_lr = float(tr.get("base_lr", 1e-3))
    half = int(tr.get("lr_half_period", 1500))
    batch = tr.get("batch_size")
    if rounds > 0:
        theta, reports, _ = apx.train_with_refinement(
            theta, train_ds, val_ds, sys_, cert, dtrans, epochs, base_lr,
            weights, seed=seed,
            val_threshold=float(tr.get("val_threshold", 1e-2)),
            max_rounds=rounds, q=float(tr.get("refine_q", 0.1)),
            per_point=int(tr.get("refine_per_point", 1)),
            settings=_settings_from(cfg))
        report = reports[-1]
    else:
        theta, report = apx.train(theta, train_ds, val_ds, epochs, base_lr,
                                  weights, cert.P, seed=seed,
                                  batch_size=None if batch is None else int(batch),
                                  lr_half_period=half)
    out = args.out or "checkpoint.json"
    apx.save_checkpoint(theta, out, meta={
        "seed": seed, "epochs": epochs,
        "final_train_loss": report.final_train_loss,
        "final_val_loss": report.final_val_loss,
        "jacobian_gap": report.jacobian_gap,
    })
    apx.save_loss_history(report, args.loss_out or (out + ".loss.csv"))
    print(f"final train loss {report.final_train_loss:.3e}, "
          f"val loss {report.final_val_loss:.3e}, "
          f"jacobian gap {report.jacobian_gap:.3e}")
    return 0


def _initial_state(cfg: RunConfig, args, sys_: ControlSystem) -> np.ndarray:
    sim = cfg.simulation
    mode = sim.get("x0", "zero")
    if mode == "zero":
        return np.zeros(sys_.n)
    if mode == "sphere":
        seed = args.seed if args.seed is not None else int(sim.get("x0_seed", 0))
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(sys_.n)
        return float(sim.get("x0_radius", 0.4)) * v / np.linalg.norm(v)
    raise ConfigError("simulation.x0 must be 'zero' or 'sphere'")


def _load_model(args) -> apx.ApproximatorParams:
    if not args.model:
        raise ConfigError("this command needs --model pointing at a checkpoint")
    try:
        return apx.load_checkpoint(args.model)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint file not found: {args.model}")


def _disturbance_fn(expr_src: Optional[str], sys_: ControlSystem):
    if not expr_src or expr_src == "0":
        return lambda t, x: np.zeros(sys_.l), "0"
    expr = parse_signal(expr_src)
    ones = np.ones(sys_.l)
    return (lambda t, x: expr(t) * ones), expr_src


def _run_simulation(cfg: RunConfig, args, sys_: ControlSystem,
                    theta: apx.ApproximatorParams) -> cl.SimulationResult:
    sim = cfg.simulation
    controller = apx.nn_controller(theta, sys_)
    dist_src = args.disturbance if args.disturbance is not None \
        else sim.get("disturbance", "0")
    disturbance, _ = _disturbance_fn(dist_src, sys_)
    T = sim.get("T")
    if args.horizon is not None:
        T = args.horizon
    if T is None:
        T = cl.gain_horizon(sys_.alpha, float(sim.get("discount_floor", 1e-6))) \
            if sys_.alpha > 0 else 20.0
    x0 = _initial_state(cfg, args, sys_)
    return cl.simulate(sys_, controller, disturbance, x0, float(T),
                       integrator_tol=float(sim.get("integrator_tol", 1e-9)),
                       n_out=int(sim.get("n_out", 500)))


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, _ = build_pipeline(cfg)
    theta = _load_model(args)
    result = _run_simulation(cfg, args, sys_, theta)
    out = args.out or "trace.csv"
    cl.save_trace_csv(result, out)
    print(f"wrote {result.t.size}-point trace to {out}; "
          f"I_z(T) = {result.I_z[-1]:.6g}, I_d(T) = {result.I_d[-1]:.6g}")
    return 0


def cmd_gain(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, _ = build_pipeline(cfg)
    theta = _load_model(args)
    result = _run_simulation(cfg, args, sys_, theta)
    sim = cfg.simulation
    threshold = args.gamma_threshold if args.gamma_threshold is not None \
        else sim.get("gamma_threshold")
    if threshold is None:
        if not math.isfinite(sys_.gamma):
            raise ConfigError("gain needs --gamma-threshold for an infinite-gamma system")
        threshold = sys_.gamma + float(sim.get("epsilon_budget", 0.1))
    certificate = cl.discounted_gain(result, float(threshold), theta=theta,
                                     epsilon_budget=float(sim.get("epsilon_budget", 0.1)))
    _emit(certificate.to_dict(), args.out)
    return 0 if certificate.passed else 1


def cmd_track(args) -> int:
    cfg = RunConfig.load(args.config)
    sys_, lin, cert, _ = build_pipeline(cfg)
    theta = _load_model(args)
    sim = cfg.simulation
    ref_src = args.reference if args.reference is not None \
        else sim.get("reference", "sin(t)")
    expr = parse_signal(ref_src)
    rate = args.rate if args.rate is not None \
        else float(sim.get("update_rate_hz", 500.0))
    T = args.horizon if args.horizon is not None else float(sim.get("track_T", 30.0))
    x0 = _initial_state(cfg, args, sys_)
    result = cl.track(sys_, theta, lambda i, t: expr(t), rate, T, x0=x0)
    out = args.out or "tracking.csv"
    n = sys_.n
    header = (["t"] + [f"x_{i+1}" for i in range(n)]
              + [f"r_{i+1}" for i in range(n)] + ["error"])
    with open(out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(result.t.size):
            row = ([repr(float(result.t[i]))]
                   + [repr(float(v)) for v in result.x[i]]
                   + [repr(float(v)) for v in result.reference[i]]
                   + [repr(float(result.error[i]))])
            fh.write(",".join(row) + "\n")
    tail = result.max_error_after.get(5.0, math.nan)
    print(f"wrote tracking trace to {out}; max error after t=5: {tail:.4g}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the JSON config")
    p.add_argument("--seed", type=int, default=None,
                   help="override the stage seed from the config")
    p.add_argument("--out", default=None, help="output path")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dhinf",
        description="Discounted H-infinity synthesis via stable manifolds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="linear analysis report")
    _add_common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gen-data", help="generate a stable-manifold dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the approximator")
    _add_common(p)
    p.add_argument("--data", required=True, help="training dataset (JSONL)")
    p.add_argument("--val-data", default=None, help="validation dataset (JSONL)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--loss-out", default=None, help="loss history CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="closed-loop simulation")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint (JSON)")
    p.add_argument("--disturbance", default=None, help="signal expression in t")
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gain", help="discounted L2-gain certification")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--disturbance", default=None)
    p.add_argument("--gamma-threshold", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(fn=cmd_gain)

    p = sub.add_parser("track", help="sampled-reference tracking")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--reference", default=None, help="signal expression in t")
    p.add_argument("--rate", type=float, default=None, help="update rate (Hz)")
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(fn=cmd_track)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2
    except DhinfError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
