"""Discounted H-infinity synthesis via stable manifolds of contact
Hamiltonian systems: linear analysis and Riccati certificates, manifold
trajectory generation, value/costate approximation, and closed-loop
verification."""

from .model import (
    AllenCahnConfig,
    ControlSystem,
    build_allen_cahn,
    contact_hamiltonian,
    contact_rhs,
    saddle_inputs,
    scalar_benchmark,
)
from .linear_analysis import (
    DecouplingTransform,
    Linearization,
    StabilityCertificate,
    alpha_bar,
    build_decoupling,
    decoupling_transform,
    hamiltonian_matrix,
    linearize,
    solve_gare,
    solve_lyapunov,
    stable_spectral_distance,
)
from .manifold import (
    Dataset,
    GenerationSettings,
    Trajectory,
    generate_dataset,
    generate_trajectory,
    load_dataset_jsonl,
    pick_horizon,
    save_dataset_jsonl,
    solve_local_bvp,
)
from .approximator import (
    ApproximatorParams,
    LossWeights,
    TrainReport,
    forward,
    init_params,
    jacobian_at_zero,
    load_checkpoint,
    loss,
    nn_controller,
    save_checkpoint,
    train,
)
from .closedloop import (
    GainCertificate,
    SimulationResult,
    decay_rate,
    discounted_gain,
    gain_horizon,
    simulate,
    track,
)
from .signals import SignalExpr, parse_signal

__version__ = "0.1.0"
