"""Exception types raised across the toolkit."""


class DhinfError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DhinfError):
    """Invalid configuration value or malformed config document."""


class UnsupportedModelError(DhinfError):
    """Model shape the solver cannot handle (e.g. state-dependent input
    maps without a user-supplied coupling-derivative callback)."""


class SpectrumError(DhinfError):
    """Spectral precondition failed: degenerate or non-hyperbolic spectrum,
    or the zero-discount Hamiltonian matrix violating hyperbolicity."""


class RiccatiError(DhinfError):
    """Riccati solve failed: stable subspace is not a graph over the state
    space, or the candidate solution is not positive definite."""


class LyapunovError(DhinfError):
    """Lyapunov solve hit a resonant spectrum (singular Kronecker system)."""


class TransformError(DhinfError):
    """Decoupling transform failed its consistency identities."""


class BvpError(DhinfError):
    """Boundary-value iteration diverged or blew up."""


class ExtensionError(DhinfError):
    """Backward extension stalled (stiff-extension); carries the partial
    extension computed so far in ``partial``."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ValueRecoveryError(DhinfError):
    """Requested value-recovery method unavailable (algebraic form needs a
    strictly positive discount)."""


class GenerationError(DhinfError):
    """Trajectory generation fell below the acceptance-rate floor; carries
    per-trajectory diagnostics in ``diagnostics``."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class RefineError(DhinfError):
    """Adaptive refinement produced no accepted trajectories."""


class TrainingDivergedError(DhinfError):
    """Training hit a non-finite loss; ``last_params`` holds the last
    finite parameter state."""

    def __init__(self, message, last_params=None, report=None):
        super().__init__(message)
        self.last_params = last_params
        self.report = report


class InstabilityError(DhinfError):
    """Closed-loop state escaped the simulation domain; ``partial`` holds
    the trace up to the escape."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class SignalSyntaxError(DhinfError):
    """Signal expression failed to parse; ``offset`` is the byte offset of
    the first offending character."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class SignalEvalError(DhinfError):
    """Signal expression failed at evaluation time (e.g. division by zero)."""
