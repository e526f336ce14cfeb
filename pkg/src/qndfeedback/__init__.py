"""Feedback-assisted generation of maximally entangled states of two atomic ensembles.

Trajectory simulation of two N-atom ensembles probed by single photons (QND
measurement of the total population difference), rotated in opposite
directions after every detection and steered by a measurement-conditioned
feedback rotation.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

from .engine import (
    BatchSummary,
    SeedPlan,
    TrajectoryResult,
    lambda_perturbation_study,
    run_batch,
    run_trajectory,
    success_fraction,
    wilson_interval,
)
from .metrics import MetricsRecord, compute_metrics, maximally_entangled_state
from .protocol import FeedbackMode, FeedbackPolicy, ProtocolConfig, protocol_step
from .spin_algebra import SpinBasis, operator_set
from .state import QuantumState, initial_state

__all__ = [
    "BatchSummary",
    "FeedbackMode",
    "FeedbackPolicy",
    "MetricsRecord",
    "ProtocolConfig",
    "QuantumState",
    "SeedPlan",
    "SpinBasis",
    "TrajectoryResult",
    "__version__",
    "compute_metrics",
    "initial_state",
    "lambda_perturbation_study",
    "maximally_entangled_state",
    "operator_set",
    "protocol_step",
    "run_batch",
    "run_trajectory",
    "success_fraction",
    "wilson_interval",
]
