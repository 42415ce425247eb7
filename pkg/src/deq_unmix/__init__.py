"""Deep-equilibrium sequence models for spectrogram-mask source separation."""

from .deq import DeqLayer, DeqOutput
from .layers import FThetaCore
from .separator import ModelSpec, SeparatorModel, TrainConfig, count_macs, count_params
from .solvers import SolverConfig, SolverTrace, broyden_solve, fixed_point_iterate, linear_solve_matfree
from .tensor import Tape, Tensor

__all__ = [
    "DeqLayer",
    "DeqOutput",
    "FThetaCore",
    "ModelSpec",
    "SeparatorModel",
    "SolverConfig",
    "SolverTrace",
    "Tape",
    "Tensor",
    "TrainConfig",
    "broyden_solve",
    "count_macs",
    "count_params",
    "fixed_point_iterate",
    "linear_solve_matfree",
]
