"""Squared L1/L2 sparse recovery via a proximal method for fractional programs."""

__version__ = "0.1.0"

from .core import (
    FractionalObjective,
    InvalidInitialPoint,
    LineSearchFailure,
    SolverConfig,
    SolveTrace,
    criticality_residual,
    evaluate_F,
    solve,
)
from .models import (
    BoxBounds,
    LorentzianLoss,
    QuadraticLoss,
    RobustDistanceLoss,
    SquaredRatioModel,
    build_objective,
    prox_l1_box,
)
