"""Additive, normalized and stable profit-and-loss decompositions of
revaluation processes via sequential updating."""

from .timepaths import (
    Delay,
    DomainError,
    FloorMap,
    IdentityMap,
    PiecewiseLinearMap,
    RiskBasis,
    ShiftMap,
    StepPath,
    TimeGrid,
    apply_delay,
    dyadic_partitions,
    make_refining_delays,
    stop,
    stop_multi,
    verify_refining,
)
from .stochastics import ModelParams, Policy, Rate, SimulatedBasis, simulate_basis
from .revaluation import (
    RevaluationSurface,
    SurfaceEvaluationError,
    surface_black_box,
    surface_first_order,
    surface_risk_neutral,
    surface_std_dev,
)
from .decomposition import (
    Decomposition,
    check_additivity,
    check_normalization,
    check_order_invariance,
    check_stability,
    interval_increment_decomposition,
    isu_approximate,
    su_decompose,
)
from .closedform import oracle_first_order, oracle_risk_neutral, oracle_std_dev

__version__ = "0.1.0"
