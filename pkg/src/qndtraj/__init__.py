"""Simulation and statistical verification of quantum non-demolition trajectories."""
from .kernels import BACKEND
from .model import (
    Channel,
    ChannelKind,
    DegenerateRate,
    DiagonalityError,
    GeneralModel,
    ModelError,
    PointerBasis,
    QndModel,
    RateTable,
    check_nd_assumption,
    check_nondemolition,
    compare_diffusive_counting_rates,
    diagonalize,
    embed,
    rate_table,
)

__version__ = "0.1.0"
