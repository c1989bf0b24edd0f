"""Adaptive biasing force with a bias stored as a sum of tensor products."""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    ExtendedState,
    Periodic,
    PolymerRing,
    Reflected,
    SeparableTest,
    ToyModel3D,
)
from .gridfn import Grid1D, PLFunction, RankOneTerm, TensorSum, eval_sum, grad_sum  # noqa: F401
from .occupation import KernelSpec, OccupationStore  # noqa: F401
from .greedy import ALSConfig, als_rank_one, greedy, objective, solve_1d  # noqa: F401
