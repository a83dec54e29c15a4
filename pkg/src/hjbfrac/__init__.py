"""Feedback control of fractional reaction-diffusion by semi-Lagrangian value iteration on scattered grids."""

from .fem import (
    DiscreteDynamics,
    FeMesh,
    FemSystem,
    NumericalBlowupError,
    analytic_pair,
    assemble_fractional_stiffness,
    assemble_load,
    assemble_mass,
    build_fem_system,
    build_mesh,
    discounted_l2_distance,
)
from .grid import GridSpec, ScatteredGrid, generate_grid, load_grid, save_grid, separation_distance
from .hjb import (
    FeedbackPolicy,
    HjbProblem,
    QuadraticCost,
    ValueFunction,
    select_shape,
    simulate_closed_loop,
    simulate_open_loop,
    vi_solve,
)
from .shepard import ShepardInterpolant, WendlandKernel, shepard_eval, shepard_eval_batch

__version__ = "0.1.0"
