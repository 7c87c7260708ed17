"""Density-constrained optimal control and MDP policy synthesis.

The library pairs value-function solves (stationary HJB on a grid, MDP
policy evaluation) with density-function solves (Liouville transport by
characteristics, stationary upwind FDM, kernel density estimation) and
couples them through primal-dual loops that enforce density caps such as
safety constraints and congestion limits.
"""

from .dynamics import (
    Ball,
    Box,
    ConstantPolicy,
    ControlledSystem,
    FiniteSet,
    GoalRegion,
    GriddedPolicy,
    Trajectory,
    extended_liouville_integrate,
    integrate,
    reverse_flow,
)
from .density import (
    DensityField,
    KdeEstimate,
    SupplyFunction,
    density_at,
    density_kde,
    epanechnikov_kernel,
    mass_balance,
    propagate_density,
    stationary_density_fdm,
)
from .errors import (
    DensityControlError,
    HorizonTooShort,
    Infeasible,
    InvalidPolicy,
    NoAvailableAction,
    NoConvergence,
    NonFiniteState,
    SingularSystem,
    SingularTransport,
    UnreachableGoal,
)
from .grid import (
    GridSpec,
    ScalarField,
    VectorField,
    dump_field_csv,
    interpolate,
    interpolate_many,
    load_scalar_field_csv,
    load_vector_field_csv,
    upwind_differences,
    upwind_directional,
)
from .hjb import (
    HjbOptions,
    HjbProblem,
    ValueField,
    extract_policy,
    solve_stationary_hjb,
    solve_worst_disturbance,
)
from .mdp_core import (
    MdpModel,
    StochasticPolicy,
    cropped_matrix,
    density_step,
    duality_gap,
    policy_value,
    random_mdp,
    stationary_density,
    transition_matrix,
    value_iteration,
)
from .mdp_pd import (
    ConstrainedMdpProblem,
    MultiMdpReport,
    advantage,
    oracle_constrained_mdp,
    project_simplex,
    run_constrained_mdp,
    run_multi_mdp,
)

__version__ = "0.1.0"
