"""Exception types shared across the solver modules."""


class DensityControlError(Exception):
    """Base class for solver and validation failures."""


class NonFiniteState(DensityControlError):
    """An ODE integration step produced NaN or infinity."""


class SingularTransport(DensityControlError):
    """The discrete stationary transport system is singular.

    Typically means some grid states never exit through a sink, so no
    bounded stationary density exists.
    """


class HorizonTooShort(DensityControlError):
    """A sampled trajectory failed to reach the goal set within the horizon."""


class NoConvergence(DensityControlError):
    """An iterative solve hit its iteration cap before meeting tolerance."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class UnreachableGoal(DensityControlError):
    """The value-function linear operator is singular; some state cannot reach the goal."""


class SingularSystem(DensityControlError):
    """A dense MDP linear solve is singular or failed its residual check."""


class InvalidPolicy(ValueError, DensityControlError):
    """A stochastic policy violates the simplex or availability constraints."""


class NoAvailableAction(ValueError, DensityControlError):
    """Simplex projection requested for a state with no available action."""


class Infeasible(DensityControlError):
    """A constrained optimization problem admits no feasible point."""
