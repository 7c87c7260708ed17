"""Density computation three ways: pointwise ODE, stationary FDM, and KDE.

The pointwise route follows characteristics backwards and re-integrates the
extended state/density ODE forward, entirely grid free. The stationary FDM
route solves the upwind transport system (the exact adjoint of the value
stencil). The Monte-Carlo route estimates the stationary density from
sampled trajectories with a compact-support Epanechnikov product kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._upwind import NeighborTable, TransportOperator, build_transport
from .dynamics import ControlledSystem, _as_policy, _extended_batch, _rk4_step, closed_loop_drift
from .errors import DensityControlError, HorizonTooShort, SingularTransport
from .grid import GridSpec, ScalarField, VectorField, interpolate_many

__all__ = [
    "SupplyFunction",
    "DensityField",
    "density_at",
    "stationary_density_fdm",
    "density_kde",
    "KdeEstimate",
    "mass_balance",
    "propagate_density",
    "epanechnikov_kernel",
]

NEGATIVE_DENSITY_SLACK = 1e-9


@dataclass
class SupplyFunction:
    """Positive supply plus the sink behavior of the Liouville source term.

    ``sink_mode`` is one of "goal" (density absorbed on entering the goal
    set), "discount" (proportional drain -kappa rho everywhere), or "none".
    ``positive_rate`` maps batched states (B, n) to nonnegative rates (B,).
    """

    positive_rate: Optional[Callable] = None
    sink_mode: str = "none"
    kappa: float = 0.0
    initial_density: Optional[Callable] = None

    def __post_init__(self):
        if self.sink_mode not in ("goal", "discount", "none"):
            raise DensityControlError(f"unknown sink mode {self.sink_mode!r}")
        if self.sink_mode == "discount" and self.kappa <= 0:
            raise DensityControlError("discount sink mode requires kappa > 0")

    def phi_plus(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.positive_rate is None:
            return np.zeros(x.shape[0])
        out = np.asarray(self.positive_rate(x), dtype=float).reshape(-1)
        return out

    def rho0(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.initial_density is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.initial_density(x), dtype=float).reshape(-1)

    def phi_plus_field(self, grid: GridSpec) -> ScalarField:
        return ScalarField(grid, self.phi_plus(grid.points()))

    def total_rate(self, grid: GridSpec) -> float:
        """Grid quadrature of the positive supply (cell volume per point)."""
        return float(np.sum(self.phi_plus(grid.points())) * grid.cell_volume)


@dataclass
class DensityField:
    """A gridded density plus the closed-loop velocity it was computed under."""

    field: ScalarField
    velocity: VectorField
    sink_mode: str
    kappa: float
    pinned: np.ndarray
    policy_label: str = ""

    @property
    def grid(self) -> GridSpec:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def total_mass(self) -> float:
        return float(np.sum(self.field.values) * self.grid.cell_volume)


def density_at(system: ControlledSystem, policy, supply: SupplyFunction, t: float, x, dt: float = 1e-3) -> float:
    """Evaluate rho(t, x) by the two-step characteristic procedure.

    Reverse the closed-loop flow from ``x`` for time ``t``, read the initial
    density there, then integrate the extended Liouville ODE forward for the
    same duration and project onto the density component.
    """
    if t < 0:
        raise DensityControlError("t must be nonnegative")
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        rho = float(supply.rho0(x)[0])
        if supply.sink_mode == "goal" and system.goal is not None and system.goal.contains(x):
            return 0.0
        return rho
    f = closed_loop_drift(system, policy)
    x0 = np.atleast_2d(x).copy()
    n_steps = int(np.ceil(t / dt))
    remaining = t
    for _ in range(n_steps):
        h = min(dt, remaining)
        x0 = _rk4_step(lambda y: -f(y), x0, h)
        remaining -= h
    rho0 = supply.rho0(x0)
    _, rho_end = _extended_batch(system, policy, supply, x0, rho0, t, dt)
    return float(rho_end[0])


def _velocity_on_grid(system: ControlledSystem, policy, grid: GridSpec) -> VectorField:
    """Closed-loop velocities sampled at every grid point.

    A gridded policy on the same grid is read off directly (no interpolation
    error); anything else is evaluated as a callable.
    """
    pts = grid.points()
    from .dynamics import GriddedPolicy

    if isinstance(policy, VectorField) and policy.grid == grid:
        u = policy.values
    elif isinstance(policy, GriddedPolicy) and policy.field.grid == grid:
        u = policy.field.values
    else:
        u = np.atleast_2d(_as_policy(policy)(pts))
    vel = np.asarray(system.drift(pts, u), dtype=float)
    return VectorField(grid, vel)


def _pinned_mask(system: ControlledSystem, supply: SupplyFunction, grid: GridSpec) -> np.ndarray:
    if supply.sink_mode == "goal":
        if system.goal is None:
            raise DensityControlError("goal sink mode needs a goal region on the system")
        return system.goal.contains(grid.points())
    return np.zeros(grid.num_points, dtype=bool)


def stationary_density_fdm(
    system: ControlledSystem,
    policy,
    supply: SupplyFunction,
    grid: GridSpec,
    policy_label: str = "",
) -> DensityField:
    """Solve the stationary transport balance div(rho f) = phi on the grid.

    Goal-mode rows inside the goal set are pinned to zero (absorbing sink);
    discount mode adds the kappa rho drain. Raises SingularTransport when the
    discrete system admits no bounded stationary density.
    """
    velocity = _velocity_on_grid(system, policy, grid)
    pinned = _pinned_mask(system, supply, grid)
    kappa = supply.kappa if supply.sink_mode == "discount" else 0.0
    op = build_transport(grid, velocity.values, pinned, kappa=kappa)
    phi_vec = supply.phi_plus(grid.points())
    if np.any(phi_vec < 0):
        raise DensityControlError("positive supply must be nonnegative")
    if np.any(op.stalled & (phi_vec > 0)):
        raise SingularTransport("supply feeds states with zero closed-loop speed and no drain")
    rho = op.solve_density(phi_vec)
    residual = float(np.max(np.abs(op.matrix.T @ rho - phi_vec)))
    if residual > 1e-8 * max(1.0, float(np.max(np.abs(phi_vec)))):
        raise SingularTransport(f"stationary transport residual {residual:.3e} too large")
    rho = np.where(pinned, 0.0, rho)
    if np.min(rho) < -NEGATIVE_DENSITY_SLACK:
        raise SingularTransport(f"stationary density has negative entries (min {np.min(rho):.3e})")
    out = ScalarField(grid, rho)
    out.check_finite("stationary density")
    return DensityField(out, velocity, supply.sink_mode, kappa, pinned, policy_label)


def mass_balance(supply: SupplyFunction, density: DensityField) -> float:
    """Net supply rate of a claimed stationary density: integral of phi.

    Combines the quadrature of the positive supply outside sinks with the
    absorbed sink flux (goal mode), the kappa drain (discount mode), and any
    outflow through the domain boundary. Near zero certifies stationarity.
    """
    grid = density.grid
    op = build_transport(grid, density.velocity.values, density.pinned, kappa=density.kappa)
    rho = density.values
    phi_vec = supply.phi_plus(grid.points())
    free = ~(op.pinned | op.stalled)
    supplied = float(np.sum(phi_vec[free]) * grid.cell_volume)
    absorbed = op.absorbed_into_pinned(rho)
    drained = density.kappa * float(np.sum(rho[free]) * grid.cell_volume)
    out = op.boundary_outflow(rho)
    return supplied - absorbed - drained - out


def epanechnikov_kernel(s: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    """Product Epanechnikov kernel, batched over rows of ``s``.

    Each factor is 3/(4h) (1 - (s/h)^2) on |s| <= h and zero outside, so the
    kernel integrates to one per dimension and has compact support.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    h = np.asarray(bandwidth, dtype=float).reshape(1, -1)
    z = s / h
    inside = np.abs(z) <= 1.0
    factors = np.where(inside, 0.75 / h * (1.0 - z * z), 0.0)
    return np.prod(factors, axis=1)


@dataclass
class KdeEstimate:
    """Kernel density estimate built from sampled trajectory points."""

    samples: np.ndarray
    sample_trial: np.ndarray
    sample_step: np.ndarray
    mass: float
    bandwidth: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        if self.samples.shape[0] == 0:
            return out
        chunk = max(1, int(2e6 // max(1, x.shape[0])))
        for start in range(0, self.samples.shape[0], chunk):
            block = self.samples[start : start + chunk]
            diff = x[:, None, :] - block[None, :, :]
            z = diff / self.bandwidth.reshape(1, 1, -1)
            inside = np.abs(z) <= 1.0
            factors = np.where(inside, 0.75 / self.bandwidth.reshape(1, 1, -1) * (1.0 - z * z), 0.0)
            out += np.prod(factors, axis=2).sum(axis=1) * self.mass
        return out

    def evaluate(self, x) -> float:
        return float(self(np.atleast_2d(x))[0])

    def dump_csv(self, path):
        n = self.samples.shape[1] if self.samples.size else 0
        cols = ["trial", "step"] + [f"x{k}" for k in range(n)] + ["mass"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(self.samples.shape[0]):
                row = [str(int(self.sample_trial[i])), str(int(self.sample_step[i]))]
                row += [f"{v:.17g}" for v in self.samples[i]]
                row.append(f"{self.mass:.17g}")
                fh.write(",".join(row) + "\n")


def _sample_supply(supply: SupplyFunction, grid: GridSpec, trials: int, rng) -> np.ndarray:
    """Draw initial states by inverse CDF on the gridded supply, with uniform
    jitter inside each cell."""
    phi = supply.phi_plus(grid.points())
    total = phi.sum()
    if total <= 0:
        raise DensityControlError("cannot sample from a zero supply")
    cdf = np.cumsum(phi) / total
    draws = rng.random(trials)
    cells = np.searchsorted(cdf, draws, side="left")
    pts = grid.points()[cells]
    jitter = (rng.random((trials, grid.dim)) - 0.5) * grid.spacing
    return grid.clip(pts + jitter)


def density_kde(
    system: ControlledSystem,
    policy,
    supply: SupplyFunction,
    grid: GridSpec,
    trials: int,
    step: float,
    horizon: int,
    bandwidth=None,
    seed: int = 0,
) -> KdeEstimate:
    """Monte-Carlo density estimate from ``trials`` simulated trajectories.

    Initial conditions are drawn proportional to the positive supply; each
    retained sample (one per simulation step, outside the goal set) carries
    mass step * total_rate / trials. Default bandwidth is twice the grid
    spacing, keeping the kernel support compact enough that empty regions
    report exactly zero.
    """
    if trials < 1:
        raise DensityControlError("need at least one trial")
    if step <= 0 or horizon < 1:
        raise DensityControlError("step must be positive and horizon at least 1")
    bandwidth = 2.0 * grid.spacing if bandwidth is None else np.asarray(bandwidth, dtype=float)
    if np.any(bandwidth <= 0):
        raise DensityControlError("bandwidth must be positive componentwise")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = _sample_supply(supply, grid, trials, rng)
    f = closed_loop_drift(system, policy)
    goal = system.goal
    alive = np.ones(trials, dtype=bool)
    if goal is not None:
        alive &= ~goal.contains(x)
    sample_blocks, trial_blocks, step_blocks = [], [], []
    for j in range(1, horizon + 1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        x[idx] = _rk4_step(f, x[idx], step)
        if not np.all(np.isfinite(x[idx])):
            raise DensityControlError("kde simulation produced non-finite states")
        if goal is not None:
            entered = goal.contains(x[idx])
            alive[idx[entered]] = False
            idx = idx[~entered]
        if idx.size:
            sample_blocks.append(x[idx].copy())
            trial_blocks.append(idx.copy())
            step_blocks.append(np.full(idx.size, j))
    if goal is not None and supply.sink_mode == "goal" and np.any(alive):
        raise HorizonTooShort(
            f"{int(np.sum(alive))} of {trials} trajectories did not reach the goal within {horizon} steps"
        )
    if sample_blocks:
        samples = np.concatenate(sample_blocks, axis=0)
        trial_arr = np.concatenate(trial_blocks)
        step_arr = np.concatenate(step_blocks)
    else:
        samples = np.zeros((0, grid.dim))
        trial_arr = np.zeros(0, dtype=int)
        step_arr = np.zeros(0, dtype=int)
    mass = step * supply.total_rate(grid) / trials
    return KdeEstimate(samples, trial_arr, step_arr, mass, bandwidth)


def propagate_density(
    system: ControlledSystem,
    policy,
    supply: SupplyFunction,
    rho_init,
    t_end: float,
    dt: float = 1e-3,
) -> DensityField:
    """Time-evolve a gridded density by per-point characteristic evaluation.

    For every grid point the closed-loop flow is reversed for ``t_end``, the
    initial field is read there (zero outside the grid box), and the extended
    ODE is integrated forward. With a stationary supply and enough elapsed
    time this converges pointwise to the stationary density.
    """
    if t_end < 0:
        raise DensityControlError("t_end must be nonnegative")
    init_field = rho_init.field if isinstance(rho_init, DensityField) else rho_init
    grid = init_field.grid
    velocity = _velocity_on_grid(system, policy, grid)
    pinned = _pinned_mask(system, supply, grid)
    if t_end == 0:
        vals = init_field.values.copy()
        if supply.sink_mode == "goal":
            vals = np.where(pinned, 0.0, vals)
        return DensityField(ScalarField(grid, vals), velocity, supply.sink_mode, supply.kappa, pinned)
    pts = grid.points()
    f = closed_loop_drift(system, policy)
    x0 = pts.copy()
    n_steps = int(np.ceil(t_end / dt))
    remaining = t_end
    for _ in range(n_steps):
        h = min(dt, remaining)
        x0 = _rk4_step(lambda y: -f(y), x0, h)
        remaining -= h
    lower = np.asarray(grid.lower)
    upper = np.asarray(grid.upper)
    inside = np.all((x0 >= lower) & (x0 <= upper), axis=1)
    rho0 = np.where(inside, interpolate_many(init_field, x0), 0.0)
    _, rho_end = _extended_batch(system, policy, supply, x0, rho0, t_end, dt)
    vals = rho_end
    if supply.sink_mode == "goal":
        vals = np.where(pinned, 0.0, vals)
    out = ScalarField(grid, vals)
    out.check_finite("propagated density")
    return DensityField(out, velocity, supply.sink_mode, supply.kappa, pinned)
