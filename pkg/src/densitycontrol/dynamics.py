"""Controlled systems, fixed-step RK4 integration, and flow maps.

Drift callables are expected to broadcast over a leading batch axis:
``F(x, u, d)`` with ``x`` of shape (..., n) returns (..., n). Policies are
callables mapping (..., n) states to (..., m) inputs; `ConstantPolicy` and
`GriddedPolicy` cover the common cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DensityControlError, NonFiniteState
from .grid import VectorField, interpolate_vector_many

__all__ = [
    "Ball",
    "Box",
    "FiniteSet",
    "GoalRegion",
    "ControlledSystem",
    "Trajectory",
    "ConstantPolicy",
    "GriddedPolicy",
    "integrate",
    "reverse_flow",
    "extended_liouville_integrate",
]

_GOAL_BISECT_TOL = 1e-9


@dataclass(frozen=True)
class Ball:
    """Inputs with Euclidean norm at most ``radius``."""

    radius: float
    dim: int

    def contains(self, u) -> bool:
        return float(np.linalg.norm(u)) <= self.radius + 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned input box [lower, upper]."""

    lower: tuple
    upper: tuple

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, u) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= np.asarray(self.lower) - 1e-12) and np.all(u <= np.asarray(self.upper) + 1e-12))


@dataclass(frozen=True)
class FiniteSet:
    """An explicit finite list of admissible inputs, shape (K, m)."""

    points: tuple

    @property
    def dim(self) -> int:
        return len(self.points[0])

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def contains(self, u) -> bool:
        return bool(np.any(np.all(np.isclose(self.as_array(), np.asarray(u)), axis=1)))


@dataclass(frozen=True)
class GoalRegion:
    """Terminal set given as a batched predicate plus a geometric anchor.

    ``centroid`` is used to pin the terminal condition when the set is so
    small that no grid point satisfies the predicate.
    """

    predicate: Callable[[np.ndarray], np.ndarray]
    centroid: tuple
    description: str = ""

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = np.asarray(self.predicate(np.atleast_2d(x)), dtype=bool).reshape(-1)
        return bool(out[0]) if single else out


@dataclass
class ControlledSystem:
    """Dynamics F(x, u, d) together with the cost data of one control problem.

    ``divergence`` is the state divergence of F at fixed (u, d); when absent
    the Liouville machinery falls back to central differences of the
    closed-loop drift with step 1e-5 times the working width.
    ``control_affine``, when given, is a pair (f0, B) with
    F(x, u, d) = f0(x, d) + B(x) @ u, which unlocks closed-form policy
    extraction for ball and box input sets. ``disturbance_affine`` plays the
    same role for the disturbance channel: a pair (g0, Bd) with
    F(x, u, d) = g0(x, u) + Bd(x) @ d.
    """

    dim: int
    drift: Callable
    input_set: object
    running_cost: Callable
    terminal_cost: Callable = None
    goal: Optional[GoalRegion] = None
    danger: Optional[Callable] = None
    disturbance_set: object = None
    divergence: Optional[Callable] = None
    control_affine: Optional[tuple] = None
    disturbance_affine: Optional[tuple] = None
    input_dependent_cost: bool = False
    working_lower: Optional[tuple] = None
    working_upper: Optional[tuple] = None

    def __post_init__(self):
        if self.terminal_cost is None:
            self.terminal_cost = lambda x: np.zeros(np.atleast_2d(x).shape[0])

    @property
    def working_widths(self) -> np.ndarray:
        if self.working_lower is None or self.working_upper is None:
            return np.ones(self.dim)
        return np.asarray(self.working_upper) - np.asarray(self.working_lower)

    def in_danger(self, x) -> np.ndarray:
        if self.danger is None:
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.zeros(x.shape[0], dtype=bool)
        return np.asarray(self.danger(np.atleast_2d(np.asarray(x, dtype=float))), dtype=bool).reshape(-1)

    def with_disturbance_policy(self, d_policy) -> "ControlledSystem":
        """Freeze a state-feedback disturbance into the drift."""
        base = self.drift
        affine = None
        if self.control_affine is not None:
            f0, b_map = self.control_affine
            affine = (lambda x, d=None, _f0=f0: _f0(x, d_policy(x)), b_map)
        return ControlledSystem(
            dim=self.dim,
            drift=lambda x, u, d=None, _b=base: _b(x, u, d_policy(x)),
            input_set=self.input_set,
            running_cost=self.running_cost,
            terminal_cost=self.terminal_cost,
            goal=self.goal,
            danger=self.danger,
            disturbance_set=None,
            divergence=None,
            control_affine=affine,
            input_dependent_cost=self.input_dependent_cost,
            working_lower=self.working_lower,
            working_upper=self.working_upper,
        )


@dataclass
class Trajectory:
    """Sampled path: strictly increasing times, one state row per time."""

    times: np.ndarray
    states: np.ndarray
    rho: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.times.size != self.states.shape[0]:
            raise DensityControlError("times and states must have equal length")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise DensityControlError("trajectory times must be strictly increasing")
        if self.rho is not None:
            self.rho = np.asarray(self.rho, dtype=float)
            if self.rho.size != self.times.size:
                raise DensityControlError("rho must match trajectory length")

    def dump_csv(self, path):
        n = self.states.shape[1]
        cols = ["t"] + [f"x{k}" for k in range(n)] + (["rho"] if self.rho is not None else [])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i, t in enumerate(self.times):
                row = [f"{t:.17g}"] + [f"{v:.17g}" for v in self.states[i]]
                if self.rho is not None:
                    row.append(f"{self.rho[i]:.17g}")
                fh.write(",".join(row) + "\n")


class ConstantPolicy:
    """State-independent input; its spatial divergence contribution is zero."""

    state_independent = True

    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.u.copy()
        return np.broadcast_to(self.u, (x.shape[0], self.u.size)).copy()


class GriddedPolicy:
    """Multilinear interpolation of a per-grid-point input field."""

    state_independent = False

    def __init__(self, field: VectorField):
        self.field = field

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = interpolate_vector_many(self.field, np.atleast_2d(x))
        return out[0] if single else out


def _as_policy(policy):
    if callable(policy):
        return policy
    if isinstance(policy, VectorField):
        return GriddedPolicy(policy)
    raise DensityControlError(f"cannot interpret {type(policy)} as a policy")


def closed_loop_drift(system: ControlledSystem, policy):
    """State map x -> F(x, policy(x)) broadcasting over batches."""
    pol = _as_policy(policy)

    def f(x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        out = np.asarray(system.drift(xb, np.atleast_2d(pol(xb))), dtype=float)
        return out[0] if single else out

    return f


def closed_loop_divergence(system: ControlledSystem, policy):
    """Divergence of the closed-loop drift as a batched state map.

    Uses the system's analytic divergence when the policy is state
    independent; otherwise central differences of the closed-loop field.
    """
    pol = _as_policy(policy)
    analytic = system.divergence is not None and getattr(pol, "state_independent", False)
    if analytic:
        def div(x):
            x = np.asarray(x, dtype=float)
            single = x.ndim == 1
            xb = np.atleast_2d(x)
            out = np.asarray(system.divergence(xb, np.atleast_2d(pol(xb))), dtype=float).reshape(-1)
            return float(out[0]) if single else out

        return div

    f = closed_loop_drift(system, policy)
    steps = 1e-5 * system.working_widths

    def div(x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        total = np.zeros(xb.shape[0])
        for k in range(system.dim):
            h = steps[k]
            e = np.zeros(system.dim)
            e[k] = h
            total += (f(xb + e)[:, k] - f(xb - e)[:, k]) / (2.0 * h)
        return float(total[0]) if single else total

    return div


def _rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("integration produced a non-finite state")


def _bisect_goal_entry(f, goal, x_prev, t_prev, dt):
    """Refine the goal-entry time within (t_prev, t_prev + dt] by bisection."""
    lo, hi = 0.0, dt
    while hi - lo > _GOAL_BISECT_TOL:
        mid = 0.5 * (lo + hi)
        x_mid = _rk4_step(f, x_prev, mid)
        if goal.contains(x_mid):
            hi = mid
        else:
            lo = mid
    return t_prev + hi, _rk4_step(f, x_prev, hi)


def integrate(system: ControlledSystem, policy, x0, t_end: float, dt: float) -> Trajectory:
    """Fixed-step RK4 rollout of the closed loop from ``x0``.

    Stops early (with a bisection-refined final sample) as soon as the state
    enters the goal region, matching the sink semantics of goal-absorbed
    problems.
    """
    if dt <= 0:
        raise DensityControlError("dt must be positive")
    if t_end < 0:
        raise DensityControlError("t_end must be nonnegative")
    f = closed_loop_drift(system, policy)
    x = np.asarray(x0, dtype=float).copy()
    _check_finite(x)
    times = [0.0]
    states = [x.copy()]
    if t_end == 0:
        return Trajectory(np.asarray(times), np.asarray(states))
    n_steps = int(np.ceil(t_end / dt))
    goal = system.goal
    if goal is not None and goal.contains(x):
        return Trajectory(np.asarray(times), np.asarray(states))
    t = 0.0
    for step in range(n_steps):
        h = min(dt, t_end - t)
        x_new = _rk4_step(f, x, h)
        _check_finite(x_new)
        if goal is not None and goal.contains(x_new):
            t_hit, x_hit = _bisect_goal_entry(f, goal, x, t, h)
            if t_hit > times[-1]:
                times.append(t_hit)
                states.append(x_hit)
            return Trajectory(np.asarray(times), np.asarray(states))
        t += h
        x = x_new
        times.append(t)
        states.append(x.copy())
    return Trajectory(np.asarray(times), np.asarray(states))


def reverse_flow(system: ControlledSystem, policy, x, t: float, dt: float) -> np.ndarray:
    """Flow map at negative time: integrate the negated closed loop for ``t``.

    No goal termination applies; the reverse flow is a pure flow-map query.
    """
    if t < 0:
        raise DensityControlError("t must be nonnegative")
    if t == 0:
        return np.asarray(x, dtype=float).copy()
    f = closed_loop_drift(system, policy)
    x_cur = np.asarray(x, dtype=float).copy()
    n_steps = int(np.ceil(t / dt))
    remaining = t
    for _ in range(n_steps):
        h = min(dt, remaining)
        x_cur = _rk4_step(lambda y: -f(y), x_cur, h)
        _check_finite(x_cur)
        remaining -= h
    return x_cur


def extended_liouville_integrate(
    system: ControlledSystem,
    policy,
    supply,
    x0,
    rho0_at_x0: float,
    t_end: float,
    dt: float,
) -> Trajectory:
    """Joint rollout of state and density: xdot = f, rhodot = phi - div(f) rho.

    The supply's sink mode shapes phi: in goal-sink mode the density is
    zeroed whenever the state sits inside the goal set (the discrete stand-in
    for the instantaneous boundary sink), in discount mode phi gains -kappa
    rho, otherwise phi is the positive supply alone.
    """
    if rho0_at_x0 < 0:
        raise DensityControlError("initial density must be nonnegative")
    traj = _extended_batch(
        system, policy, supply, np.atleast_2d(np.asarray(x0, dtype=float)),
        np.asarray([rho0_at_x0], dtype=float), t_end, dt, record=True,
    )
    times, states, rhos = traj
    return Trajectory(times, states[:, 0, :], rhos[:, 0])


def _extended_batch(system, policy, supply, X0, rho0, t_end, dt, record=False):
    """Vectorized extended-Liouville integration over a batch of points.

    Returns either the final (states, rho) or, with ``record``, the whole
    sampled history (times, states (T,B,n), rho (T,B)).
    """
    f = closed_loop_drift(system, policy)
    div = closed_loop_divergence(system, policy)
    phi_plus = supply.positive_rate
    mode = supply.sink_mode
    kappa = supply.kappa
    goal = system.goal

    def joint_rhs(z):
        x = z[:, :-1]
        rho = z[:, -1]
        dx = f(x)
        phi = phi_plus(x) if phi_plus is not None else np.zeros(x.shape[0])
        if mode == "discount":
            phi = phi - kappa * rho
        drho = phi - div(x) * rho
        return np.concatenate([dx, drho[:, None]], axis=1)

    z = np.concatenate([X0, np.asarray(rho0, dtype=float)[:, None]], axis=1)
    if mode == "goal" and goal is not None:
        inside = goal.contains(z[:, :-1])
        z[inside, -1] = 0.0
    times = [0.0]
    hist_states = [z[:, :-1].copy()]
    hist_rho = [z[:, -1].copy()]
    if t_end > 0:
        n_steps = int(np.ceil(t_end / dt))
        t = 0.0
        for _ in range(n_steps):
            h = min(dt, t_end - t)
            z = _rk4_step(joint_rhs, z, h)
            _check_finite(z)
            if mode == "goal" and goal is not None:
                inside = goal.contains(z[:, :-1])
                z[inside, -1] = 0.0
            t += h
            if record:
                times.append(t)
                hist_states.append(z[:, :-1].copy())
                hist_rho.append(z[:, -1].copy())
    if record:
        return np.asarray(times), np.asarray(hist_states), np.asarray(hist_rho)
    return z[:, :-1], z[:, -1]
