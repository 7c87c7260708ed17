"""Stationary HJB solves on the grid and optimal-policy extraction.

The solver combines two phases. Monotone value sweeps iterate the upwind
Bellman update over a finite candidate input set, which is robust from any
warm start and needs no linear algebra. A policy-iteration polish then
alternates closed-form (or enumerated) policy extraction with an exact
sparse solve of the frozen-policy linear system until the policy stops
changing, which certifies the fixed point at solver precision.

Each grid point couples to the neighbor its closed-loop flow moves toward,
so value chains anchor at the goal rows. Flow leaving the domain couples to
a virtual exterior state pinned at a large cap value, which doubles as the
value assigned to states that cannot move at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._upwind import NeighborTable, build_transport
from .dynamics import Ball, Box, ControlledSystem, FiniteSet
from .errors import DensityControlError, NoConvergence, UnreachableGoal
from .grid import GridSpec, ScalarField, VectorField

__all__ = [
    "HjbOptions",
    "HjbProblem",
    "ValueField",
    "solve_stationary_hjb",
    "extract_policy",
    "solve_worst_disturbance",
]


@dataclass(frozen=True)
class HjbOptions:
    """Tunable solver knobs; defaults are sized for desk-scale grids."""

    ball_directions: int = 32
    finite_input_samples: int = 9  # per input dimension, argmin fallback
    max_sweeps: int = 20000
    sweep_tol: float = 1e-9
    max_policy_iterations: int = 500
    policy_tol_factor: float = 1e-4
    residual_factor: float = 1e-8
    horizon_factor: float = 50.0
    adversary_restarts: int = 30


@dataclass
class HjbProblem:
    """A stationary HJB instance: system, grid, cost perturbation, discount.

    With ``adversarial`` set, the solve treats the system's disturbance set
    as an opposing player: every sweep re-derives the locally worst
    disturbance from the current value and the controller minimizes
    against it, which is what makes robust synthesis converge (planning
    against a stale frozen disturbance lets optimal paths graze the danger
    set wherever the stale field happens to point elsewhere, and the
    alternation cycles forever).
    """

    system: ControlledSystem
    grid: GridSpec
    sigma: Optional[ScalarField] = None
    kappa: float = 0.0
    adversarial: bool = False
    options: HjbOptions = field(default_factory=HjbOptions)

    def sigma_values(self) -> np.ndarray:
        if self.sigma is None:
            return np.zeros(self.grid.num_points)
        if self.sigma.grid != self.grid:
            raise DensityControlError("sigma must live on the problem grid")
        vals = self.sigma.values
        if np.any(vals < 0):
            raise DensityControlError("sigma must be nonnegative")
        return vals


@dataclass
class ValueField:
    """Solved value function with its companion grid policy."""

    value: ScalarField
    policy: VectorField
    converged: bool = True
    sweeps: int = 0
    policy_iterations: int = 0
    residual: float = 0.0


def _input_scale(input_set) -> float:
    if isinstance(input_set, Ball):
        return max(input_set.radius, 1e-12)
    if isinstance(input_set, Box):
        half = 0.5 * (np.asarray(input_set.upper) - np.asarray(input_set.lower))
        return max(float(np.max(half)), 1e-12)
    if isinstance(input_set, FiniteSet):
        pts = input_set.as_array()
        return max(float(np.max(np.abs(pts))), 1.0)
    raise DensityControlError(f"unsupported input set {type(input_set)}")


def _ball_directions(dim: int, count: int) -> np.ndarray:
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # deterministic Fibonacci-style covering for higher dimensions
    rng = np.random.Generator(np.random.PCG64(0))
    raw = rng.standard_normal((max(count, 2 * dim), dim))
    raw = np.concatenate([raw, np.eye(dim), -np.eye(dim)], axis=0)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def input_candidates(input_set, options: HjbOptions) -> np.ndarray:
    """Finite candidate inputs used by the value sweeps."""
    if isinstance(input_set, Ball):
        dirs = _ball_directions(input_set.dim, options.ball_directions)
        return np.concatenate([input_set.radius * dirs, np.zeros((1, input_set.dim))], axis=0)
    if isinstance(input_set, Box):
        lo = np.asarray(input_set.lower, dtype=float)
        hi = np.asarray(input_set.upper, dtype=float)
        m = lo.size
        corners = np.stack(np.meshgrid(*[[lo[i], hi[i]] for i in range(m)], indexing="ij"), axis=-1)
        cands = [corners.reshape(-1, m)]
        if np.all(lo <= 0) and np.all(hi >= 0):
            cands.append(np.zeros((1, m)))
            for i in range(m):
                for v in (lo[i], hi[i]):
                    row = np.zeros(m)
                    row[i] = v
                    cands.append(row[None, :])
        return np.unique(np.concatenate(cands, axis=0), axis=0)
    if isinstance(input_set, FiniteSet):
        return input_set.as_array()
    raise DensityControlError(f"unsupported input set {type(input_set)}")


def _goal_mask(system: ControlledSystem, grid: GridSpec) -> np.ndarray:
    if system.goal is None:
        return np.zeros(grid.num_points, dtype=bool)
    mask = system.goal.contains(grid.points())
    if not np.any(mask):
        # tiny goal sets can fall between lattice points; pin the nearest one
        pts = grid.points()
        nearest = int(np.argmin(np.sum((pts - np.asarray(system.goal.centroid)) ** 2, axis=1)))
        mask = np.zeros(grid.num_points, dtype=bool)
        mask[nearest] = True
    return mask


def _candidate_tables(system, grid, candidates, cost_fn, sigma):
    """Velocities, costs, and upwind weights for every candidate input."""
    pts = grid.points()
    vel, cost = [], []
    for u in candidates:
        ub = np.broadcast_to(u, (grid.num_points, u.size))
        vel.append(np.asarray(system.drift(pts, ub), dtype=float))
        cost.append(np.asarray(cost_fn(pts, ub), dtype=float).reshape(-1) + sigma)
    return np.stack(vel), np.stack(cost)


def _sweep_values(
    grid,
    neighbors,
    velocities,
    costs,
    pinned,
    pinned_values,
    kappa,
    cap,
    sense,
    v_init,
    options,
    tol_override=None,
):
    """Jacobi iteration of the upwind Bellman update over the candidate set."""
    spacing = grid.spacing

    def _weights(vel, cst):
        n_cand = vel.shape[0]
        w_pos = [np.maximum(vel[c], 0.0) / spacing for c in range(n_cand)]
        w_neg = [np.maximum(-vel[c], 0.0) / spacing for c in range(n_cand)]
        denom = [w_pos[c].sum(axis=1) + w_neg[c].sum(axis=1) + kappa for c in range(n_cand)]
        movable = [denom[c] > 1e-300 for c in range(n_cand)]
        return w_pos, w_neg, denom, movable

    w_pos, w_neg, denom, movable = _weights(velocities, costs)
    n_cand = velocities.shape[0]

    v = v_init.copy()
    v[pinned] = pinned_values[pinned]
    tol = tol_override if tol_override is not None else options.sweep_tol * max(1.0, cap)
    sweeps = 0
    for sweeps in range(1, options.max_sweeps + 1):
        best = None
        for c in range(n_cand):
            numer = costs[c].copy()
            for k in range(grid.dim):
                up = np.where(neighbors.plus_valid[k], v[neighbors.plus_idx[k]], cap)
                dn = np.where(neighbors.minus_valid[k], v[neighbors.minus_idx[k]], cap)
                numer += w_pos[c][:, k] * up + w_neg[c][:, k] * dn
            score = np.where(movable[c], numer / np.where(movable[c], denom[c], 1.0), cap)
            best = score if best is None else (np.minimum(best, score) if sense > 0 else np.maximum(best, score))
        if sense < 0:
            best = np.minimum(best, cap)
        best[pinned] = pinned_values[pinned]
        change = float(np.max(np.abs(best - v)))
        v = best
        if change <= tol:
            break
    return v, sweeps


def _upwind_gradient(grid, neighbors, v, sense):
    """Per-dimension motion-consistent one-sided gradient selection.

    For a minimizing player (sense > 0) each component keeps whichever
    one-sided difference signals descent in the direction the induced
    motion would take (steeper side wins at ridges). For a maximizing
    player the selection mirrors to ascent. Missing one-sided differences
    at the boundary contribute zero.
    """
    g = np.zeros((grid.num_points, grid.dim))
    spacing = grid.spacing
    for k in range(grid.dim):
        b = np.where(neighbors.minus_valid[k], (v - v[neighbors.minus_idx[k]]) / spacing[k], 0.0)
        f = np.where(neighbors.plus_valid[k], (v[neighbors.plus_idx[k]] - v) / spacing[k], 0.0)
        if sense > 0:
            cand_b = np.maximum(b, 0.0)  # move backward, downhill
            cand_f = np.minimum(f, 0.0)  # move forward, downhill
        else:
            cand_b = np.minimum(b, 0.0)  # move backward, uphill
            cand_f = np.maximum(f, 0.0)  # move forward, uphill
        g[:, k] = np.where(np.abs(cand_b) >= np.abs(cand_f), cand_b, cand_f)
    return g


def _extract_from_values(
    system, grid, neighbors, v, candidates, cost_fn, sense, exterior_value=None, d_field=None
):
    """Grid policy minimizing (or maximizing) the local Hamiltonian.

    The closed form is only sound when the whole velocity is controlled
    (zero input-independent drift); otherwise the induced motion can point
    where the gradient estimate has no information, notably out of the
    domain, and the alternation with the exact solve cycles. With a drift
    (including a frozen opposing input ``d_field``) the candidates are
    enumerated against one-sided differences that see the exterior value,
    so leaving the domain costs what the solve says it costs.
    """
    pts = grid.points()
    if exterior_value is None:
        spread = float(np.max(v) - np.min(v))
        exterior_value = float(np.max(v)) + spread + 1.0
    affine_ok = (
        d_field is None
        and system.control_affine is not None
        and isinstance(system.input_set, (Ball, Box))
        and not system.input_dependent_cost
    )
    if affine_ok:
        f0_map = system.control_affine[0]
        f0 = np.asarray(f0_map(pts), dtype=float)
        affine_ok = f0.size == 0 or float(np.max(np.abs(f0))) == 0.0
    # gradient components below this threshold count as flat; without the
    # deadband, round-off noise on value plateaus is normalized up to
    # full-magnitude inputs and the policy iteration never settles
    flat_tol = 1e-9 * max(1.0, float(np.max(np.abs(v)))) / float(np.min(grid.spacing))
    if affine_ok:
        g = _upwind_gradient(grid, neighbors, v, sense)
        _, b_map = system.control_affine
        b_vals = np.asarray(b_map(pts), dtype=float)
        if b_vals.ndim == 2:
            b_vals = np.broadcast_to(b_vals[None, :, :], (grid.num_points,) + b_vals.shape)
        h = np.einsum("pnm,pn->pm", b_vals, g)
        if isinstance(system.input_set, Ball):
            norm = np.linalg.norm(h, axis=1, keepdims=True)
            direction = np.where(norm > flat_tol, h / np.where(norm > 0, norm, 1.0), 0.0)
            return (-sense) * system.input_set.radius * direction
        lo = np.asarray(system.input_set.lower, dtype=float)
        hi = np.asarray(system.input_set.upper, dtype=float)
        tie = np.where((lo <= 0) & (0 <= hi), 0.0, lo)
        pick_lo = sense * h > flat_tol
        pick_hi = sense * h < -flat_tol
        return np.where(pick_lo, lo, np.where(pick_hi, hi, tie))

    # enumerate candidates against the downstream-oriented directional
    # derivative; missing neighbors read the exterior value
    spacing = grid.spacing
    fwd, bwd = [], []
    for k in range(grid.dim):
        bwd.append(
            np.where(
                neighbors.minus_valid[k],
                (v - v[neighbors.minus_idx[k]]) / spacing[k],
                (v - exterior_value) / spacing[k],
            )
        )
        fwd.append(
            np.where(
                neighbors.plus_valid[k],
                (v[neighbors.plus_idx[k]] - v) / spacing[k],
                (exterior_value - v) / spacing[k],
            )
        )
    best_obj = None
    best_u = None
    for u in candidates:
        ub = np.broadcast_to(u, (grid.num_points, u.size))
        if d_field is None:
            f_u = np.asarray(system.drift(pts, ub), dtype=float)
        else:
            f_u = np.asarray(system.drift(pts, ub, d_field), dtype=float)
        obj = np.asarray(cost_fn(pts, ub), dtype=float).reshape(-1).copy()
        for k in range(grid.dim):
            obj += np.maximum(f_u[:, k], 0.0) * fwd[k] + np.minimum(f_u[:, k], 0.0) * bwd[k]
        if best_obj is None:
            best_obj = obj.copy()
            best_u = np.broadcast_to(u, (grid.num_points, u.size)).copy()
        else:
            # earlier candidates win ties, with a tolerance so round-off on
            # value plateaus cannot flip the selection between iterations
            better = sense * obj < sense * best_obj - flat_tol
            best_obj = np.where(better, obj, best_obj)
            best_u[better] = u
    return best_u


def _sweep_argmax(grid, neighbors, velocities, costs, v, kappa, cap, sense):
    """Candidate index achieving the converged sweep update at every point.

    First candidate wins ties (within a round-off tolerance), so the
    extracted field is deterministic.
    """
    spacing = grid.spacing
    n_cand = velocities.shape[0]
    tie_tol = 0.0  # strict comparison; equal scores keep the earlier candidate
    best_score = None
    best_idx = np.zeros(grid.num_points, dtype=int)
    for c in range(n_cand):
        w_pos = np.maximum(velocities[c], 0.0) / spacing
        w_neg = np.maximum(-velocities[c], 0.0) / spacing
        denom = w_pos.sum(axis=1) + w_neg.sum(axis=1) + kappa
        movable = denom > 1e-300
        numer = costs[c].copy()
        for k in range(grid.dim):
            up = np.where(neighbors.plus_valid[k], v[neighbors.plus_idx[k]], cap)
            dn = np.where(neighbors.minus_valid[k], v[neighbors.minus_idx[k]], cap)
            numer += w_pos[:, k] * up + w_neg[:, k] * dn
        score = np.where(movable, numer / np.where(movable, denom, 1.0), cap)
        if best_score is None:
            best_score = score
        else:
            better = sense * score < sense * best_score - tie_tol
            best_score = np.where(better, score, best_score)
            best_idx[better] = c
    return best_idx


def _adversary_map(system: ControlledSystem, grid, neighbors):
    """Locally worst disturbance as a function of the current value field.

    Requires a ball disturbance entering affinely; the maximizing direction
    of the linearized Hamiltonian is then radius times the normalized
    ascent gradient pulled back through the disturbance channel, and it
    does not depend on the control.
    """
    dset = system.disturbance_set
    if not isinstance(dset, Ball) or system.disturbance_affine is None:
        raise DensityControlError(
            "adversarial solves need a ball disturbance set entering affinely"
        )
    _, bd_map = system.disturbance_affine
    pts = grid.points()
    bd_vals = np.asarray(bd_map(pts), dtype=float)
    if bd_vals.ndim == 2:
        bd_vals = np.broadcast_to(bd_vals[None, :, :], (grid.num_points,) + bd_vals.shape)

    def worst(v):
        flat_tol = 1e-9 * max(1.0, float(np.max(np.abs(v)))) / float(np.min(grid.spacing))
        g = _upwind_gradient(grid, neighbors, v, sense=-1)
        h = np.einsum("pnm,pn->pm", bd_vals, g)
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        return dset.radius * np.where(norm > flat_tol, h / np.where(norm > 0, norm, 1.0), 0.0)

    return worst


def _solve_bellman(system, grid, cost_fn, sigma, kappa, sense, options, warm=None, adversary=None):
    """Shared engine behind the min-form HJB and the max-form disturbance solve."""
    neighbors = NeighborTable.for_grid(grid)
    candidates = input_candidates(system.input_set, options)
    pts = grid.points()

    def _tables(d_field):
        vel, cost = [], []
        for u in candidates:
            ub = np.broadcast_to(u, (grid.num_points, u.size))
            if d_field is None:
                vel.append(np.asarray(system.drift(pts, ub), dtype=float))
            else:
                vel.append(np.asarray(system.drift(pts, ub, d_field), dtype=float))
            cost.append(np.asarray(cost_fn(pts, ub), dtype=float).reshape(-1) + sigma)
        return np.stack(vel), np.stack(cost)

    if adversary is None:
        velocities, costs = _candidate_tables(system, grid, candidates, cost_fn, sigma)
    else:
        velocities, costs = _tables(adversary(warm if warm is not None else np.zeros(grid.num_points)))

    pinned = _goal_mask(system, grid)
    pinned_values = np.zeros(grid.num_points)
    if np.any(pinned):
        pinned_values[pinned] = np.asarray(system.terminal_cost(pts[pinned]), dtype=float).reshape(-1)
    if not np.any(pinned) and kappa <= 0:
        raise UnreachableGoal("problem has no goal set and no discount; value is unbounded")

    cost_scale = float(np.max(np.abs(costs))) if costs.size else 1.0
    speed = float(np.max(np.abs(velocities))) if velocities.size else 0.0
    if speed <= 0 and kappa <= 0:
        raise UnreachableGoal("no candidate input produces motion")
    if kappa > 0:
        cap = cost_scale / kappa * 1.5 + float(np.max(np.abs(pinned_values))) + 1.0
    else:
        cap = (
            float(np.max(np.abs(pinned_values)))
            + max(cost_scale, 1.0) * options.horizon_factor * float(np.sum(grid.widths)) / max(speed, 1e-12)
        )

    if sense > 0:
        v0 = np.full(grid.num_points, cap) if warm is None else warm.copy()
    else:
        v0 = np.zeros(grid.num_points) if warm is None else warm.copy()

    sweep_only = sense < 0 or adversary is not None
    # the per-point update residual is bounded by the diagonal scale times
    # the last sweep change, so this tolerance makes the sweep limit itself
    # residual grade
    diag_scale = kappa
    for c in range(velocities.shape[0]):
        diag_scale = max(diag_scale, float(np.max(np.sum(np.abs(velocities[c]) / grid.spacing, axis=1))) + kappa)
    fine_tol = options.residual_factor * max(1.0, cost_scale) / max(diag_scale, 1.0) * 0.5

    if adversary is None:
        v, sweeps = _sweep_values(
            grid, neighbors, velocities, costs, pinned, pinned_values, kappa, cap, sense, v0, options,
            tol_override=fine_tol if sweep_only else None,
        )
        if sweep_only and sweeps >= options.max_sweeps:
            raise NoConvergence(f"value sweeps did not settle within {options.max_sweeps}", iterations=sweeps)
        d_frozen = None
    else:
        # bounded alternation: freeze the adversary, converge the frozen
        # game, re-derive the adversary from the new values, and repeat
        # until the adversary field settles (or the restart cap hits, in
        # which case the last frozen game still gives an exact solution
        # and the outer loop measures safety against the true worst case)
        v = v0
        sweeps = 0
        d_frozen = adversary(v0)
        d_tol = 1e-3 * _input_scale(system.disturbance_set)
        for restart in range(options.adversary_restarts):
            velocities, costs = _tables(d_frozen)
            v, extra = _sweep_values(
                grid, neighbors, velocities, costs, pinned, pinned_values, kappa, cap, sense, v, options,
                tol_override=fine_tol,
            )
            sweeps += extra
            if extra >= options.max_sweeps:
                raise NoConvergence(
                    f"frozen-adversary sweeps did not settle within {options.max_sweeps}", iterations=sweeps
                )
            d_new = adversary(v)
            shift = float(np.max(np.abs(d_new - d_frozen)))
            d_frozen = d_new
            if shift <= d_tol:
                break
        velocities, costs = _tables(d_frozen)
        v, extra = _sweep_values(
            grid, neighbors, velocities, costs, pinned, pinned_values, kappa, cap, sense, v, options,
            tol_override=fine_tol,
        )
        sweeps += extra

    if sweep_only:
        # maximizing players and minimax games are often indifferent
        # between flanking routes, so the arg-optimum has no pure fixed
        # point and policy iteration cycles; the sweep limit is the
        # discrete fixed point, and the policy is its recorded arg-optimum
        # over the candidate set
        best = _sweep_argmax(grid, neighbors, velocities, costs, v, kappa, cap, sense)
        policy = candidates[best]
        policy[pinned] = 0.0
        if d_frozen is not None:
            vel_pi = np.asarray(system.drift(pts, policy, d_frozen), dtype=float)
        else:
            vel_pi = np.asarray(system.drift(pts, policy), dtype=float)
        cost_pi = np.asarray(cost_fn(pts, policy), dtype=float).reshape(-1) + sigma
        op = build_transport(grid, vel_pi, pinned, kappa=kappa, neighbors=neighbors)
        residual = op.value_residual(np.minimum(v, cap), cost_pi, pinned_values, cap)
        if sense > 0:
            res_tol = options.residual_factor * max(1.0, float(np.max(np.abs(cost_pi))))
            if residual > res_tol:
                raise NoConvergence(
                    f"sweep residual {residual:.3e} exceeds {res_tol:.3e}", iterations=sweeps
                )
        value = ScalarField(grid, v)
        value.check_finite("value function")
        return ValueField(
            value=value,
            policy=VectorField(grid, policy),
            converged=True,
            sweeps=sweeps,
            policy_iterations=0,
            residual=residual,
        )

    # policy-iteration polish: alternate extraction and exact frozen-policy
    # solves; goal points are absorbed, so their policy rows are zeroed and
    # excluded from the convergence metric
    eps_u = options.policy_tol_factor * _input_scale(system.input_set)
    free = ~pinned

    def _extract(v_now):
        d_now = adversary(v_now) if adversary is not None else None
        pol = _extract_from_values(
            system, grid, neighbors, v_now, candidates, cost_fn, sense, exterior_value=cap, d_field=d_now
        )
        pol[pinned] = 0.0
        return pol

    def _closed_loop(v_now, pol):
        if adversary is None:
            return np.asarray(system.drift(pts, pol), dtype=float)
        return np.asarray(system.drift(pts, pol, adversary(v_now)), dtype=float)

    policy = _extract(v)
    iterations = 0
    converged = False
    residual = np.inf
    cost_pi = None
    v_prev = None
    for iterations in range(1, options.max_policy_iterations + 1):
        vel_pi = _closed_loop(v, policy)
        cost_pi = np.asarray(cost_fn(pts, policy), dtype=float).reshape(-1) + sigma
        op = build_transport(grid, vel_pi, pinned, kappa=kappa, neighbors=neighbors)
        try:
            v = op.solve_value(cost_pi, pinned_values, cap)
        except UnreachableGoal:
            # frozen policy trapped some states; re-sweep and re-extract
            v, extra = _sweep_values(
                grid, neighbors, velocities, costs, pinned, pinned_values, kappa, cap, sense, v, options
            )
            sweeps += extra
            policy = _extract(v)
            continue
        new_policy = _extract(v)
        delta = float(np.max(np.abs((new_policy - policy)[free]))) if np.any(free) else 0.0
        value_shift = float(np.max(np.abs(v - v_prev))) if v_prev is not None else np.inf
        v_prev = v.copy()
        policy = new_policy
        residual = op.value_residual(v, cost_pi, pinned_values, cap)
        if delta <= eps_u:
            converged = True
            break
        if adversary is not None and value_shift <= 1e-10 * max(1.0, cap):
            # against an adversary the argmin can dither along indifference
            # ridges while the game value is already machine-settled
            converged = True
            break
    if not converged:
        raise NoConvergence(
            f"policy iteration did not settle within {options.max_policy_iterations} rounds",
            iterations=iterations,
        )
    res_tol = options.residual_factor * max(1.0, float(np.max(np.abs(cost_pi))))
    if residual > res_tol:
        raise NoConvergence(f"linear residual {residual:.3e} exceeds {res_tol:.3e}", iterations=iterations)

    value = ScalarField(grid, v)
    value.check_finite("value function")
    return ValueField(
        value=value,
        policy=VectorField(grid, policy),
        converged=converged,
        sweeps=sweeps,
        policy_iterations=iterations,
        residual=residual,
    )


def solve_stationary_hjb(problem: HjbProblem, warm_start: Optional[ScalarField] = None) -> ValueField:
    """Solve the stationary (optionally discounted) minimum-cost HJB problem.

    Returns the value on the grid together with the minimizing grid policy.
    The terminal cost is pinned on goal points; ``sigma`` adds a running-cost
    perturbation (the safety multiplier); ``kappa > 0`` switches to the
    discounted form with the extra -kappa V term.
    """
    system = problem.system
    sigma = problem.sigma_values()

    def cost_fn(x, u):
        return system.running_cost(x, u)

    warm = warm_start.values if warm_start is not None else None
    adversary = None
    if problem.adversarial:
        adversary = _adversary_map(system, problem.grid, NeighborTable.for_grid(problem.grid))
    return _solve_bellman(
        system, problem.grid, cost_fn, sigma, problem.kappa, +1, problem.options, warm=warm, adversary=adversary
    )


def extract_policy(
    value,
    system: ControlledSystem,
    disturbance_policy=None,
    options: HjbOptions = None,
) -> VectorField:
    """Greedy grid policy from a solved value function.

    Input-affine systems with ball or box inputs and input-independent cost
    use the closed-form minimizer of the linearized Hamiltonian; anything
    else enumerates a finite input discretization. Ties break toward zero
    input for ball sets and toward the lowest-index candidate otherwise.
    """
    options = options or HjbOptions()
    v_field = value.value if isinstance(value, ValueField) else value
    grid = v_field.grid
    sys_eff = system
    if disturbance_policy is not None:
        from .dynamics import GriddedPolicy

        d_pol = disturbance_policy
        if isinstance(d_pol, VectorField):
            d_pol = GriddedPolicy(d_pol)
        sys_eff = system.with_disturbance_policy(d_pol)
    neighbors = NeighborTable.for_grid(grid)
    candidates = input_candidates(sys_eff.input_set, options)

    def cost_fn(x, u):
        return sys_eff.running_cost(x, u)

    vals = _extract_from_values(sys_eff, grid, neighbors, v_field.values, candidates, cost_fn, +1)
    return VectorField(grid, vals)


def solve_worst_disturbance(
    system: ControlledSystem,
    control_policy: VectorField,
    grid: GridSpec = None,
    options: HjbOptions = None,
) -> tuple:
    """Worst-case disturbance against a frozen controller.

    Maximizes the accumulated time spent inside the danger set before the
    goal is reached. A zero value everywhere off the danger set certifies
    that no disturbance can steer the closed loop into danger.
    """
    options = options or HjbOptions()
    if system.disturbance_set is None:
        raise DensityControlError("system has no disturbance set")
    if grid is None:
        grid = control_policy.grid

    from .grid import interpolate_vector_many

    grid_pts = grid.points()

    def u_at(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape == grid_pts.shape and x is grid_pts:
            return control_policy.values
        return interpolate_vector_many(control_policy, x)

    affine = None
    if system.disturbance_affine is not None:
        g0, bd_map = system.disturbance_affine
        affine = (lambda x, d=None: g0(x, u_at(x)), bd_map)

    d_sys = ControlledSystem(
        dim=system.dim,
        drift=lambda x, d, _ignored=None: system.drift(x, u_at(x), d),
        input_set=system.disturbance_set,
        running_cost=lambda x, d=None: system.in_danger(x).astype(float),
        goal=system.goal,
        danger=system.danger,
        control_affine=affine,
        working_lower=system.working_lower,
        working_upper=system.working_upper,
    )

    sigma = np.zeros(grid.num_points)
    result = _solve_bellman(
        d_sys, grid, lambda x, d=None: d_sys.running_cost(x), sigma, 0.0, -1, options
    )
    return result.policy, result
