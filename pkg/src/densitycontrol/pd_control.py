"""Primal-dual synthesis of density-constrained continuous controllers.

The nominal loop alternates a perturbed HJB solve (the multiplier sigma
enters as extra running cost on the danger set), an exact stationary
density solve under the extracted controller, and projected gradient
ascent on sigma. The robust loop inserts a worst-case disturbance solve
after each controller update and evaluates the density under that
disturbance, so the converged controller is safe against any admissible
disturbance, not just the nominal flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .density import DensityField, SupplyFunction, stationary_density_fdm
from .dynamics import ControlledSystem, GriddedPolicy
from .errors import DensityControlError
from .grid import GridSpec, ScalarField, VectorField
from .hjb import HjbOptions, HjbProblem, ValueField, solve_stationary_hjb, solve_worst_disturbance

__all__ = ["ConstrainedControlProblem", "PrimalDualReport", "run_primal_dual", "run_robust_primal_dual"]


@dataclass
class ConstrainedControlProblem:
    """Continuous control problem with a density cap on the danger set.

    ``rho_max`` = 0 expresses an absolute safety constraint (enforced up to
    a slack of 1e-6 times the density scale). ``alpha`` defaults to the
    running-cost scale divided by the initial danger-set density, so the
    first ascent step perturbs costs by roughly one cost unit.
    """

    system: ControlledSystem
    supply: SupplyFunction
    grid: GridSpec
    rho_max: float = 0.0
    alpha: Optional[float] = None
    eps: float = 1e-6
    max_iterations: int = 100
    max_robust_iterations: int = 300
    kappa: float = 0.0
    hjb_options: HjbOptions = field(default_factory=HjbOptions)

    def __post_init__(self):
        if self.rho_max < 0:
            raise DensityControlError("rho_max must be nonnegative")
        if self.eps <= 0:
            raise DensityControlError("eps must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise DensityControlError("alpha must be positive")


@dataclass
class PrimalDualReport:
    """Outcome of a primal-dual run, with per-iteration diagnostics."""

    policy: VectorField
    density: DensityField
    value: ValueField
    sigma: ScalarField
    iterations: int
    converged: bool
    objective: float
    max_violation_trace: list = field(default_factory=list)
    slackness_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)
    disturbance: Optional[VectorField] = None
    disturbance_value: Optional[ValueField] = None

    def headline(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "J_p": self.objective,
            "max_violation_trace": [float(v) for v in self.max_violation_trace],
            "slackness_trace": [float(s) for s in self.slackness_trace],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.headline(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _danger_mask(system: ControlledSystem, grid: GridSpec) -> np.ndarray:
    return system.in_danger(grid.points())


def _objective(supply: SupplyFunction, grid: GridSpec, value: np.ndarray) -> float:
    phi = supply.phi_plus(grid.points())
    return float(np.sum(phi * value) * grid.cell_volume)


def _slackness(grid, sigma, rho, rho_max, danger) -> float:
    excess = np.maximum(0.0, rho - rho_max) * danger
    return float(np.sum(sigma * excess) * grid.cell_volume)


def _cost_scale(problem, grid) -> float:
    pts = grid.points()
    zeros = np.zeros((grid.num_points, _input_width(problem.system)))
    return max(float(np.max(np.abs(problem.system.running_cost(pts, zeros)))), 1.0)


def _input_width(system: ControlledSystem) -> int:
    iset = system.input_set
    if hasattr(iset, "dim"):
        return iset.dim
    raise DensityControlError("cannot infer input dimension")


def _oscillating(trace) -> bool:
    if len(trace) < 3:
        return False
    d1 = trace[-1] - trace[-2]
    d2 = trace[-2] - trace[-3]
    return bool(np.isfinite(d1) and np.isfinite(d2) and d1 * d2 < 0)


def run_primal_dual(problem: ConstrainedControlProblem) -> PrimalDualReport:
    """Density-constrained controller synthesis without disturbance.

    Loop: solve the sigma-perturbed HJB, compute the stationary density
    under the extracted controller, ascend sigma on the danger-set excess.
    Exits once the danger-set density respects the cap (with slack) and the
    complementary slackness inner product drops below ``eps``.
    """
    return _primal_dual_loop(problem, robust=False)


def run_robust_primal_dual(problem: ConstrainedControlProblem) -> PrimalDualReport:
    """Robust variant: each round re-solves the worst-case disturbance for
    the current controller, and the density is evaluated under it. The
    ascent uses the danger-set density itself (no cap subtraction), the
    exit test still compares against the cap."""
    if problem.system.disturbance_set is None:
        raise DensityControlError("robust synthesis needs a disturbance set")
    return _primal_dual_loop(problem, robust=True)


def _primal_dual_loop(problem: ConstrainedControlProblem, robust: bool) -> PrimalDualReport:
    system = problem.system
    grid = problem.grid
    supply = problem.supply
    danger = _danger_mask(system, grid).astype(float)
    sigma = np.zeros(grid.num_points)
    alpha = problem.alpha
    alpha_gain = 1.0
    max_iter = problem.max_robust_iterations if robust else problem.max_iterations

    warm: Optional[ScalarField] = None
    d_policy: Optional[VectorField] = None
    d_value: Optional[ValueField] = None
    report_density = None
    value = None
    policy = None
    violation_trace, slackness_trace, objective_trace = [], [], []
    converged = False
    iterations = 0
    slack_scale = 0.0

    for iterations in range(1, max_iter + 1):
        # in the robust case the controller solve plays against the locally
        # worst disturbance derived from its own value; the density and the
        # exit test then use the exact worst-case response to the extracted
        # controller, as the outer loop prescribes
        hjb = HjbProblem(
            system=system,
            grid=grid,
            sigma=ScalarField(grid, sigma),
            kappa=problem.kappa,
            adversarial=robust,
            options=problem.hjb_options,
        )
        value = solve_stationary_hjb(hjb, warm_start=warm)
        warm = value.value
        policy = value.policy

        if robust:
            d_policy, d_value = solve_worst_disturbance(system, policy, grid, problem.hjb_options)
            sys_density = system.with_disturbance_policy(GriddedPolicy(d_policy))
        else:
            sys_density = system
        report_density = stationary_density_fdm(sys_density, policy, supply, grid)
        rho = report_density.values

        if problem.alpha is None:
            # normalized ascent: the worst danger cell gains one cost unit of
            # sigma per round, so sealing pressure does not fade as the
            # residual violation shrinks
            worst = float(np.max(rho * danger, initial=0.0))
            alpha = _cost_scale(problem, grid) / max(worst, 1e-12) * float(alpha_gain)

        ascent = rho * danger if robust else (rho - problem.rho_max) * danger
        sigma = np.maximum(0.0, sigma + alpha * ascent)

        rho_scale = float(np.max(rho, initial=0.0))
        slack_scale = 1e-6 * rho_scale
        violation = float(np.max(rho * danger, initial=0.0))
        slackness = _slackness(grid, sigma, rho, problem.rho_max, danger)
        objective = _objective(supply, grid, value.value.values)
        violation_trace.append(violation)
        slackness_trace.append(slackness)
        objective_trace.append(objective)

        if _oscillating(objective_trace):
            if problem.alpha is None:
                alpha_gain *= 0.5
            else:
                alpha *= 0.5

        if violation <= problem.rho_max + slack_scale and slackness <= problem.eps:
            converged = True
            break

    return PrimalDualReport(
        policy=policy,
        density=report_density,
        value=value,
        sigma=ScalarField(grid, sigma),
        iterations=iterations,
        converged=converged,
        objective=objective_trace[-1] if objective_trace else float("nan"),
        max_violation_trace=violation_trace,
        slackness_trace=slackness_trace,
        objective_trace=objective_trace,
        disturbance=d_policy,
        disturbance_value=d_value,
    )
