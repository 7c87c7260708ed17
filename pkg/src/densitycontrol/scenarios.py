"""Ready-made problem instances: robot navigation, a seven-region traffic
network, and a one-dimensional constant-drift transport used for density
cross-validation.

Every quantity that is a stand-in rather than a specified value (supply
bump placement, traffic demands, the traffic map) is a named config field,
so alternates can be run without code changes. Configs round-trip through
JSON; packaged defaults live in ``scenario_configs/``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .density import SupplyFunction
from .dynamics import Ball, ConstantPolicy, ControlledSystem, FiniteSet, GoalRegion
from .errors import DensityControlError
from .grid import GridSpec
from .hjb import HjbOptions
from .mdp_core import MdpModel, StochasticPolicy, stationary_density, value_iteration
from .mdp_pd import ConstrainedMdpProblem
from .pd_control import ConstrainedControlProblem

__all__ = [
    "ScenarioConfig",
    "load_scenario_config",
    "robot_nav",
    "robot_nav_disturbed",
    "drift1d",
    "traffic7",
    "traffic7_unconstrained",
    "Drift1dScenario",
    "SCENARIO_IDS",
]

SCENARIO_IDS = ("robot_nav", "robot_nav_disturbed", "drift1d", "traffic7")

_BOUNDARY_EPS = 1e-9  # predicate slack so grid-aligned boundary points count as inside


@dataclass
class ScenarioConfig:
    """Everything needed to rebuild a scenario deterministically."""

    scenario: str
    version: int = 1
    seed: int = 0
    grid: dict = field(default_factory=dict)
    supply: dict = field(default_factory=dict)
    goal: dict = field(default_factory=dict)
    danger: Optional[dict] = None
    disturbance: Optional[dict] = None
    solver: dict = field(default_factory=dict)
    traffic: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DensityControlError(f"unknown config field(s): {sorted(unknown)}")
        if "scenario" not in data:
            raise DensityControlError("config is missing the 'scenario' field")
        return cls(**data)

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_scenario_config(name_or_path) -> ScenarioConfig:
    """Load a packaged config by scenario id, or any config from a path."""
    name = str(name_or_path)
    if name in SCENARIO_IDS:
        ref = resources.files("densitycontrol").joinpath(f"scenario_configs/{name}.json")
        data = json.loads(ref.read_text())
    else:
        with open(name) as fh:
            data = json.load(fh)
    return ScenarioConfig.from_dict(data)


def _grid_from_config(cfg: dict) -> GridSpec:
    return GridSpec(tuple(cfg["lower"]), tuple(cfg["upper"]), tuple(cfg["cells"]))


def _ball_goal(cfg: dict) -> GoalRegion:
    center = np.asarray(cfg["center"], dtype=float)
    radius = float(cfg["radius"])
    return GoalRegion(
        predicate=lambda x: np.linalg.norm(x - center, axis=1) <= radius + _BOUNDARY_EPS,
        centroid=tuple(center),
        description=f"ball(center={cfg['center']}, radius={radius})",
    )


def _truncated_gaussian_bumps(cfg: dict):
    """Sum of radially truncated Gaussian bumps normalized to a total rate.

    Each bump integrates (in 2D) to 2 pi s^2 (1 - exp(-c^2/2)) before
    scaling, with c the truncation in units of s, so the amplitude below
    makes the analytic total equal ``rate``.
    """
    centers = np.asarray(cfg["centers"], dtype=float)
    width = float(cfg["width"])
    cut = float(cfg.get("truncation_sigmas", 3.0))
    rate = float(cfg.get("rate", 1.0))
    per_bump = rate / centers.shape[0]
    mass_one = 2.0 * np.pi * width**2 * (1.0 - np.exp(-0.5 * cut**2))
    amp = per_bump / mass_one

    def phi(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = np.zeros(x.shape[0])
        for c in centers:
            d2 = np.sum((x - c) ** 2, axis=1)
            inside = d2 <= (cut * width) ** 2
            total += np.where(inside, amp * np.exp(-0.5 * d2 / width**2), 0.0)
        return total

    return phi


def _hjb_options(solver: dict) -> HjbOptions:
    kwargs = {}
    for key in ("ball_directions", "max_sweeps", "max_policy_iterations"):
        if key in solver:
            kwargs[key] = solver[key]
    return HjbOptions(**kwargs)


def _robot_system(config: ScenarioConfig, with_disturbance: bool) -> ControlledSystem:
    goal = _ball_goal(config.goal)
    danger = None
    if config.danger is not None:
        d_center = np.asarray(config.danger["center"], dtype=float)
        d_radius = float(config.danger["radius"])
        danger = lambda x: np.linalg.norm(np.atleast_2d(x) - d_center, axis=1) <= d_radius + _BOUNDARY_EPS
    input_radius = float(config.solver.get("input_radius", 0.5))
    dist = None
    dist_affine = None
    if with_disturbance:
        if config.disturbance is None:
            raise DensityControlError("disturbed scenario needs a disturbance block")
        dist = Ball(float(config.disturbance["radius"]), 2)
        dist_affine = (
            lambda x, u: np.asarray(u, dtype=float),
            lambda x: np.broadcast_to(np.eye(2), (np.atleast_2d(x).shape[0], 2, 2)),
        )

    def drift(x, u, d=None):
        u = np.asarray(u, dtype=float)
        out = np.broadcast_to(u, np.atleast_2d(x).shape).copy()
        if d is not None:
            out = out + d
        return out

    def running_cost(x, u=None):
        x = np.atleast_2d(x)
        return 1.0 - goal.contains(x).astype(float)

    lower = tuple(config.grid["lower"])
    upper = tuple(config.grid["upper"])
    return ControlledSystem(
        dim=2,
        drift=drift,
        input_set=Ball(input_radius, 2),
        running_cost=running_cost,
        terminal_cost=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        goal=goal,
        danger=danger,
        disturbance_set=dist,
        divergence=lambda x, u, d=None: np.zeros(np.atleast_2d(x).shape[0]),
        control_affine=(
            lambda x, d=None: np.zeros_like(np.atleast_2d(x)) if d is None else np.broadcast_to(d, np.atleast_2d(x).shape).astype(float),
            lambda x: np.broadcast_to(np.eye(2), (np.atleast_2d(x).shape[0], 2, 2)),
        ),
        disturbance_affine=dist_affine,
        working_lower=lower,
        working_upper=upper,
    )


def robot_nav(config: Optional[ScenarioConfig] = None) -> ConstrainedControlProblem:
    """Planar navigation to a small goal disk with a density-forbidden disk.

    Supply is a documented stand-in (truncated Gaussian bumps on the far
    side of the danger disk) with the bump geometry in the config.
    """
    config = config or load_scenario_config("robot_nav")
    grid = _grid_from_config(config.grid)
    system = _robot_system(config, with_disturbance=False)
    supply = SupplyFunction(positive_rate=_truncated_gaussian_bumps(config.supply), sink_mode="goal")
    return ConstrainedControlProblem(
        system=system,
        supply=supply,
        grid=grid,
        rho_max=float(config.solver.get("rho_max", 0.0)),
        alpha=config.solver.get("alpha"),
        eps=float(config.solver.get("eps", 1e-6)),
        max_iterations=int(config.solver.get("max_iterations", 100)),
        hjb_options=_hjb_options(config.solver),
    )


def robot_nav_disturbed(config: Optional[ScenarioConfig] = None) -> ConstrainedControlProblem:
    """Robot navigation with a norm-bounded disturbance half the input size."""
    config = config or load_scenario_config("robot_nav_disturbed")
    grid = _grid_from_config(config.grid)
    system = _robot_system(config, with_disturbance=True)
    supply = SupplyFunction(positive_rate=_truncated_gaussian_bumps(config.supply), sink_mode="goal")
    return ConstrainedControlProblem(
        system=system,
        supply=supply,
        grid=grid,
        rho_max=float(config.solver.get("rho_max", 0.0)),
        alpha=config.solver.get("alpha"),
        eps=float(config.solver.get("eps", 1e-6)),
        max_iterations=int(config.solver.get("max_iterations", 100)),
        max_robust_iterations=int(config.solver.get("max_robust_iterations", 300)),
        hjb_options=_hjb_options(config.solver),
    )


@dataclass
class Drift1dScenario:
    """Constant leftward drift into an absorbing left goal, uniform supply."""

    system: ControlledSystem
    policy: ConstantPolicy
    supply: SupplyFunction
    grid: GridSpec
    config: ScenarioConfig


def drift1d(config: Optional[ScenarioConfig] = None) -> Drift1dScenario:
    """One-dimensional transport benchmark with a closed-form stationary
    density, used to cross-validate the ODE, FDM, and KDE density routes."""
    config = config or load_scenario_config("drift1d")
    grid = _grid_from_config(config.grid)
    speed = float(config.solver.get("drift", -0.5))
    goal_edge = float(config.goal["edge"])
    lo = float(config.supply["support"][0])
    hi = float(config.supply["support"][1])
    rate = float(config.supply.get("rate", 1.0))
    amp = rate / (hi - lo)
    goal = GoalRegion(
        predicate=lambda x: x[:, 0] <= goal_edge + _BOUNDARY_EPS,
        centroid=(0.5 * (grid.lower[0] + goal_edge),),
        description=f"halfline(x <= {goal_edge})",
    )
    system = ControlledSystem(
        dim=1,
        drift=lambda x, u, d=None: np.broadcast_to(np.asarray(u, dtype=float), np.atleast_2d(x).shape),
        input_set=FiniteSet(((speed,),)),
        running_cost=lambda x, u=None: np.ones(np.atleast_2d(x).shape[0]),
        goal=goal,
        divergence=lambda x, u, d=None: np.zeros(np.atleast_2d(x).shape[0]),
        working_lower=grid.lower,
        working_upper=grid.upper,
    )
    supply = SupplyFunction(
        positive_rate=lambda x: np.where((x[:, 0] >= lo) & (x[:, 0] <= hi), amp, 0.0),
        sink_mode="goal",
    )
    return Drift1dScenario(system, ConstantPolicy([speed]), supply, grid, config)


def _traffic_models(config: ScenarioConfig):
    """Seven single-destination MDPs on a ring-plus-hub region graph."""
    tcfg = config.traffic
    n = 7
    cost = np.asarray(tcfg["state_cost"], dtype=float)
    if cost.size != n:
        raise DensityControlError("traffic state_cost must have 7 entries")
    adjacency = {int(k): sorted(int(j) for j in v) for k, v in tcfg["adjacency"].items()}
    demand = float(tcfg.get("demand", 0.5))

    available = np.zeros((n, n), dtype=bool)
    for s, neigh in adjacency.items():
        for j in neigh:
            available[s, j] = True
    transitions = np.zeros((n, n, n))
    rewards = np.zeros((n, n, n))
    for a in range(n):
        for s in range(n):
            transitions[a, s, a] = 1.0
            rewards[a, s, a] = cost[s]

    models = []
    for dest in range(n):
        phi = np.full(n, demand)
        phi[dest] = 0.0
        models.append(
            MdpModel(
                transitions=transitions,
                rewards=rewards,
                gamma=1.0,
                available=available,
                sink=(dest,),
                phi_plus=phi,
            )
        )
    return models, cost


def traffic7_unconstrained(config: Optional[ScenarioConfig] = None):
    """Independent shortest-cost solutions of the seven destination MDPs.

    Returns (policies, densities, cumulative_density, total_cost). The
    costs are minimized, so value iteration runs on negated rewards.
    """
    config = config or load_scenario_config("traffic7")
    models, cost = _traffic_models(config)
    policies, densities = [], []
    for model in models:
        neg = MdpModel(
            transitions=model.transitions,
            rewards=-model.rewards,
            gamma=model.gamma,
            available=model.available,
            sink=model.sink,
            phi_plus=model.phi_plus,
        )
        _, pol = value_iteration(neg)
        policies.append(pol)
        densities.append(stationary_density(model, pol))
    rho_c = np.sum(densities, axis=0)
    total_cost = float(np.sum(rho_c * cost))
    return policies, densities, rho_c, total_cost


def traffic7(config: Optional[ScenarioConfig] = None) -> ConstrainedMdpProblem:
    """Traffic assignment over seven regions with a hub-capacity cap.

    The cap binds only on the hub region; by default it is set to a config
    fraction of the hub's unconstrained cumulative density, which forces
    rerouting and a stochastic constrained optimum.
    """
    config = config or load_scenario_config("traffic7")
    models, cost = _traffic_models(config)
    tcfg = config.traffic
    capped_state = int(tcfg.get("capped_state", 6))
    rho_max = np.full(7, np.inf)
    if "rho_max_value" in tcfg:
        rho_max[capped_state] = float(tcfg["rho_max_value"])
    else:
        _, _, rho_c, _ = traffic7_unconstrained(config)
        rho_max[capped_state] = float(tcfg.get("cap_fraction", 0.6)) * rho_c[capped_state]
    solver = config.solver
    return ConstrainedMdpProblem(
        models=models,
        rho_max=rho_max,
        alpha=solver.get("alpha"),
        beta=solver.get("beta"),
        eps=float(solver.get("eps", 1e-4)),
        max_iterations=int(solver.get("max_iterations", 5000)),
        maximize=False,
    )
