"""Primal-dual optimization of density-constrained MDP policies.

One loop serves both the single-MDP and the multi-MDP case: each MDP takes
a projected policy-gradient step weighted by its own stationary density,
densities are re-solved exactly, and a shared multiplier ascends on the
cumulative density constraint violation. The value solve penalizes capped
states by subtracting the multiplier from the reward, which steers flow
away from overloaded states; ascent stops when the iterate is feasible and
the policies have stopped moving.

`oracle_constrained_mdp` solves the same problem exactly as a linear
program over state-action occupations with the in-repo simplex method; it
exists so the iterative algorithm can be validated against an independent
route.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._simplex_lp import linprog_max
from .errors import DensityControlError, Infeasible, NoAvailableAction, SingularSystem
from .mdp_core import (
    MdpModel,
    StochasticPolicy,
    policy_reward,
    policy_value,
    stationary_density,
)

__all__ = [
    "ConstrainedMdpProblem",
    "MultiMdpReport",
    "advantage",
    "project_simplex",
    "run_constrained_mdp",
    "run_multi_mdp",
    "oracle_constrained_mdp",
]

FEASIBILITY_SLACK = 1e-6


@dataclass
class ConstrainedMdpProblem:
    """One or several MDPs sharing a state set, plus a density cap per state.

    ``rho_max`` entries may be +inf where no cap applies. ``maximize``
    selects the optimization sense; costs are handled as negated rewards.
    Step sizes alpha (policy) and beta (dual) default to scales derived
    from the initial advantage and supply magnitudes.
    """

    models: list
    rho_max: np.ndarray
    alpha: Optional[float] = None
    beta: Optional[float] = None
    eps: float = 1e-4
    max_iterations: int = 5000
    maximize: bool = True
    initial_policies: Optional[list] = None

    def __post_init__(self):
        if isinstance(self.models, MdpModel):
            self.models = [self.models]
        if not self.models:
            raise DensityControlError("need at least one MDP")
        n = self.models[0].num_states
        if any(m.num_states != n for m in self.models):
            raise DensityControlError("all MDPs must share the state count")
        self.rho_max = np.asarray(self.rho_max, dtype=float).reshape(-1)
        if self.rho_max.size != n:
            raise DensityControlError("rho_max must have one entry per state")
        if np.any(self.rho_max < 0):
            raise DensityControlError("rho_max must be nonnegative")


@dataclass
class MultiMdpReport:
    """Converged (or capped-out) state of the primal-dual iteration."""

    policies: list
    densities: list
    cumulative_density: np.ndarray
    values: list
    sigma: np.ndarray
    iterations: int
    converged: bool
    objective: float
    objective_trace: list = field(default_factory=list)
    violation_trace: list = field(default_factory=list)
    policy_change_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "objective": self.objective,
            "sigma": self.sigma.tolist(),
            "cumulative_density": self.cumulative_density.tolist(),
            "policies": [p.tolist() for p in self.policies],
            "densities": [d.tolist() for d in self.densities],
            "values": [v.tolist() for v in self.values],
            "objective_trace": list(self.objective_trace),
            "violation_trace": list(self.violation_trace),
            "policy_change_trace": list(self.policy_change_trace),
        }


def advantage(model: MdpModel, policy, value: np.ndarray) -> np.ndarray:
    """Per-state action advantages sum_s' P_a (R_a + gamma V(s')) - V(s).

    Sink-state values enter as zero (the state vanishes there); rows are
    zeroed on unavailable actions.
    """
    v = np.asarray(value, dtype=float).reshape(-1)
    cont = np.where(model.sink_mask, 0.0, v)
    q = np.einsum("asp,asp->sa", model.transitions, model.rewards) + model.gamma * np.einsum(
        "asp,p->sa", model.transitions, cont
    )
    adv = q - v[:, None]
    adv[~model.available] = 0.0
    return adv


def project_simplex(row, mask=None) -> np.ndarray:
    """Euclidean projection onto the probability simplex, masked coordinates
    pinned to zero. Sort-and-threshold; exact up to float arithmetic."""
    row = np.asarray(row, dtype=float).reshape(-1)
    if mask is None:
        mask = np.ones(row.size, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not np.any(mask):
        raise NoAvailableAction("no available action to project onto")
    y = row[mask]
    srt = np.sort(y)[::-1]
    cumsum = np.cumsum(srt)
    k = np.arange(1, y.size + 1)
    feasible = srt - (cumsum - 1.0) / k > 0
    last = int(np.nonzero(feasible)[0][-1])
    tau = (cumsum[last] - 1.0) / (last + 1)
    out = np.zeros(row.size)
    out[mask] = np.maximum(y - tau, 0.0)
    return out


def _dual_step(sigma, beta, rho_c, rho_max):
    finite = np.isfinite(rho_max)
    step = np.zeros_like(sigma)
    step[finite] = beta * (rho_c[finite] - rho_max[finite])
    return np.maximum(0.0, sigma + step)


def _objective(models, policies, densities, sign) -> float:
    total = 0.0
    for model, pi, rho in zip(models, policies, densities):
        reward = policy_reward(model, pi)
        free = ~model.sink_mask
        total += float(np.sum(rho[free] * reward[free]))
    return sign * total


def _run_primal_dual_mdp(problem: ConstrainedMdpProblem) -> MultiMdpReport:
    sign = 1.0 if problem.maximize else -1.0
    models = problem.models
    if sign < 0:
        models = [
            MdpModel(
                transitions=m.transitions,
                rewards=-m.rewards,
                gamma=m.gamma,
                available=m.available,
                sink=m.sink,
                phi_plus=m.phi_plus,
            )
            for m in problem.models
        ]
    k_count = len(models)
    n = models[0].num_states

    if problem.initial_policies is not None:
        policies = [np.asarray(p, dtype=float).copy() for p in problem.initial_policies]
    else:
        policies = [StochasticPolicy.uniform(m).probs for m in models]
    densities = [stationary_density(m, p) for m, p in zip(models, policies)]

    values = [policy_value(m, p) for m, p in zip(models, policies)]
    adv_scale = max(float(np.max(np.abs(advantage(m, p, v)))) for m, p, v in zip(models, policies, values))
    supply_scale = max(float(np.max(m.phi_plus)) for m in models)
    alpha = problem.alpha if problem.alpha is not None else 0.1 / max(adv_scale, 1e-9)
    beta = problem.beta if problem.beta is not None else 0.5 / max(supply_scale, 1e-9)

    sigma = np.zeros(n)
    objective_trace, violation_trace, change_trace = [], [], []
    converged = False
    iterations = 0
    for iterations in range(1, problem.max_iterations + 1):
        max_change = 0.0
        new_policies = []
        for k in range(k_count):
            v_k = policy_value(models[k], policies[k], -sigma)
            adv_k = advantage(models[k], policies[k], v_k)
            target = policies[k] + alpha * densities[k][:, None] * adv_k
            new_pi = np.vstack(
                [project_simplex(target[s], models[k].available[s]) for s in range(n)]
            )
            max_change = max(max_change, float(np.max(np.abs(new_pi - policies[k]))))
            new_policies.append(new_pi)
        try:
            new_densities = [stationary_density(m, p) for m, p in zip(models, new_policies)]
        except SingularSystem:
            # a projected step stranded some state away from every sink;
            # shrink the policy step and retry from the previous iterate
            alpha *= 0.5
            change_trace.append(np.nan)
            objective_trace.append(np.nan)
            violation_trace.append(np.nan)
            continue
        policies = new_policies
        densities = new_densities
        rho_c = np.sum(densities, axis=0)
        sigma = _dual_step(sigma, beta, rho_c, problem.rho_max)

        finite = np.isfinite(problem.rho_max)
        violation = float(np.max((rho_c - problem.rho_max)[finite], initial=0.0))
        objective_trace.append(_objective(models, policies, densities, sign))
        violation_trace.append(violation)
        change_trace.append(max_change)

        if len(objective_trace) >= 3:
            d1 = objective_trace[-1] - objective_trace[-2]
            d2 = objective_trace[-2] - objective_trace[-3]
            if np.isfinite(d1) and np.isfinite(d2) and d1 * d2 < 0:
                alpha *= 0.5
                beta *= 0.5

        if violation <= FEASIBILITY_SLACK and max_change <= problem.eps:
            converged = True
            break

    values = [sign * policy_value(m, p) for m, p in zip(models, policies)]
    rho_c = np.sum(densities, axis=0)
    report = MultiMdpReport(
        policies=policies,
        densities=densities,
        cumulative_density=rho_c,
        values=values,
        sigma=sigma,
        iterations=iterations,
        converged=converged,
        objective=_objective(models, policies, densities, sign),
        objective_trace=objective_trace,
        violation_trace=violation_trace,
        policy_change_trace=change_trace,
    )
    return report


def run_constrained_mdp(problem: ConstrainedMdpProblem) -> MultiMdpReport:
    """Density-constrained optimization of a single MDP (projected
    policy-gradient ascent with a dual multiplier on the density cap)."""
    if len(problem.models) != 1:
        raise DensityControlError("run_constrained_mdp expects exactly one MDP")
    return _run_primal_dual_mdp(problem)


def run_multi_mdp(problem: ConstrainedMdpProblem) -> MultiMdpReport:
    """Joint optimization of several MDPs under a cumulative density cap.

    All MDPs share the state set and one multiplier; each keeps its own
    policy, supply, and sink.
    """
    return _run_primal_dual_mdp(problem)


def oracle_constrained_mdp(model: MdpModel, rho_max, maximize: bool = True):
    """Exact LP solution over state-action occupations, for validation.

    Variables y(s, a) >= 0 on available pairs satisfy the stationary flow
    balance sum_a y(s, a) = gamma sum_{s', a'} P_a'(s', s) y(s', a') +
    phi+(s) and the caps sum_a y(s, a) <= rho_max(s). Returns the optimal
    objective and the occupation array. Sink-free models only.
    """
    if model.sink:
        raise DensityControlError("the LP oracle covers sink-free models")
    n, m = model.num_states, model.num_actions
    rho_max = np.asarray(rho_max, dtype=float).reshape(-1)
    if rho_max.size != n:
        raise DensityControlError("rho_max must have one entry per state")
    pairs = [(s, a) for s in range(n) for a in range(m) if model.available[s, a]]
    nv = len(pairs)
    col = {sa: j for j, sa in enumerate(pairs)}

    a_eq = np.zeros((n, nv))
    for j, (s, a) in enumerate(pairs):
        a_eq[s, j] += 1.0
        a_eq[:, j] -= model.gamma * model.transitions[a, s, :]
    b_eq = model.phi_plus.copy()

    capped = [s for s in range(n) if np.isfinite(rho_max[s])]
    a_ub = None
    b_ub = None
    if capped:
        a_ub = np.zeros((len(capped), nv))
        for i, s in enumerate(capped):
            for a in range(m):
                if model.available[s, a]:
                    a_ub[i, col[(s, a)]] = 1.0
        b_ub = rho_max[capped]

    r_sa = model.expected_rewards()
    c = np.array([r_sa[s, a] for (s, a) in pairs])
    if not maximize:
        c = -c
    y_flat, objective = linprog_max(c, a_eq=a_eq, b_eq=b_eq, a_ub=a_ub, b_ub=b_ub)
    if not maximize:
        objective = -objective
    y = np.zeros((n, m))
    for j, (s, a) in enumerate(pairs):
        y[s, a] = y_flat[j]
    return objective, y
