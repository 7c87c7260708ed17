"""Finite-MDP algebra: transition matrices, densities, values, and duality.

Value and density solves share one matrix (the value system and its
transpose), so the overall-reward identity <phi+, V> = <rho_s, R + sigma>
holds to linear-solver precision for any fixed policy. Sink states get
their transition columns cropped (inbound mass is absorbed) and their rows
pinned, which realizes the absorbing-destination semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DensityControlError,
    InvalidPolicy,
    NoConvergence,
    SingularSystem,
)

__all__ = [
    "MdpModel",
    "StochasticPolicy",
    "transition_matrix",
    "cropped_matrix",
    "stationary_density",
    "density_step",
    "policy_value",
    "value_iteration",
    "duality_gap",
    "random_mdp",
]

_ROW_SUM_TOL = 1e-12
_SOLVE_RESIDUAL_TOL = 1e-10


@dataclass
class MdpModel:
    """Finite MDP with availability masks, optional sink set, and supply.

    ``transitions`` has shape (actions, states, states) with row-stochastic
    slices for every available (state, action); ``rewards`` matches it.
    ``sink`` lists absorbing destination states whose value is pinned to
    zero and whose inbound mass vanishes after one step.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    available: Optional[np.ndarray] = None
    sink: tuple = ()
    phi_plus: Optional[np.ndarray] = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.transitions.ndim != 3 or self.transitions.shape[1] != self.transitions.shape[2]:
            raise DensityControlError("transitions must have shape (actions, states, states)")
        if self.rewards.shape != self.transitions.shape:
            raise DensityControlError("rewards must match transitions in shape")
        m, n, _ = self.transitions.shape
        if self.available is None:
            self.available = np.ones((n, m), dtype=bool)
        else:
            self.available = np.asarray(self.available, dtype=bool)
            if self.available.shape != (n, m):
                raise DensityControlError("availability mask must have shape (states, actions)")
            if not np.all(self.available.any(axis=1)):
                raise DensityControlError("every state needs at least one available action")
        self.sink = tuple(int(s) for s in self.sink)
        if any(s < 0 or s >= n for s in self.sink):
            raise DensityControlError("sink states out of range")
        if self.phi_plus is None:
            self.phi_plus = np.zeros(n)
        else:
            self.phi_plus = np.asarray(self.phi_plus, dtype=float).reshape(-1)
            if self.phi_plus.size != n:
                raise DensityControlError("phi_plus must have one entry per state")
            if np.any(self.phi_plus < 0):
                raise DensityControlError("phi_plus must be nonnegative")
        if not (0.0 < self.gamma <= 1.0):
            raise DensityControlError("gamma must lie in (0, 1]")
        if self.gamma == 1.0 and not self.sink:
            raise DensityControlError("gamma = 1 requires a nonempty sink set")
        for a in range(m):
            rows = np.nonzero(self.available[:, a])[0]
            sums = self.transitions[a, rows].sum(axis=1)
            if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
                raise DensityControlError(f"action {a} has non-stochastic rows at available states")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def sink_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.sink)] = True
        return mask

    def expected_rewards(self) -> np.ndarray:
        """r(s, a) = sum_s' P_a(s, s') R_a(s, s'), shape (states, actions)."""
        return np.einsum("asp,asp->sa", self.transitions, self.rewards)

    def to_dict(self) -> dict:
        return {
            "states": self.num_states,
            "actions": self.num_actions,
            "gamma": self.gamma,
            "sink": list(self.sink),
            "phi_plus": self.phi_plus.tolist(),
            "available": self.available.tolist(),
            "P": self.transitions.tolist(),
            "R": self.rewards.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MdpModel":
        model = cls(
            transitions=np.asarray(data["P"], dtype=float),
            rewards=np.asarray(data["R"], dtype=float),
            gamma=float(data["gamma"]),
            available=np.asarray(data["available"], dtype=bool) if "available" in data else None,
            sink=tuple(data.get("sink", ())),
            phi_plus=np.asarray(data["phi_plus"], dtype=float) if "phi_plus" in data else None,
        )
        if "states" in data and model.num_states != int(data["states"]):
            raise DensityControlError("state count mismatch in MDP file")
        if "actions" in data and model.num_actions != int(data["actions"]):
            raise DensityControlError("action count mismatch in MDP file")
        return model


@dataclass
class StochasticPolicy:
    """Per-state distributions over actions, zero on unavailable actions."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise InvalidPolicy("policy must have shape (states, actions)")

    def validate(self, model: MdpModel, tol: float = 1e-9):
        if self.probs.shape != (model.num_states, model.num_actions):
            raise InvalidPolicy("policy shape does not match the model")
        if np.any(self.probs < -tol):
            raise InvalidPolicy("policy has negative probabilities")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidPolicy("policy rows must sum to one")
        if np.any(self.probs[~model.available] > tol):
            raise InvalidPolicy("policy puts mass on unavailable actions")

    @classmethod
    def uniform(cls, model: MdpModel) -> "StochasticPolicy":
        probs = model.available.astype(float)
        return cls(probs / probs.sum(axis=1, keepdims=True))

    @classmethod
    def deterministic(cls, model: MdpModel, actions) -> "StochasticPolicy":
        probs = np.zeros((model.num_states, model.num_actions))
        probs[np.arange(model.num_states), np.asarray(actions, dtype=int)] = 1.0
        return cls(probs)


def _policy_array(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, StochasticPolicy) else np.asarray(policy, dtype=float)


def transition_matrix(model: MdpModel, policy) -> np.ndarray:
    """Policy-averaged transition matrix P^pi, rows summing to one."""
    pi = _policy_array(policy)
    StochasticPolicy(pi).validate(model)
    p = np.einsum("sa,asp->sp", pi, model.transitions)
    return p


def cropped_matrix(model: MdpModel, policy) -> np.ndarray:
    """P^pi with sink columns zeroed: inbound mass is absorbed, not relayed."""
    p = transition_matrix(model, policy)
    if model.sink:
        p = p.copy()
        p[:, list(model.sink)] = 0.0
    return p


def policy_reward(model: MdpModel, policy) -> np.ndarray:
    """Expected one-step reward per state under the policy."""
    pi = _policy_array(policy)
    r_sa = np.einsum("asp,asp->sa", model.transitions, model.rewards)
    return np.einsum("sa,sa->s", pi, r_sa)


def _value_matrix(model: MdpModel, policy) -> np.ndarray:
    """(I - gamma P~^pi) with sink rows pinned to identity.

    The same matrix (transposed) propagates density, which is what makes the
    primal and dual objectives agree to solver precision.
    """
    n = model.num_states
    p = cropped_matrix(model, policy) if model.sink else transition_matrix(model, policy)
    a = np.eye(n) - model.gamma * p
    for s in model.sink:
        a[s, :] = 0.0
        a[s, s] = 1.0
    return a


def _solve_checked(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"{what} solve is singular: {exc}") from exc
    residual = float(np.max(np.abs(a @ x - b)))
    if not np.isfinite(residual) or residual > _SOLVE_RESIDUAL_TOL * max(1.0, float(np.max(np.abs(b)))):
        raise SingularSystem(f"{what} solve residual {residual:.3e} exceeds tolerance")
    return x


def stationary_density(model: MdpModel, policy) -> np.ndarray:
    """Stationary state density: rho = gamma P~^T rho + phi+.

    Uses the cropped matrix in sink mode so absorbed mass drains out; for
    gamma < 1 without a sink the discounted leak plays the same role.
    """
    a = _value_matrix(model, policy)
    rho = _solve_checked(a.T, model.phi_plus.copy(), "stationary density")
    if np.min(rho) < -1e-9:
        raise SingularSystem(f"stationary density has negative entries (min {np.min(rho):.3e})")
    return rho


def density_step(model: MdpModel, policy, rho: np.ndarray) -> np.ndarray:
    """One forward step of the density evolution under the policy."""
    rho = np.asarray(rho, dtype=float)
    p = cropped_matrix(model, policy) if model.sink else transition_matrix(model, policy)
    return model.gamma * (p.T @ rho) + model.phi_plus


def policy_value(model: MdpModel, policy, sigma=None) -> np.ndarray:
    """Fixed-policy value solve with an optional per-state reward offset.

    Solves V = R^pi + sigma + gamma P~^pi V with V pinned to zero on sink
    states. ``sigma`` is typically a nonnegative multiplier but any finite
    vector is accepted.
    """
    n = model.num_states
    sigma_vec = np.zeros(n) if sigma is None else np.asarray(sigma, dtype=float).reshape(-1)
    if sigma_vec.size != n:
        raise DensityControlError("sigma must have one entry per state")
    rhs = policy_reward(model, policy) + sigma_vec
    for s in model.sink:
        rhs[s] = 0.0
    a = _value_matrix(model, policy)
    return _solve_checked(a, rhs, "policy value")


def value_iteration(model: MdpModel, tol: float = 1e-10, max_iter: int = 100000):
    """Optimal value and a deterministic greedy policy by Bellman iteration.

    Unavailable actions are excluded from the greedy argmax; ties break
    toward the lowest action index. Sink-state values stay pinned at zero.
    """
    n, m = model.num_states, model.num_actions
    sink = model.sink_mask
    v = np.zeros(n)
    q = np.empty((n, m))
    unavailable = ~model.available
    for it in range(max_iter):
        cont = np.where(sink, 0.0, v)
        q[...] = np.einsum("asp,p->sa", model.transitions, model.gamma * cont) + np.einsum(
            "asp,asp->sa", model.transitions, model.rewards
        )
        q[unavailable] = -np.inf
        v_new = q.max(axis=1)
        v_new[sink] = 0.0
        if float(np.max(np.abs(v_new - v))) <= tol:
            v = v_new
            break
        v = v_new
    else:
        raise NoConvergence(f"value iteration did not reach tolerance in {max_iter} sweeps")
    greedy = q.argmax(axis=1)
    policy = StochasticPolicy.deterministic(model, greedy)
    return v, policy


def duality_gap(model: MdpModel, policy, sigma=None) -> float:
    """Primal-minus-dual objective for one fixed policy; zero up to solver
    precision by the adjoint identity between the value and density solves."""
    n = model.num_states
    sigma_vec = np.zeros(n) if sigma is None else np.asarray(sigma, dtype=float).reshape(-1)
    v = policy_value(model, policy, sigma_vec)
    rho = stationary_density(model, policy)
    j_p = float(model.phi_plus @ v)
    reward = policy_reward(model, policy) + sigma_vec
    free = ~model.sink_mask
    j_d = float(np.sum(rho[free] * reward[free]))
    return j_p - j_d


def random_mdp(seed: int, num_states: int, num_actions: int, gamma: float) -> MdpModel:
    """Seeded random instance with dense Dirichlet rows; used by tests and
    the duality spot-check command."""
    rng = np.random.Generator(np.random.PCG64(seed))
    p = rng.dirichlet(np.ones(num_states), size=(num_actions, num_states))
    r = rng.uniform(-1.0, 1.0, size=(num_actions, num_states, num_states))
    phi = rng.uniform(0.0, 1.0, size=num_states)
    return MdpModel(transitions=p, rewards=r, gamma=gamma, phi_plus=phi)
