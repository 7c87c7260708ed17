"""Shared upwind transport stencil for value and density solves.

The stationary value equation  c + grad(V).f - kappa V = 0  is discretized
so that each point couples to its downstream neighbor (the one the flow
moves toward), which anchors every chain of unknowns at the pinned goal
rows. Flow that would leave the domain couples to a virtual exterior state
with a fixed value. The stationary density equation div(rho f) + kappa rho
= phi+ is then solved with the exact transpose of the same matrix, so the
discrete duality  <phi+, V> = <rho, c>  holds to solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularTransport, UnreachableGoal
from .grid import GridSpec

__all__ = ["NeighborTable", "TransportOperator", "build_transport"]


@dataclass
class NeighborTable:
    """Flat neighbor indices and validity masks per dimension."""

    plus_idx: list
    plus_valid: list
    minus_idx: list
    minus_valid: list

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "NeighborTable":
        plus_idx, plus_valid, minus_idx, minus_valid = [], [], [], []
        for k in range(grid.dim):
            pi, pv = grid.shifted_flat(k, +1)
            mi, mv = grid.shifted_flat(k, -1)
            plus_idx.append(pi)
            plus_valid.append(pv)
            minus_idx.append(mi)
            minus_valid.append(mv)
        return cls(plus_idx, plus_valid, minus_idx, minus_valid)


@dataclass
class TransportOperator:
    """Assembled upwind operator for one closed-loop velocity field.

    ``matrix`` has pinned rows replaced by identity. ``exit_weight[i]`` is
    the total outflow rate of point i through the domain boundary (coupling
    to the virtual exterior state), ``stalled`` marks non-pinned points with
    zero speed and zero discount whose rows were pinned to the stall value.
    """

    grid: GridSpec
    matrix: sp.csr_matrix
    pinned: np.ndarray
    exit_weight: np.ndarray
    stalled: np.ndarray
    kappa: float
    link_src: np.ndarray
    link_dst: np.ndarray
    link_w: np.ndarray

    def value_rhs(self, cost: np.ndarray, pinned_values: np.ndarray, exit_value: float) -> np.ndarray:
        rhs = np.asarray(cost, dtype=float) + self.exit_weight * exit_value
        rhs = np.where(self.pinned, pinned_values, rhs)
        rhs = np.where(self.stalled, exit_value, rhs)
        return rhs

    def solve_value(self, cost, pinned_values, exit_value) -> np.ndarray:
        rhs = self.value_rhs(cost, pinned_values, exit_value)
        try:
            lu = spla.splu(self.matrix.tocsc())
            v = lu.solve(rhs)
        except RuntimeError as exc:
            raise UnreachableGoal(f"value transport operator is singular: {exc}") from exc
        if not np.all(np.isfinite(v)):
            raise UnreachableGoal("value solve produced non-finite entries")
        return v

    def value_residual(self, v, cost, pinned_values, exit_value) -> float:
        rhs = self.value_rhs(cost, pinned_values, exit_value)
        return float(np.max(np.abs(self.matrix @ v - rhs)))

    def solve_density(self, phi_plus: np.ndarray) -> np.ndarray:
        """Solve the adjoint system; pinned entries keep absorbed inflow."""
        try:
            lu = spla.splu(self.matrix.transpose().tocsc())
            rho = lu.solve(np.asarray(phi_plus, dtype=float))
        except RuntimeError as exc:
            raise SingularTransport(f"density transport operator is singular: {exc}") from exc
        if not np.all(np.isfinite(rho)):
            raise SingularTransport("density solve produced non-finite entries")
        return rho

    def absorbed_into_pinned(self, rho: np.ndarray) -> float:
        """Mass flux rate carried into pinned (sink) points, times cell volume."""
        into = self.pinned[self.link_dst]
        src_ok = ~(self.pinned[self.link_src] | self.stalled[self.link_src])
        sel = into & src_ok
        return float(np.sum(self.link_w[sel] * rho[self.link_src[sel]]) * self.grid.cell_volume)

    def boundary_outflow(self, rho: np.ndarray) -> float:
        free = ~(self.pinned | self.stalled)
        return float(np.sum(self.exit_weight[free] * rho[free]) * self.grid.cell_volume)


def build_transport(
    grid: GridSpec,
    velocity: np.ndarray,
    pinned: np.ndarray,
    kappa: float = 0.0,
    neighbors: NeighborTable = None,
) -> TransportOperator:
    """Assemble the upwind operator for a sampled velocity field (P, n)."""
    if neighbors is None:
        neighbors = NeighborTable.for_grid(grid)
    p = grid.num_points
    velocity = np.asarray(velocity, dtype=float)
    pinned = np.asarray(pinned, dtype=bool)
    spacing = grid.spacing

    diag = np.full(p, float(kappa))
    exit_weight = np.zeros(p)
    src_all, dst_all, w_all = [], [], []
    for k in range(grid.dim):
        w_pos = np.maximum(velocity[:, k], 0.0) / spacing[k]
        w_neg = np.maximum(-velocity[:, k], 0.0) / spacing[k]
        diag += w_pos + w_neg
        for w, idx, valid in (
            (w_pos, neighbors.plus_idx[k], neighbors.plus_valid[k]),
            (w_neg, neighbors.minus_idx[k], neighbors.minus_valid[k]),
        ):
            live = w > 0.0
            inbounds = live & valid
            src_all.append(np.nonzero(inbounds)[0])
            dst_all.append(idx[inbounds])
            w_all.append(w[inbounds])
            exit_weight += np.where(live & ~valid, w, 0.0)

    src = np.concatenate(src_all) if src_all else np.zeros(0, dtype=int)
    dst = np.concatenate(dst_all) if dst_all else np.zeros(0, dtype=int)
    wgt = np.concatenate(w_all) if w_all else np.zeros(0)

    stalled = (~pinned) & (diag <= 0.0)
    replace = pinned | stalled
    keep = ~replace[src]

    rows = np.concatenate([np.arange(p), src[keep]])
    cols = np.concatenate([np.arange(p), dst[keep]])
    data = np.concatenate([np.where(replace, 1.0, diag), -wgt[keep]])
    matrix = sp.csr_matrix((data, (rows, cols)), shape=(p, p))
    exit_weight = np.where(replace, 0.0, exit_weight)

    return TransportOperator(
        grid=grid,
        matrix=matrix,
        pinned=pinned,
        exit_weight=exit_weight,
        stalled=stalled,
        kappa=float(kappa),
        link_src=src[keep],
        link_dst=dst[keep],
        link_w=wgt[keep],
    )
