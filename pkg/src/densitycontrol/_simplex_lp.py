"""Dense two-phase simplex for the small exact LPs used as test oracles.

Bland's rule everywhere, so the iteration cannot cycle and results are
deterministic. Sized for desk-scale problems (tens of variables); no
attempt at sparsity or revised-simplex updates.
"""

from __future__ import annotations

import numpy as np

from .errors import DensityControlError, Infeasible

__all__ = ["linprog_max"]

_TOL = 1e-9


def _pivot(tableau: np.ndarray, basis: list, row: int, col: int):
    tableau[row] /= tableau[row, col]
    for i in range(tableau.shape[0]):
        if i != row and abs(tableau[i, col]) > 0:
            tableau[i] -= tableau[i, col] * tableau[row]
    basis[row] = col


def _run_simplex(tableau: np.ndarray, basis: list, cost: np.ndarray, allowed: np.ndarray):
    """Maximize cost over the current tableau with Bland's rule."""
    m = tableau.shape[0]
    while True:
        cb = cost[basis]
        reduced = cost - cb @ tableau[:, :-1]
        reduced[~allowed] = -np.inf
        entering = -1
        for j in range(reduced.size):
            if reduced[j] > _TOL:
                entering = j
                break
        if entering < 0:
            return
        ratios = np.full(m, np.inf)
        col = tableau[:, entering]
        pos = col > _TOL
        ratios[pos] = tableau[pos, -1] / col[pos]
        best = np.inf
        leave = -1
        for i in range(m):
            if ratios[i] < best - _TOL or (ratios[i] < best + _TOL and leave >= 0 and basis[i] < basis[leave]):
                if np.isfinite(ratios[i]):
                    best = ratios[i]
                    leave = i
        if leave < 0:
            raise DensityControlError("LP is unbounded")
        _pivot(tableau, basis, leave, entering)


def linprog_max(c, a_eq=None, b_eq=None, a_ub=None, b_ub=None):
    """Maximize c @ x subject to a_eq x = b_eq, a_ub x <= b_ub, x >= 0.

    Returns (x, objective). Raises Infeasible when no feasible point exists.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    rows = []
    rhs = []
    n_slack = 0
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
        b_eq = np.asarray(b_eq, dtype=float).reshape(-1)
        for i in range(a_eq.shape[0]):
            rows.append((a_eq[i], None))
            rhs.append(b_eq[i])
    if a_ub is not None:
        a_ub = np.atleast_2d(np.asarray(a_ub, dtype=float))
        b_ub = np.asarray(b_ub, dtype=float).reshape(-1)
        n_slack = a_ub.shape[0]
        for i in range(a_ub.shape[0]):
            rows.append((a_ub[i], i))
            rhs.append(b_ub[i])
    m = len(rows)
    if m == 0:
        raise DensityControlError("LP needs at least one constraint")

    total = n + n_slack + m  # structural + slack + artificial
    tableau = np.zeros((m, total + 1))
    basis = []
    for i, ((row, slack_id), b) in enumerate(zip(rows, rhs)):
        sign = 1.0 if b >= 0 else -1.0
        tableau[i, :n] = sign * row
        if slack_id is not None:
            tableau[i, n + slack_id] = sign
        tableau[i, n + n_slack + i] = 1.0
        tableau[i, -1] = sign * b
        basis.append(n + n_slack + i)

    allowed = np.ones(total, dtype=bool)
    phase1 = np.zeros(total)
    phase1[n + n_slack :] = -1.0
    _run_simplex(tableau, basis, phase1, allowed)
    infeas = -float(phase1[basis] @ tableau[:, -1])
    if infeas > 1e-7:
        raise Infeasible(f"LP infeasible (phase-1 objective {infeas:.3e})")

    # drive leftover artificials out of the basis or drop redundant rows
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        if basis[i] >= n + n_slack:
            pivot_col = -1
            for j in range(n + n_slack):
                if abs(tableau[i, j]) > _TOL:
                    pivot_col = j
                    break
            if pivot_col >= 0:
                _pivot(tableau, basis, i, pivot_col)
            else:
                keep[i] = False
    if not np.all(keep):
        tableau = tableau[keep]
        basis = [b for b, k in zip(basis, keep) if k]
        m = tableau.shape[0]

    allowed[n + n_slack :] = False
    phase2 = np.zeros(total)
    phase2[:n] = c
    _run_simplex(tableau, basis, phase2, allowed)

    x = np.zeros(total)
    for i, b in enumerate(basis):
        x[b] = tableau[i, -1]
    solution = x[:n]
    return solution, float(c @ solution)
