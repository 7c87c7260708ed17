"""Rectangular grids, sampled fields, upwind differences, and interpolation.

The grid is cell-vertex: points sit at cell corners, spacing is uniform per
dimension, and fields are stored row-major (last index varies fastest) so a
flat array of length prod(shape) maps directly onto the point lattice.
Queries outside the grid clamp to the boundary, which keeps interpolation
total for trajectories that graze the domain edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DensityControlError

__all__ = [
    "GridSpec",
    "ScalarField",
    "VectorField",
    "upwind_differences",
    "upwind_directional",
    "interpolate",
    "interpolate_many",
    "interpolate_vector_many",
    "dump_field_csv",
    "load_scalar_field_csv",
    "load_vector_field_csv",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular discretization of a box [lower, upper].

    ``cells[i]`` counts intervals along dimension i, so the lattice has
    ``cells[i] + 1`` points per dimension and spacing
    ``(upper[i] - lower[i]) / cells[i]``.
    """

    lower: tuple
    upper: tuple
    cells: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        cells = tuple(int(c) for c in self.cells)
        if not (len(lower) == len(upper) == len(cells)):
            raise DensityControlError("lower, upper, cells must share length")
        for lo, hi, c in zip(lower, upper, cells):
            if not hi > lo:
                raise DensityControlError(f"upper must exceed lower, got [{lo}, {hi}]")
            if c < 1:
                raise DensityControlError(f"need at least one cell per dimension, got {c}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "cells", cells)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple:
        """Points per dimension."""
        return tuple(c + 1 for c in self.cells)

    @property
    def num_points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    def axis_coords(self, k: int) -> np.ndarray:
        return self.lower[k] + self.spacing[k] * np.arange(self.shape[k])

    def point(self, index) -> np.ndarray:
        """Coordinates of a multi-index."""
        idx = np.asarray(index)
        return np.asarray(self.lower) + idx * self.spacing

    def index_of(self, x) -> tuple:
        """Multi-index of a grid-aligned point (rounds to nearest lattice point)."""
        rel = (np.asarray(x, dtype=float) - np.asarray(self.lower)) / self.spacing
        idx = np.rint(rel).astype(int)
        return tuple(int(np.clip(i, 0, s - 1)) for i, s in zip(idx, self.shape))

    def flat_index(self, index) -> int:
        return int(np.ravel_multi_index(tuple(int(i) for i in index), self.shape))

    def multi_index(self, flat: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def points(self) -> np.ndarray:
        """All grid points, row-major, shape (num_points, dim)."""
        axes = [self.axis_coords(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.asarray(self.lower)) and np.all(x <= np.asarray(self.upper)))

    def clip(self, x: np.ndarray) -> np.ndarray:
        """Clamp points to the box, batched over leading axes."""
        return np.clip(x, np.asarray(self.lower), np.asarray(self.upper))

    def shifted_flat(self, axis: int, step: int):
        """Flat indices of each point's neighbor ``index + step*e_axis``.

        Returns ``(neighbor_flat, valid)``; out-of-range neighbors get their
        own index and ``valid`` False so callers can mask them out.
        """
        shape = self.shape
        idx = np.arange(self.num_points).reshape(shape)
        coords = list(np.indices(shape))
        shifted = coords[axis] + step
        valid = (shifted >= 0) & (shifted < shape[axis])
        shifted_clamped = np.clip(shifted, 0, shape[axis] - 1)
        coords[axis] = shifted_clamped
        neighbor = idx[tuple(coords)]
        return neighbor.reshape(-1), valid.reshape(-1)


@dataclass
class ScalarField:
    """Real values sampled at every grid point, stored flat row-major."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.grid.num_points:
            raise DensityControlError(
                f"field has {self.values.size} values for a grid of {self.grid.num_points} points"
            )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.num_points))

    @classmethod
    def full(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.num_points, float(value)))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        return cls(grid, np.asarray(fn(grid.points()), dtype=float).reshape(-1))

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def check_finite(self, label: str = "field"):
        if not np.all(np.isfinite(self.values)):
            raise DensityControlError(f"{label} contains non-finite values")


@dataclass
class VectorField:
    """A real tuple per grid point, e.g. sampled velocities or grid policies."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.num_points:
            raise DensityControlError("vector field must have shape (num_points, width)")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def component(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[:, j].copy())

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())


def upwind_differences(field: ScalarField, index):
    """Backward and forward one-sided differences at a multi-index.

    Component k of the backward tuple is (V[I] - V[I-1_k]) / dx_k and of the
    forward tuple (V[I+1_k] - V[I]) / dx_k. Components whose neighbor falls
    outside the grid are zero.
    """
    grid = field.grid
    vals = field.reshaped()
    idx = tuple(int(i) for i in index)
    if any(i < 0 or i >= s for i, s in zip(idx, grid.shape)):
        raise DensityControlError(f"index {idx} outside grid of shape {grid.shape}")
    spacing = grid.spacing
    backward = np.zeros(grid.dim)
    forward = np.zeros(grid.dim)
    center = vals[idx]
    for k in range(grid.dim):
        if idx[k] - 1 >= 0:
            left = idx[:k] + (idx[k] - 1,) + idx[k + 1 :]
            backward[k] = (center - vals[left]) / spacing[k]
        if idx[k] + 1 < grid.shape[k]:
            right = idx[:k] + (idx[k] + 1,) + idx[k + 1 :]
            forward[k] = (vals[right] - center) / spacing[k]
    return backward, forward


def upwind_directional(field: ScalarField, velocity, index) -> float:
    """Upwind approximation of grad(V) . f with entrywise max/min selection.

    Positive velocity components ride the backward difference, negative ones
    the forward difference.
    """
    backward, forward = upwind_differences(field, index)
    f = np.asarray(velocity, dtype=float)
    return float(np.maximum(f, 0.0) @ backward + np.minimum(f, 0.0) @ forward)


def _interp_weights(grid: GridSpec, x: np.ndarray):
    """Base corner indices and fractional offsets for multilinear interpolation.

    Points are clamped to the box first; the returned base index is always a
    valid lower corner (base + 1 may alias base on the top face).
    """
    x = grid.clip(np.atleast_2d(np.asarray(x, dtype=float)))
    rel = (x - np.asarray(grid.lower)) / grid.spacing
    base = np.floor(rel).astype(int)
    top = np.asarray(grid.cells) - 1
    base = np.minimum(np.maximum(base, 0), np.maximum(top, 0))
    frac = rel - base
    frac = np.clip(frac, 0.0, 1.0)
    return base, frac


def interpolate_many(field: ScalarField, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation at a batch of points, shape (B, dim) -> (B,)."""
    grid = field.grid
    base, frac = _interp_weights(grid, x)
    vals = field.reshaped()
    out = np.zeros(base.shape[0])
    for corner in range(1 << grid.dim):
        offs = np.array([(corner >> k) & 1 for k in range(grid.dim)])
        idx = np.minimum(base + offs, np.asarray(grid.shape) - 1)
        w = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
        out += w * vals[tuple(idx.T)]
    return out


def interpolate(field: ScalarField, x) -> float:
    """Multilinear interpolation at one point (clamped to the boundary)."""
    return float(interpolate_many(field, np.atleast_2d(x))[0])


def interpolate_vector_many(field: VectorField, x: np.ndarray) -> np.ndarray:
    """Componentwise multilinear interpolation, shape (B, dim) -> (B, width)."""
    grid = field.grid
    base, frac = _interp_weights(grid, x)
    vals = field.values.reshape(grid.shape + (field.width,))
    out = np.zeros((base.shape[0], field.width))
    for corner in range(1 << grid.dim):
        offs = np.array([(corner >> k) & 1 for k in range(grid.dim)])
        idx = np.minimum(base + offs, np.asarray(grid.shape) - 1)
        w = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
        out += w[:, None] * vals[tuple(idx.T)]
    return out


# CSV dump format: header i0,..,i{n-1},x0,..,x{n-1},<value columns>, one row
# per grid point in row-major order, 17 significant digits.


def _csv_header(grid: GridSpec, value_cols) -> list:
    return (
        [f"i{k}" for k in range(grid.dim)]
        + [f"x{k}" for k in range(grid.dim)]
        + list(value_cols)
    )


def dump_field_csv(field, path):
    """Write a Scalar/VectorField to CSV in the grid dump format."""
    grid = field.grid
    if isinstance(field, ScalarField):
        cols = ["value"]
        data = field.values[:, None]
    else:
        cols = [f"u{j}" for j in range(field.width)]
        data = field.values
    pts = grid.points()
    idx = np.stack(np.unravel_index(np.arange(grid.num_points), grid.shape), axis=-1)
    with open(path, "w") as fh:
        fh.write(",".join(_csv_header(grid, cols)) + "\n")
        for row in range(grid.num_points):
            cells = [str(int(v)) for v in idx[row]]
            cells += [f"{v:.17g}" for v in pts[row]]
            cells += [f"{v:.17g}" for v in data[row]]
            fh.write(",".join(cells) + "\n")


def _grid_from_rows(idx: np.ndarray, pts: np.ndarray) -> GridSpec:
    dim = idx.shape[1]
    cells = [int(idx[:, k].max()) for k in range(dim)]
    lower = []
    upper = []
    for k in range(dim):
        lower.append(float(pts[idx[:, k] == 0][0, k]))
        upper.append(float(pts[idx[:, k] == cells[k]][0, k]))
    return GridSpec(tuple(lower), tuple(upper), tuple(cells))


def _load_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    dim = sum(1 for c in header if c.startswith("i") and c[1:].isdigit())
    idx = data[:, :dim].astype(int)
    pts = data[:, dim : 2 * dim]
    vals = data[:, 2 * dim :]
    order = np.ravel_multi_index(idx.T, tuple(idx.max(axis=0) + 1))
    perm = np.argsort(order, kind="stable")
    return _grid_from_rows(idx[perm], pts[perm]), vals[perm]


def load_scalar_field_csv(path) -> ScalarField:
    grid, vals = _load_csv(path)
    if vals.shape[1] != 1:
        raise DensityControlError(f"expected a single value column in {path}")
    return ScalarField(grid, vals[:, 0])


def load_vector_field_csv(path) -> VectorField:
    grid, vals = _load_csv(path)
    return VectorField(grid, vals)
