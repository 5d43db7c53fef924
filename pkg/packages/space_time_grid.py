"""
Space-time grids on intervals and rectangles.

Scalars (u) live on nodes, vector fields (v) on faces: ``v[k]`` holds the
axis-k component on the faces normal to axis k, interior faces only, so the
normal trace on the boundary is identically zero. Arrays keep time as their
leading axis when they carry one; the spatial axes are always the last n.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

MIN_NODES = 8


@dataclass(frozen=True)
class GridST:
    dimension: int
    extent: tuple
    nodes: tuple
    horizon: float
    steps: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if len(self.extent) != self.dimension or len(self.nodes) != self.dimension:
            raise ValueError("extent and nodes must have one entry per spatial axis")
        for (lo, hi), count in zip(self.extent, self.nodes):
            if not hi > lo:
                raise ValueError(f"empty interval ({lo}, {hi})")
            if count < MIN_NODES:
                raise ValueError(f"need at least {MIN_NODES} nodes per axis, got {count}")
        if not self.horizon > 0 or self.steps < 1:
            raise ValueError("horizon must be positive and steps at least 1")

    @property
    def spacing(self):
        return tuple((hi - lo) / (count - 1) for (lo, hi), count in zip(self.extent, self.nodes))

    @property
    def h(self):
        return self.spacing[0]

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @property
    def axes(self):
        return [np.linspace(lo, hi, count) for (lo, hi), count in zip(self.extent, self.nodes)]

    @property
    def cells(self):
        return tuple(count - 1 for count in self.nodes)

    @property
    def cell_measure(self):
        return float(np.prod(self.spacing))

    @property
    def volume(self):
        """|Omega|."""
        return float(np.prod([hi - lo for lo, hi in self.extent]))

    @property
    def spacetime_volume(self):
        return self.volume * self.horizon


def interval_grid(length=1.0, nodes=129, horizon=0.1, steps=1000, start=0.0):
    return GridST(dimension=1, extent=((start, start + length),), nodes=(nodes,), horizon=horizon, steps=steps)


def rectangle_grid(extent=((0.0, 1.0), (0.0, 1.0)), nodes=(33, 33), horizon=0.1, steps=100):
    return GridST(dimension=2, extent=tuple(extent), nodes=tuple(nodes), horizon=horizon, steps=steps)


def dual_widths(grid, axis):
    """Control-volume widths along one axis: h inside, h/2 at both ends."""
    width = np.full(grid.nodes[axis], grid.spacing[axis])
    width[[0, -1]] *= 0.5
    return width


def control_volumes(grid):
    volumes = dual_widths(grid, 0)
    for axis in range(1, grid.dimension):
        volumes = np.multiply.outer(volumes, dual_widths(grid, axis))
    return volumes


def _spatial_axis(array, grid, axis):
    return array.ndim - grid.dimension + axis


def _broadcast_along(vector, array, grid, axis):
    shape = [1] * array.ndim
    shape[_spatial_axis(array, grid, axis)] = len(vector)
    return vector.reshape(shape)


def node_coordinates(grid):
    return np.meshgrid(*grid.axes, indexing="ij")


def cell_coordinates(grid):
    centres = [0.5 * (a[1:] + a[:-1]) for a in grid.axes]
    return np.meshgrid(*centres, indexing="ij")


def face_coordinates(grid, axis):
    """Coordinates of the interior faces normal to ``axis``."""
    axes = list(grid.axes)
    axes[axis] = 0.5 * (axes[axis][1:] + axes[axis][:-1])
    return np.meshgrid(*axes, indexing="ij")


def face_gradient(u, grid):
    """Normal derivative of a node field on every interior face, one array per axis."""
    return tuple(np.diff(u, axis=_spatial_axis(u, grid, k)) / grid.spacing[k] for k in range(grid.dimension))


def divergence(v, grid):
    """Finite-volume divergence at nodes of a face field; boundary faces carry zero flux."""
    total = None
    for k in range(grid.dimension):
        axis = _spatial_axis(v[k], grid, k)
        pad = [(0, 0)] * v[k].ndim
        pad[axis] = (1, 1)
        padded = np.pad(v[k], pad)
        term = np.diff(padded, axis=axis) / _broadcast_along(dual_widths(grid, k), padded, grid, k)
        total = term if total is None else total + term
    return total


def face_gradient_norm_squared(u, grid):
    """|Du|^2 on each face family, with the tangential part averaged from nodal central differences."""
    normal = face_gradient(u, grid)
    if grid.dimension == 1:
        return (normal[0] ** 2,)
    central = []
    for k in range(2):
        axis = _spatial_axis(u, grid, k)
        d = np.gradient(u, grid.spacing[k], axis=axis)
        index = [slice(None)] * u.ndim
        index[axis] = 0
        d[tuple(index)] = 0.0
        index[axis] = -1
        d[tuple(index)] = 0.0
        central.append(d)
    out = []
    for k in range(2):
        other = 1 - k
        axis = _spatial_axis(u, grid, k)
        tangential = 0.5 * (np.take(central[other], range(1, u.shape[axis]), axis=axis)
                            + np.take(central[other], range(0, u.shape[axis] - 1), axis=axis))
        out.append(normal[k] ** 2 + tangential ** 2)
    return tuple(out)


def face_fluxes(coefficient, u, grid):
    """Normal fluxes c(|Du|) Du.n on faces for a coefficient c(s) = sigma(s)/s."""
    normal = face_gradient(u, grid)
    norms = face_gradient_norm_squared(u, grid)
    return tuple(coefficient(np.sqrt(n2)) * g for g, n2 in zip(normal, norms))


def face_to_cells(v, grid):
    """Average a face field to cell centres, returning shape (..., cells, n)."""
    if grid.dimension == 1:
        return v[0][..., None]
    vx = 0.5 * (v[0][..., :, 1:] + v[0][..., :, :-1])
    vy = 0.5 * (v[1][..., 1:, :] + v[1][..., :-1, :])
    return np.stack([vx, vy], axis=-1)


def cell_gradient(u, grid):
    """Du sampled at cell centres, shape (..., cells, n)."""
    return face_to_cells(face_gradient(u, grid), grid)


def node_mean(u, grid):
    """Quadrature mean over Omega per slice (control-volume weights)."""
    volumes = control_volumes(grid)
    axes = tuple(range(u.ndim - grid.dimension, u.ndim))
    return np.sum(u * volumes, axis=axes) / volumes.sum()


def node_integral(u, grid):
    axes = tuple(range(u.ndim - grid.dimension, u.ndim))
    return np.sum(u * control_volumes(grid), axis=axes)


def time_weights(grid):
    """Trapezoid weights over the slices 0..steps."""
    weights = np.full(grid.steps + 1, grid.dt)
    weights[[0, -1]] *= 0.5
    return weights


def spacetime_cell_integral(values, grid, mask=None):
    """Integral over Omega_T of a cell-centred quantity with leading time axis."""
    if mask is not None:
        values = np.where(mask, values, 0.0)
    per_slice = values.reshape(values.shape[0], -1).sum(axis=1) * grid.cell_measure
    return float(np.dot(time_weights(grid), per_slice))


def spacetime_cell_measure(mask, grid):
    return spacetime_cell_integral(mask.astype(float), grid)


def time_derivative(array, grid):
    """Centred differences inside, one-sided at t = 0 and t = T."""
    return np.gradient(array, grid.dt, axis=0)


def conductance_matrix(coefficients, grid):
    """
    Sparse graph Laplacian K with (K u)_i = V_i * div(c grad u)_i.

    Parameters:
    coefficients (tuple): Face coefficients c per axis, shaped like the face gradients.

    Returns:
    scipy.sparse.csr_matrix: Symmetric, rows summing to zero.
    """
    size = int(np.prod(grid.nodes))
    index = np.arange(size).reshape(grid.nodes)
    rows, cols, data = [], [], []
    for k in range(grid.dimension):
        left = np.take(index, range(grid.nodes[k] - 1), axis=k).ravel()
        right = np.take(index, range(1, grid.nodes[k]), axis=k).ravel()
        area = np.broadcast_to(face_area(grid, k), coefficients[k].shape).ravel()
        conductance = np.asarray(coefficients[k]).ravel() * area / grid.spacing[k]
        rows += [left, right, left, right]
        cols += [right, left, left, right]
        data += [conductance, conductance, -conductance, -conductance]
    return sps.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))


def face_area(grid, axis):
    shape = list(grid.nodes)
    shape[axis] -= 1
    area = np.ones(shape)
    for other in range(grid.dimension):
        if other != axis:
            reshape = [1] * grid.dimension
            reshape[other] = grid.nodes[other]
            area = area * dual_widths(grid, other).reshape(reshape)
    return area
