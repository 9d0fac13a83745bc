import math
import logging
import dataclasses
from typing import Callable, Tuple

import numpy as np

from obshom.lib.errors import (
    EmptyRegionError,
    GridMismatchError,
    InvalidGridError,
    SamplingError,
)

logger = logging.getLogger(__name__)

DIRICHLET = "dirichlet"
PERIODIC = "periodic"
TOPOLOGIES = (DIRICHLET, PERIODIC)


@dataclasses.dataclass(frozen=True)
class Grid:
    """
    Uniform rectangular grid in dimension 1, 2 or 3.

    Node ``(i_1, ..., i_n)`` sits at ``origin + i * spacing``. A Dirichlet box
    owns its face nodes (they carry boundary data); a periodic torus wraps every
    axis with period ``shape[k] * spacing``.
    """

    dim: int
    shape: Tuple[int, ...]
    spacing: float
    origin: Tuple[float, ...]
    topology: str = DIRICHLET

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))
        if self.dim not in (1, 2, 3):
            raise InvalidGridError(f"Grid dimension must be 1, 2 or 3, got {self.dim}")
        if len(self.shape) != self.dim or len(self.origin) != self.dim:
            raise InvalidGridError(
                f"shape {self.shape} and origin {self.origin} must have {self.dim} entries"
            )
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise InvalidGridError(f"Grid spacing must be positive, got {self.spacing}")
        if min(self.shape) < 3:
            raise InvalidGridError(f"Every axis needs at least 3 nodes, got {self.shape}")
        if self.topology not in TOPOLOGIES:
            raise InvalidGridError(f"Unknown topology '{self.topology}'")
        if self.topology == PERIODIC and len(set(self.shape)) != 1:
            raise InvalidGridError(
                f"A periodic torus needs the same period on every axis, got shape {self.shape}"
            )

    @classmethod
    def box(cls, lower, upper, spacing, dim=None):
        """
        Dirichlet grid covering the closed box ``[lower, upper]``.

        Args:
            lower (float or sequence): Lower corner.
            upper (float or sequence): Upper corner.
            spacing (float): Node spacing h; must divide every side length.
            dim (int, optional): Dimension when the corners are scalars.
        """
        if dim is None:
            dim = len(lower) if np.ndim(lower) else 1
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (dim,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (dim,))
        cells = (upper - lower) / spacing
        counts = np.rint(cells).astype(int)
        if np.any(np.abs(cells - counts) > 1e-9 * np.maximum(1.0, cells)):
            raise InvalidGridError(
                f"Spacing {spacing} does not divide the box {tuple(lower)} - {tuple(upper)}"
            )
        return cls(dim, tuple(counts + 1), spacing, tuple(lower), DIRICHLET)

    @classmethod
    def torus(cls, nodes, dim, period=1.0):
        """Periodic unit cell (or cell of the given period) with ``nodes`` per axis."""
        return cls(dim, (nodes,) * dim, period / nodes, (0.0,) * dim, PERIODIC)

    @property
    def periodic(self):
        return self.topology == PERIODIC

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def period(self):
        if not self.periodic:
            return None
        return self.shape[0] * self.spacing

    @property
    def upper(self):
        return tuple(o + (s - 1) * self.spacing for o, s in zip(self.origin, self.shape))

    def axis_coordinates(self, axis):
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def mesh(self):
        """Physical coordinates as an array of shape ``(dim, *shape)``."""
        axes = [self.axis_coordinates(k) for k in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def node_coordinate(self, index):
        return tuple(o + i * self.spacing for o, i in zip(self.origin, index))

    def interior(self):
        """Boolean array of nodes that belong to the open domain U (all nodes on a torus)."""
        mask = np.ones(self.shape, dtype=bool)
        if not self.periodic:
            for axis in range(self.dim):
                index = [slice(None)] * self.dim
                index[axis] = 0
                mask[tuple(index)] = False
                index[axis] = -1
                mask[tuple(index)] = False
        return mask

    def distance_to_faces(self):
        """Physical distance from every node to the box boundary (inf on a torus)."""
        if self.periodic:
            return np.full(self.shape, np.inf)
        dist = np.full(self.shape, np.inf)
        for axis in range(self.dim):
            idx = np.arange(self.shape[axis])
            d = self.spacing * np.minimum(idx, self.shape[axis] - 1 - idx)
            view = [np.newaxis] * self.dim
            view[axis] = slice(None)
            dist = np.minimum(dist, d[tuple(view)])
        return dist

    def check_same(self, other, what="fields"):
        if self != other:
            raise GridMismatchError(f"{what} live on different grids: {self} vs {other}")


@dataclasses.dataclass(frozen=True, eq=False)
class ScalarField:
    """One finite real value per grid node. The value array is read-only."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.grid.size:
            raise InvalidGridError(
                f"Field has {values.size} values but the grid has {self.grid.size} nodes"
            )
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            bad = np.unravel_index(np.argmax(~np.isfinite(values)), values.shape)
            raise SamplingError(f"Non-finite field value at node {tuple(int(i) for i in bad)}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid, value):
        return cls(grid, np.full(grid.shape, float(value)))

    def __add__(self, other):
        return _combine(self, other, np.add)

    def __sub__(self, other):
        return _combine(self, other, np.subtract)

    def __mul__(self, scalar):
        return ScalarField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def max(self):
        return float(self.values.max())

    def min(self):
        return float(self.values.min())

    def norm_inf(self):
        return float(np.abs(self.values).max())


@dataclasses.dataclass(frozen=True, eq=False)
class CellMask:
    """One boolean flag per grid node."""

    grid: Grid
    flags: np.ndarray

    def __post_init__(self):
        flags = np.array(self.flags, dtype=bool)
        if flags.size != self.grid.size:
            raise InvalidGridError(
                f"Mask has {flags.size} flags but the grid has {self.grid.size} nodes"
            )
        flags = flags.reshape(self.grid.shape)
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @classmethod
    def empty(cls, grid):
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    def count(self):
        return int(self.flags.sum())

    def any(self):
        return bool(self.flags.any())

    def __or__(self, other):
        self.grid.check_same(other.grid, "masks")
        return CellMask(self.grid, self.flags | other.flags)

    def __eq__(self, other):
        if not isinstance(other, CellMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.flags, other.flags)

    __hash__ = None


def _combine(a, b, op):
    if isinstance(b, ScalarField):
        a.grid.check_same(b.grid)
        return ScalarField(a.grid, op(a.values, b.values))
    return ScalarField(a.grid, op(a.values, float(b)))


def laplacian_apply(f: ScalarField) -> ScalarField:
    """
    Apply the standard 2n+1 point Laplacian.

    Periodic grids wrap indices. On a Dirichlet box only interior nodes are
    computed and face nodes are returned as zero.

    Args:
        f (ScalarField): Field to differentiate.
    """
    grid = f.grid
    u = f.values
    out = -2.0 * grid.dim * u
    for axis in range(grid.dim):
        out = out + np.roll(u, 1, axis=axis) + np.roll(u, -1, axis=axis)
    out /= grid.spacing**2
    if not grid.periodic:
        out[~grid.interior()] = 0.0
    return ScalarField(grid, out)


def sample(fn: Callable[[np.ndarray], np.ndarray], grid: Grid) -> ScalarField:
    """
    Evaluate ``fn`` at every node.

    ``fn`` receives the coordinate array of shape ``(dim, *shape)`` so that
    ``x[0]`` is the first coordinate, and returns an array (or a scalar).
    """
    x = grid.mesh()
    with np.errstate(all="ignore"):
        values = np.broadcast_to(np.asarray(fn(x), dtype=np.float64), grid.shape).copy()
    finite = np.isfinite(values)
    if not finite.all():
        bad = tuple(int(i) for i in np.unravel_index(np.argmax(~finite), grid.shape))
        raise SamplingError(
            f"Sample is not finite at node {bad} (x = {grid.node_coordinate(bad)}): "
            f"{values[bad]}"
        )
    return ScalarField(grid, values)


def _axis_window(grid, axis, center, radius):
    coords = grid.axis_coordinates(axis)
    if grid.periodic:
        period = grid.period
        offset = np.mod(coords - center + 0.5 * period, period) - 0.5 * period
        idx = np.nonzero(np.abs(offset) <= radius * (1 + 1e-12))[0]
        return idx, offset[idx]
    h = grid.spacing
    lo = max(0, int(math.ceil((center - radius - grid.origin[axis]) / h - 1e-9)))
    hi = min(grid.shape[axis] - 1, int(math.floor((center + radius - grid.origin[axis]) / h + 1e-9)))
    idx = np.arange(lo, hi + 1)
    return idx, coords[idx] - center


def ball_nodes(grid, center, radius):
    """
    Nodes of the closed ball B_radius(center).

    Returns:
        tuple: Per-axis index arrays of the bounding window, and the distance of every
        window node to the center with ``inf`` outside the ball (``None`` when the
        window is empty).
    """
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    windows = [_axis_window(grid, k, center[k], radius) for k in range(grid.dim)]
    idxs = [w[0] for w in windows]
    if any(len(i) == 0 for i in idxs):
        return idxs, None
    dist2 = np.zeros([len(i) for i in idxs])
    for axis, (_, off) in enumerate(windows):
        view = [np.newaxis] * grid.dim
        view[axis] = slice(None)
        dist2 = dist2 + (off**2)[tuple(view)]
    inside = dist2 <= radius**2 * (1 + 1e-12) + 1e-24
    return idxs, np.where(inside, np.sqrt(dist2), np.inf)


def ball_extremum(f: ScalarField, center, radius: float, mode: str = "sup") -> float:
    """
    Supremum or infimum of ``f`` over the nodes in the closed ball B_radius(center).

    Args:
        f (ScalarField): Field to scan.
        center (sequence of float): Ball center in physical coordinates.
        radius (float): Ball radius in physical units.
        mode (str): ``"sup"`` or ``"inf"``.
    """
    if mode not in ("sup", "inf"):
        raise ValueError(f"mode must be 'sup' or 'inf', got '{mode}'")
    idxs, dist = ball_nodes(f.grid, center, radius)
    if dist is None or not np.isfinite(dist).any():
        raise EmptyRegionError(f"Ball B_{radius}({center}) contains no grid node")
    block = f.values[np.ix_(*idxs)][np.isfinite(dist)]
    return float(block.max() if mode == "sup" else block.min())


def gradient(f: ScalarField) -> Tuple[ScalarField, ...]:
    """Central differences (wrapping on a torus, one-sided at box faces)."""
    grid = f.grid
    h = grid.spacing
    parts = []
    for axis in range(grid.dim):
        if grid.periodic:
            g = (np.roll(f.values, -1, axis=axis) - np.roll(f.values, 1, axis=axis)) / (2 * h)
        else:
            g = np.gradient(f.values, h, axis=axis, edge_order=1)
        parts.append(ScalarField(grid, g))
    return tuple(parts)


def forward_differences(f: ScalarField):
    """Forward differences along every axis, wrapping on a torus (edges only inside a box)."""
    grid = f.grid
    diffs = []
    for axis in range(grid.dim):
        if grid.periodic:
            diffs.append((np.roll(f.values, -1, axis=axis) - f.values) / grid.spacing)
        else:
            diffs.append(np.diff(f.values, axis=axis) / grid.spacing)
    return diffs


def dirichlet_energy(f: ScalarField) -> float:
    """Edge sum of squared forward differences times the cell volume, i.e. a discrete ∫|∇f|²."""
    cell = f.grid.spacing**f.grid.dim
    return float(sum(np.sum(d**2) for d in forward_differences(f)) * cell)


def second_difference_max(f: ScalarField, mask=None) -> float:
    """
    Largest absolute second-difference quotient, pure and mixed, over interior nodes.

    Args:
        f (ScalarField): Field to scan.
        mask (numpy.ndarray, optional): Restrict to these nodes.
    """
    grid = f.grid
    u = f.values
    h2 = grid.spacing**2
    keep = grid.interior() if mask is None else (grid.interior() & mask)
    best = 0.0
    for a in range(grid.dim):
        d = (np.roll(u, -1, a) - 2 * u + np.roll(u, 1, a)) / h2
        if keep.any():
            best = max(best, float(np.abs(d[keep]).max()))
        for b in range(a + 1, grid.dim):
            pp = np.roll(np.roll(u, -1, a), -1, b)
            pm = np.roll(np.roll(u, -1, a), 1, b)
            mp = np.roll(np.roll(u, 1, a), -1, b)
            mm = np.roll(np.roll(u, 1, a), 1, b)
            mixed = (pp - pm - mp + mm) / (4 * h2)
            if keep.any():
                best = max(best, float(np.abs(mixed[keep]).max()))
    return best
