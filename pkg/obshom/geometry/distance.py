import logging
import dataclasses

import numpy as np
from scipy import ndimage

from obshom.lib.errors import DegenerateSetError
from obshom.lib.grid import CellMask, Grid

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class DistanceField:
    """Euclidean distance from every node to the nearest node of a set."""

    grid: Grid
    dist: np.ndarray

    def on(self, mask):
        """Distances restricted to the nodes of ``mask``."""
        self.grid.check_same(mask.grid, "distance field and mask")
        return self.dist[mask.flags]

    def max_on(self, mask):
        values = self.on(mask)
        return float(values.max()) if values.size else 0.0


def _squared_index_distance(flags):
    # edt measures distance to the nearest zero, so the set goes in as zeros
    indices = ndimage.distance_transform_edt(
        ~flags, return_distances=False, return_indices=True
    )
    grid_index = np.indices(flags.shape)
    return np.sum((indices - grid_index) ** 2, axis=0)


def distance_transform(mask: CellMask) -> DistanceField:
    """
    Exact Euclidean distance transform of a node set.

    Distances are ``h * sqrt(d2)`` with ``d2`` the integer squared index distance to
    the nearest set node, so they agree with a brute-force search exactly. On a torus
    the mask is tiled 3^n times and the middle block is kept.
    """
    grid = mask.grid
    if not mask.any():
        raise DegenerateSetError("Distance to an empty set is undefined")
    if grid.periodic:
        tiled = np.tile(mask.flags, (3,) * grid.dim)
        d2 = _squared_index_distance(tiled)
        middle = tuple(slice(s, 2 * s) for s in grid.shape)
        d2 = d2[middle]
    else:
        d2 = _squared_index_distance(mask.flags)
    return DistanceField(grid, grid.spacing * np.sqrt(d2.astype(np.float64)))


def hausdorff_distance(a: CellMask, b: CellMask) -> float:
    """Symmetric Hausdorff distance between two nonempty node sets."""
    a.grid.check_same(b.grid, "masks")
    if not a.any() or not b.any():
        raise DegenerateSetError("Hausdorff distance needs two nonempty sets")
    to_a = distance_transform(a)
    to_b = distance_transform(b)
    return max(to_b.max_on(a), to_a.max_on(b))
