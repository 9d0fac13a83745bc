import math
import logging
import dataclasses
from typing import Tuple

import numpy as np

from obshom.lib.errors import DegenerateSetError, DomainError, ResolutionError
from obshom.lib.grid import CellMask, Grid

logger = logging.getLogger(__name__)


def contact_set(u, phi):
    """Interior nodes where ``u`` equals ``phi`` exactly."""
    u.grid.check_same(phi.grid)
    return CellMask(u.grid, u.grid.interior() & (u.values == phi.values))


def free_boundary(mask: CellMask) -> CellMask:
    """
    Nodes of ``mask`` with at least one face neighbor outside it, restricted to
    interior nodes. Neighbors wrap on a torus and are ignored past a box face.
    """
    grid = mask.grid
    flags = mask.flags
    if not flags.any() or flags.all():
        raise DegenerateSetError("Free boundary of an empty or full set is degenerate")
    outside = np.zeros(grid.shape, dtype=bool)
    if grid.periodic:
        for axis in range(grid.dim):
            outside |= ~np.roll(flags, 1, axis=axis)
            outside |= ~np.roll(flags, -1, axis=axis)
    else:
        padded = np.pad(flags, 1, mode="constant", constant_values=True)
        core = tuple(slice(1, -1) for _ in range(grid.dim))
        for axis in range(grid.dim):
            for shift in (1, -1):
                view = list(core)
                view[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
                outside |= ~padded[tuple(view)]
    return CellMask(grid, flags & outside & grid.interior())


@dataclasses.dataclass(frozen=True, eq=False)
class BulkLattice:
    """
    Cube lattice anchor + ℓℤⁿ used to coarsen a contact set.

    ``cube_index`` has shape ``(dim, *grid.shape)`` and holds each node's cube
    coordinates; ``cube_ids`` flattens them to one integer per node.
    """

    grid: Grid
    cube_side: float
    anchor: Tuple[float, ...]
    cube_index: np.ndarray
    cube_ids: np.ndarray

    @classmethod
    def build(cls, grid, cube_side, anchor=None):
        anchor = tuple(grid.origin) if anchor is None else tuple(float(a) for a in anchor)
        if len(anchor) != grid.dim:
            raise DomainError(f"Lattice anchor {anchor} must have {grid.dim} entries")
        coords = grid.mesh()
        shift = np.asarray(anchor).reshape((-1,) + (1,) * grid.dim)
        # nodes on a cube face belong to the cube above it
        index = np.floor((coords - shift) / cube_side + 1e-9).astype(np.int64)
        lo = index.reshape(grid.dim, -1).min(axis=1)
        hi = index.reshape(grid.dim, -1).max(axis=1)
        local = [index[a] - lo[a] for a in range(grid.dim)]
        ids = np.ravel_multi_index(local, tuple(int(v) for v in hi - lo + 1))
        return cls(grid, float(cube_side), anchor, index, ids)

    def cube_of(self, node):
        return tuple(int(self.cube_index[(a,) + tuple(node)]) for a in range(self.grid.dim))

    def cube_center(self, cube):
        return tuple(a + (k + 0.5) * self.cube_side for a, k in zip(self.anchor, cube))


def cube_side(dim, lam, r_eps):
    """ℓ = 4 (2n/λ)^{1/2} 𝔯(ε)."""
    return 4.0 * math.sqrt(2.0 * dim / lam) * r_eps


def bulk_contact_set(contact: CellMask, r_eps, lam, anchor=None, min_side=None):
    """
    Union of lattice cubes of side 4(2n/λ)^{1/2}𝔯(ε) that contain a contact node.

    Args:
        contact (CellMask): Contact set Λ_ε.
        r_eps (float): Minimal length scale 𝔯(ε).
        lam (float): Ellipticity constant λ.
        anchor (sequence of float, optional): Lattice anchor, the grid origin by default.
        min_side (float, optional): Lower clamp for the cube side. Without it a side
            below 2h is a resolution error.

    Returns:
        tuple: ``(CellMask, BulkLattice)``.
    """
    grid = contact.grid
    if r_eps < 0 or (r_eps == 0 and min_side is None):
        raise DomainError(f"r_eps must be positive, got {r_eps}")
    side = cube_side(grid.dim, lam, r_eps)
    if min_side is not None and side < min_side:
        logger.info("Cube side %.3e clamped to %.3e", side, min_side)
        side = float(min_side)
    if side < 2 * grid.spacing * (1 - 1e-12):
        raise ResolutionError(
            f"Cube side {side:.3e} is below 2h = {2 * grid.spacing:.3e}; lattice under-resolved"
        )
    lattice = BulkLattice.build(grid, side, anchor)
    if not contact.any():
        return CellMask.empty(grid), lattice
    hit = np.unique(lattice.cube_ids[contact.flags])
    return CellMask(grid, np.isin(lattice.cube_ids, hit)), lattice


def bulk_free_boundary(bulk: CellMask) -> CellMask:
    """Γ̃_ε = ∂Λ̃_ε ∩ U."""
    return free_boundary(bulk)
