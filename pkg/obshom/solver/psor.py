"""Projected SOR kernels for the discrete complementarity problem

    min{ f − Δ_h u, u − φ } = 0

on the free nodes of a grid. Everything here works on flat row-major arrays;
the stencil is a table of flat neighbor indices per free node.
"""

import math
import logging

import numpy as np
from numba import njit, prange
from tqdm import tqdm

from obshom.lib.errors import NonConvergenceError

logger = logging.getLogger(__name__)


class Stencil:
    """
    Flat neighbor table of the 2n+1 point Laplacian.

    Attributes:
        free (numpy.ndarray): Flat indices of the unknowns (interior nodes of a box,
            every node of a torus).
        neighbors (numpy.ndarray): ``(len(free), 2n)`` flat indices of face neighbors.
        colors (list of numpy.ndarray): Positions into ``free`` per sweep color. Two
            colors (red-black) when that is a proper coloring, otherwise one.
    """

    def __init__(self, grid):
        self.grid = grid
        self.two_n = 2 * grid.dim
        self.h2 = grid.spacing**2
        flat = np.arange(grid.size, dtype=np.int64).reshape(grid.shape)
        interior = grid.interior()
        self.free = flat[interior].astype(np.int64)
        columns = []
        for axis in range(grid.dim):
            columns.append(np.roll(flat, 1, axis=axis)[interior])
            columns.append(np.roll(flat, -1, axis=axis)[interior])
        self.neighbors = np.ascontiguousarray(np.stack(columns, axis=1), dtype=np.int64)

        self.red_black = (not grid.periodic) or all(s % 2 == 0 for s in grid.shape)
        if self.red_black:
            parity = np.indices(grid.shape).sum(axis=0)[interior] % 2
            self.colors = [
                np.nonzero(parity == 0)[0].astype(np.int64),
                np.nonzero(parity == 1)[0].astype(np.int64),
            ]
        else:
            # odd torus: red-black is not a proper coloring, sweep lexicographically
            self.colors = [np.arange(self.free.size, dtype=np.int64)]

    @property
    def unknowns(self):
        return int(self.free.size)


def optimal_omega(grid):
    """Optimal SOR factor for the model Laplacian on this grid."""
    nodes = max(grid.shape)
    if grid.periodic:
        return 2.0 / (1.0 + math.sin(2.0 * math.pi / nodes))
    return 2.0 / (1.0 + math.sin(math.pi / (nodes - 1)))


@njit(cache=True)
def _sweep_serial(u, phi, f, free, neighbors, positions, h2, omega, two_n):
    for q in range(positions.shape[0]):
        k = positions[q]
        i = free[k]
        s = 0.0
        for j in range(neighbors.shape[1]):
            s += u[neighbors[k, j]]
        gs = (s - h2 * f[i]) / two_n
        v = u[i] + omega * (gs - u[i])
        if v < phi[i]:
            v = phi[i]
        u[i] = v


@njit(parallel=True, cache=True)
def _sweep_color(u, phi, f, free, neighbors, positions, h2, omega, two_n):
    for q in prange(positions.shape[0]):
        k = positions[q]
        i = free[k]
        s = 0.0
        for j in range(neighbors.shape[1]):
            s += u[neighbors[k, j]]
        gs = (s - h2 * f[i]) / two_n
        v = u[i] + omega * (gs - u[i])
        if v < phi[i]:
            v = phi[i]
        u[i] = v


@njit(parallel=True, cache=True)
def scaled_residual(u, phi, f, free, neighbors, h2, two_n):
    """max_i |min(u_i − gs_i, u_i − φ_i)|, i.e. the residual in solution units."""
    r = 0.0
    for k in prange(free.shape[0]):
        i = free[k]
        s = 0.0
        for j in range(neighbors.shape[1]):
            s += u[neighbors[k, j]]
        gs = (s - h2 * f[i]) / two_n
        a = u[i] - gs
        b = u[i] - phi[i]
        m = a if a < b else b
        r = max(r, abs(m))
    return r


def sweep(u, phi, f, stencil, omega):
    """One full projected SOR sweep, in place."""
    if stencil.red_black:
        for positions in stencil.colors:
            _sweep_color(
                u, phi, f, stencil.free, stencil.neighbors, positions,
                stencil.h2, omega, stencil.two_n,
            )
    else:
        _sweep_serial(
            u, phi, f, stencil.free, stencil.neighbors, stencil.colors[0],
            stencil.h2, omega, stencil.two_n,
        )


def residual(u, phi, f, stencil):
    return float(
        scaled_residual(u, phi, f, stencil.free, stencil.neighbors, stencil.h2, stencil.two_n)
    )


def active_count(u, phi, stencil):
    return int(np.count_nonzero(u[stencil.free] == phi[stencil.free]))


def run_psor(
    u,
    phi,
    f,
    stencil,
    omega,
    tol,
    max_sweeps,
    check_every=10,
    history=None,
    raise_on_failure=True,
    progress=False,
):
    """
    Iterate projected SOR in place until the scaled residual is at most ``tol``.

    Args:
        u (numpy.ndarray): Flat working field; face values are never touched.
        phi (numpy.ndarray): Flat obstacle.
        f (numpy.ndarray): Flat right-hand side bound.
        stencil (Stencil): Neighbor table of the grid.
        omega (float): Relaxation factor in (0, 2).
        tol (float): Residual tolerance in solution units.
        max_sweeps (int): Sweep cap.
        check_every (int): Sweeps between residual evaluations.
        history (list, optional): Receives ``{"sweep", "residual", "active"}`` records.
        raise_on_failure (bool): Raise NonConvergenceError when the cap is hit.
        progress (bool): Show a tqdm bar.

    Returns:
        tuple: ``(sweeps, residual)``.
    """
    sweeps = 0
    r = residual(u, phi, f, stencil)
    if history is not None:
        history.append({"sweep": 0, "residual": r, "active": active_count(u, phi, stencil)})
    with tqdm(total=max_sweeps, desc="PSOR", disable=not progress, leave=False) as bar:
        while r > tol and sweeps < max_sweeps:
            block = min(check_every, max_sweeps - sweeps)
            for _ in range(block):
                sweep(u, phi, f, stencil, omega)
            sweeps += block
            bar.update(block)
            r = residual(u, phi, f, stencil)
            if history is not None:
                history.append(
                    {"sweep": sweeps, "residual": r, "active": active_count(u, phi, stencil)}
                )
            if not np.isfinite(r):
                raise NonConvergenceError(
                    f"PSOR diverged after {sweeps} sweeps", residual=r, sweeps=sweeps
                )
    if r > tol and raise_on_failure:
        raise NonConvergenceError(
            f"PSOR did not reach tol={tol:.3e} in {sweeps} sweeps (residual {r:.3e})",
            residual=r,
            sweeps=sweeps,
        )
    logger.debug("PSOR: %d sweeps, residual %.3e", sweeps, r)
    return sweeps, r
