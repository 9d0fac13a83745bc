import math
import logging

import numpy as np
from scipy.optimize import brentq

from obshom.lib.errors import ConfigError, EllipticityError, ResolutionError
from obshom.lib.grid import Grid, sample

logger = logging.getLogger(__name__)

PSI_FAMILIES = ("laminar", "sine", "isolated-peak", "cusp", "constant")


def paraboloid(grid, c, b, center=None):
    """φ₀(x) = c − b|x − center|² sampled on ``grid``."""
    center = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)

    def fn(x):
        shifted = x - center.reshape((-1,) + (1,) * grid.dim)
        return c - b * np.sum(shifted**2, axis=0)

    return sample(fn, grid)


def check_paraboloid_window(dim, b, lam):
    """The paraboloid has −Δφ₀ ≡ 2nb, which must lie in [λ, 1/λ]."""
    value = 2 * dim * b
    if not (lam <= value <= 1.0 / lam):
        raise EllipticityError(
            f"Paraboloid curvature 2nb = {value} is outside the ellipticity window "
            f"[{lam}, {1.0 / lam}]",
            value=value,
        )
    return value


def _periodic_offset(x):
    return x - np.rint(x)


def psi_function(family, dim, **params):
    """
    Return the unit-periodic obstacle ψ as a callable on coordinate arrays.

    Families:
        laminar / sine: −sin²(πx₁), depends on one coordinate only.
        isolated-peak: Π cos²(πx_i) − 1, a single C^{1,1} peak per cell.
        cusp: −min(1, |x|^s) with the periodic distance to the lattice, s = ``s``.
        constant: ψ ≡ ``value`` (default 0).
    """
    if family in ("laminar", "sine"):
        return lambda x: -np.sin(np.pi * x[0]) ** 2
    if family == "isolated-peak":
        return lambda x: np.prod(np.cos(np.pi * x) ** 2, axis=0) - 1.0
    if family == "cusp":
        s = float(params.get("s", 1.0))
        if not 0 < s <= 2:
            raise ConfigError(f"Cusp exponent s must lie in (0, 2], got {s}")

        def cusp(x):
            r = np.sqrt(np.sum(_periodic_offset(x) ** 2, axis=0))
            return -np.minimum(1.0, r**s)

        return cusp
    if family == "constant":
        value = float(params.get("value", 0.0))
        return lambda x: np.full(x.shape[1:], value)
    raise ConfigError(f"Unknown psi family '{family}', expected one of {PSI_FAMILIES}")


def psi_cell(family, dim, nodes, **params):
    """ψ sampled on the unit torus with ``nodes`` nodes per axis."""
    return sample(psi_function(family, dim, **params), Grid.torus(nodes, dim))


def cell_ratio(grid, eps):
    """Nodes per period ε/h; raises unless it is an integer."""
    ratio = eps / grid.spacing
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(ratio, 1.0):
        raise ResolutionError(f"eps/h = {ratio} must be a positive integer")
    return k


def extend_periodic(cell, grid, eps):
    """
    Values of the unit-periodic ``cell`` field at x/ε for every node x of ``grid``.

    The cell resolution must be a multiple of ε/h and the grid origin must lie on
    hℤⁿ, so every node maps to a cell node exactly.

    Args:
        cell (ScalarField): Field on the unit torus.
        grid (Grid): Target grid.
        eps (float): Period ε.

    Returns:
        numpy.ndarray: Array of shape ``grid.shape``.
    """
    k = cell_ratio(grid, eps)
    if k < 16:
        logger.warning("eps/h = %d is below 16 nodes per period", k)
    m = cell.grid.shape[0]
    if m % k != 0:
        raise ResolutionError(
            f"Cell resolution {m} is not a multiple of eps/h = {k}"
        )
    stride = m // k
    coarse = cell.values[(slice(None, None, stride),) * cell.grid.dim]
    offsets = np.asarray(grid.origin) / grid.spacing
    shifts = np.rint(offsets).astype(int)
    if np.any(np.abs(offsets - shifts) > 1e-9 * np.maximum(1.0, np.abs(offsets))):
        raise ResolutionError(f"Grid origin {grid.origin} does not lie on the lattice hZ^n")
    index = [np.mod(shifts[a] + np.arange(grid.shape[a]), k) for a in range(grid.dim)]
    return coarse[np.ix_(*index)]


def predicted_exponent(family, dim, **params):
    """
    Decay exponent α in 𝓔(μ) ≲ μ^α (up to a log factor) for a ψ family.

    Returns ``(alpha, log_factor)``; ``(None, False)`` when no rate is known.
    """
    if family in ("laminar", "sine"):
        # maximum set is a hyperplane: codimension 1
        return 1.0, False
    if family == "isolated-peak":
        return _codimension_rate(dim)
    if family == "cusp":
        s = float(params.get("s", 1.0))
        if dim >= 3:
            return s / (s + dim - 2), False
        return _codimension_rate(dim)
    if family == "constant":
        return None, False
    return None, False


def _codimension_rate(k):
    if k == 1:
        return 1.0, False
    if k == 2:
        return 1.0, True
    return 2.0 / k, False


def paraboloid_contact_radius(c, b, dim, outer_radius):
    """
    Radius of the contact ball for φ₀ = c − b|x|² on the ball of radius ``outer_radius``
    with zero boundary data, from the radial tangency condition.
    """
    R = float(outer_radius)
    if c <= 0:
        return 0.0
    if dim == 1:
        disc = R * R - c / b
        return R - math.sqrt(disc) if disc >= 0 else float("nan")

    if dim == 2:
        g, dg = (lambda r: math.log(R / r)), (lambda r: -1.0 / r)
    else:
        g = lambda r: r ** (2 - dim) - R ** (2 - dim)
        dg = lambda r: (2 - dim) * r ** (1 - dim)

    # u = αg on the annulus; tangency φ₀(a) = αg(a) and φ₀'(a) = αg'(a)
    def mismatch(a):
        alpha = -2 * b * a / dg(a)
        return c - b * a * a - alpha * g(a)

    lo, hi = 1e-9 * R, R * (1 - 1e-12)
    if mismatch(lo) * mismatch(hi) > 0:
        return float("nan")
    return brentq(mismatch, lo, hi, xtol=1e-14)
