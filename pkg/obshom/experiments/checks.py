import logging

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from obshom.corrector.cell_problem import resample_cell, solve_corrector
from obshom.geometry.distance import distance_transform
from obshom.geometry.probes import probe_quadratic_growth, slack_constant, strided_nodes
from obshom.lib.errors import DegenerateSetError, DomainError, InvariantViolation, ResolutionError
from obshom.lib.grid import gradient
from obshom.lib.obstacles import cell_ratio, extend_periodic

logger = logging.getLogger(__name__)


def _node(grid, flat_argmin_of):
    index = np.unravel_index(int(np.argmin(flat_argmin_of)), grid.shape)
    return [int(i) for i in index], list(grid.node_coordinate(index))


def sandwich_check(w0, weps, r_eps, h=None, slack_const=None, eps=None, p=None, strict=True):
    """
    Check w₀ − 𝔯(ε)² − C_d h² ≤ w_ε ≤ w₀ + C_d h² at every node.

    ``lo`` and ``hi`` are the worst margins of the lower and upper bound; both are
    nonnegative when the bounds hold.
    """
    w0.grid.check_same(weps.grid, "w0 and weps")
    grid = w0.grid
    h = grid.spacing if h is None else h
    if slack_const is None:
        slack_const = slack_constant(w0)
    slack = slack_const * h * h
    upper = w0.values + slack - weps.values
    lower = weps.values - (w0.values - r_eps**2 - slack)
    hi_node, hi_x = _node(grid, upper)
    lo_node, lo_x = _node(grid, lower)
    report = {
        "lo": float(lower.min()),
        "hi": float(upper.min()),
        "lo_node": lo_node,
        "lo_x": lo_x,
        "hi_node": hi_node,
        "hi_x": hi_x,
        "violations": int(np.count_nonzero(lower < 0) + np.count_nonzero(upper < 0)),
        "slack": slack,
        "r_eps_squared": r_eps**2,
        "observed_gap": float((w0.values - weps.values).max()),
    }
    if eps is not None and p is not None:
        report["trivial_gap"] = eps**p
    report["ok"] = report["violations"] == 0
    if strict and not report["ok"]:
        side, node, x = ("lower", lo_node, lo_x) if report["lo"] < 0 else ("upper", hi_node, hi_x)
        raise InvariantViolation(
            f"Sandwich {side} bound violated at node {node} (x = {x}): "
            f"margin {min(report['lo'], report['hi']):.3e}",
            report=report,
        )
    return report


def corrected_obstacle_check(
    weps,
    psi,
    eps,
    p,
    lam,
    cell_resolution=None,
    slack_const=None,
    record=None,
    params=None,
    strict=True,
    w0=None,
):
    """
    Check w_ε(x) ≥ ε^p χ_μ(x/ε) − C_d h² with μ = λ⁻¹ε^{2−p}.

    Args:
        weps (ScalarField): Oscillatory height function.
        psi (ScalarField): ψ on the unit torus.
        eps (float): Period ε.
        p (float): Amplitude exponent.
        lam (float): Ellipticity constant λ.
        cell_resolution (int, optional): Corrector resolution, ε/h by default.
        slack_const (float, optional): C_d, from ``w0`` when omitted.
        record (CorrectorRecord, optional): Precomputed corrector at this μ.
        params (SolverParams, optional): Solver parameters for the corrector solve.
        strict (bool): Raise InvariantViolation on a violation.
        w0 (ScalarField, optional): Background height function; required without
            ``slack_const``.
    """
    grid = weps.grid
    mu = eps ** (2.0 - p) / lam
    if slack_const is None:
        if w0 is None:
            raise DomainError("The corrected obstacle check needs w0 or slack_const")
        w0.grid.check_same(grid, "w0 and weps")
        slack_const = slack_constant(w0)
    if record is None:
        cells = cell_resolution or cell_ratio(grid, eps)
        record = solve_corrector(resample_cell(psi, cells), mu, params)
    slack = slack_const * grid.spacing**2
    bound = eps**p * extend_periodic(record.chi, grid, eps)
    margin = weps.values - bound + slack
    node, x = _node(grid, margin)
    report = {
        "mu": mu,
        "E": record.height,
        "margin": float(margin.min()),
        "node": node,
        "x": x,
        "violations": int(np.count_nonzero(margin < 0)),
        "slack": slack,
    }
    report["ok"] = report["violations"] == 0
    if strict and not report["ok"]:
        raise InvariantViolation(
            f"Corrected obstacle bound violated at node {node} (x = {x}): margin {report['margin']:.3e}",
            report=report,
        )
    return report


def _ball_kernel(grid, radius):
    reach = int(np.floor(radius / grid.spacing + 1e-9))
    offsets = np.indices((2 * reach + 1,) * grid.dim) - reach
    kernel = (np.sum(offsets**2, axis=0) * grid.spacing**2 <= radius**2 * (1 + 1e-12)).astype(float)
    return kernel / kernel.sum()


def ball_average(values, grid, radius):
    """Average of ``values`` over the nodes of B_radius(x) for every node x."""
    kernel = _ball_kernel(grid, radius)
    if grid.periodic:
        return ndimage.convolve(values, kernel, mode="wrap")
    return fftconvolve(values, kernel, mode="same")


def gradient_check(w0, weps, r_eps, stride=1, contacts=None, max_points=None):
    """
    Ball-averaged gradient gap (⨏_{B_𝔯(x)} |∇w₀ − ∇w_ε|²)^{1/2} over centers with
    d(x, ∂U) ≥ 𝔯(ε) + h, so balls never reach the one-sided face stencils.

    With ``contacts = (Λ₀, Λ_ε)`` the pointwise gap on {d(x, Λ₀ ∪ Λ_ε) ≥ 𝔯(ε)} is
    reported as well.

    Returns:
        dict: ``max_rms``, ``ratio`` (max_rms / 𝔯), ``centers`` and optionally
        ``pointwise_max`` and ``pointwise_ratio``.
    """
    grid = w0.grid
    grid.check_same(weps.grid, "w0 and weps")
    h = grid.spacing
    if r_eps < 4 * h:
        raise ResolutionError(f"r_eps = {r_eps:.3e} is below 4h = {4 * h:.3e}")
    g0, ge = gradient(w0), gradient(weps)
    sq = sum((a.values - b.values) ** 2 for a, b in zip(g0, ge))
    averaged = np.maximum(ball_average(sq, grid, r_eps), 0.0)
    admissible = grid.distance_to_faces() >= r_eps + h
    centers = strided_nodes(admissible, max_points, stride if stride and stride > 1 else None)
    if len(centers) == 0:
        raise ResolutionError("No center lies at distance r_eps + h from the box faces")
    picked = averaged[tuple(centers.T)]
    max_rms = float(np.sqrt(picked.max()))
    report = {"max_rms": max_rms, "ratio": max_rms / r_eps, "centers": int(len(centers))}
    if contacts is not None:
        union = contacts[0] | contacts[1]
        far = admissible & (distance_transform(union).dist >= r_eps) if union.any() else admissible
        if far.any():
            pointwise = float(np.sqrt(sq[far].max()))
            report["pointwise_max"] = pointwise
            report["pointwise_ratio"] = pointwise / r_eps
    return report


def bulk_nondegeneracy_check(
    weps,
    bulk_fb,
    r_eps,
    lam,
    radii,
    slack_const=None,
    max_points=1000,
    stride=None,
    strict=True,
):
    """
    Check sup_{B_r(x)} w_ε ≥ c r² − 2𝔯(ε)² at bulk free boundary nodes, c = λ/(8n).

    The report carries the sharpest constant the probes support as ``empirical_const``.
    """
    grid = weps.grid
    if not bulk_fb.any():
        raise DegenerateSetError("Bulk free boundary is empty")
    if slack_const is None:
        slack_const = slack_constant(weps)
    faces = grid.distance_to_faces()
    centers = strided_nodes(bulk_fb.flags & (faces > min(radii)), max_points, stride)
    const = lam / (8 * grid.dim)
    report = probe_quadratic_growth(
        weps, centers, radii, const, 2 * r_eps**2, slack_const, ball_ok=faces
    )
    report["const"] = const
    logger.info(
        "Bulk non-degeneracy: %d probes, worst margin %s, sharpest constant %s (tested %.4g)",
        report["count"], report["worst_margin"], report["empirical_const"], const,
    )
    report["ok"] = report["violations"] == 0
    if strict and not report["ok"]:
        raise InvariantViolation(
            f"Bulk non-degeneracy violated at {report['violations']} probes", report=report
        )
    return report
