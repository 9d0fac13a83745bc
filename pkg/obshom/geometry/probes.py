import logging

import numpy as np

from obshom.lib.errors import ResolutionError
from obshom.lib.grid import CellMask, ball_extremum, ball_nodes, second_difference_max
from obshom.geometry.distance import distance_transform
from obshom.geometry.sets import free_boundary

logger = logging.getLogger(__name__)


def slack_constant(w0):
    """C_d = 4 max(M, 1) with M the largest second difference of w₀."""
    return 4.0 * max(second_difference_max(w0), 1.0)


def strided_nodes(candidates, max_points=1000, stride=None):
    """
    Deterministic subsample of the True nodes of ``candidates``.

    With ``stride`` every stride-th node is kept, otherwise an even spread of at most
    ``max_points`` nodes. ``max_points=None`` keeps all of them.
    """
    nodes = np.argwhere(candidates)
    if stride:
        return nodes[:: int(stride)]
    if max_points is None or len(nodes) <= max_points:
        return nodes
    pick = np.unique(np.linspace(0, len(nodes) - 1, int(max_points)).round().astype(int))
    return nodes[pick]


def probe_quadratic_growth(w, centers, radii, const, offset, slack_const, ball_ok=None):
    """
    Evaluate sup_{B_r(z)} w ≥ const·r² − offset − C_d·h·r at every center and radius.

    Args:
        w (ScalarField): Height function.
        centers (numpy.ndarray): Node indices, shape ``(count, dim)``.
        radii (list of float): Physical radii.
        const (float): Growth constant.
        offset (float): Additive allowance (𝔯² terms).
        slack_const (float): C_d.
        ball_ok (numpy.ndarray, optional): Distance to the box faces; radii at or above
            it are skipped for that center.

    Returns:
        dict: JSON-ready report.
    """
    grid = w.grid
    h = grid.spacing
    points = []
    worst = None
    violations = 0
    sharpest = None
    for node in centers:
        node = tuple(int(i) for i in node)
        center = grid.node_coordinate(node)
        for r in radii:
            if ball_ok is not None and not ball_ok[node] > r:
                continue
            lhs = ball_extremum(w, center, r, "sup")
            rhs = const * r * r - offset
            margin = lhs - rhs + slack_const * h * r
            points.append(
                {"center": list(center), "r": float(r), "lhs": lhs, "rhs": rhs, "margin": margin}
            )
            worst = margin if worst is None else min(worst, margin)
            violations += margin < 0
            candidate = (lhs + offset + slack_const * h * r) / (r * r)
            sharpest = candidate if sharpest is None else min(sharpest, candidate)
    if not points:
        logger.warning("Non-degeneracy probe found no admissible center")
    return {
        "points": points,
        "count": len(points),
        "worst_margin": worst,
        "violations": int(violations),
        "slack_const": slack_const,
        "empirical_const": sharpest,
    }


def nondegeneracy_probe(
    w,
    contact,
    r_eps,
    lam,
    radii,
    slack_const=None,
    max_points=1000,
    stride=None,
):
    """
    Probe sup_{B_r(z)} w ≥ (λ/2n) r² − 𝔯(ε)² at centers z with
    d(z, Λ) > (2n/λ)^{1/2} 𝔯(ε) and B_r(z) inside the box.

    Centers violating the distance hypothesis are left out, not counted as failures.
    Node-set distances can exceed the distance to the continuum contact set by up to
    h√n, so a center is admitted only past threshold + h√n.
    """
    grid = w.grid
    n = grid.dim
    if slack_const is None:
        slack_const = slack_constant(w)
    if contact.any():
        dist = distance_transform(contact).dist
    else:
        dist = np.full(grid.shape, np.inf)
    faces = grid.distance_to_faces()
    threshold = np.sqrt(2 * n / lam) * r_eps
    admitted = threshold + np.sqrt(n) * grid.spacing
    candidates = grid.interior() & (dist > admitted) & (faces > min(radii))
    centers = strided_nodes(candidates, max_points, stride)
    report = probe_quadratic_growth(
        w, centers, radii, lam / (2 * n), r_eps**2, slack_const, ball_ok=faces
    )
    report["distance_threshold"] = float(threshold)
    report["admitted_distance"] = float(admitted)
    return report


def classical_nondegeneracy(w0, contact0, lam, radii, slack_const=None, max_points=1000):
    """sup_{B_r(z)} w₀ ≥ (λ/2n) r² for z on the free boundary Γ₀."""
    grid = w0.grid
    if slack_const is None:
        slack_const = slack_constant(w0)
    fb = free_boundary(contact0)
    faces = grid.distance_to_faces()
    centers = strided_nodes(fb.flags & (faces > min(radii)), max_points)
    return probe_quadratic_growth(
        w0, centers, radii, lam / (2 * grid.dim), 0.0, slack_const, ball_ok=faces
    )


def regularity_estimates(w0, contact0, radii=None, max_points=200, min_extent=16):
    """
    Empirical surrogates for the regularity constants of w₀.

    M is the largest second-difference quotient, c1 the smallest w₀/d(x, Γ₀)² over
    non-contact nodes with d ≥ 4h, and c2 the smallest ratio ρ/r over sampled x ∈ Λ₀
    where ρ is the radius of the largest ball inside Λ₀ ∩ B_r(x), capped at 1/2.

    Args:
        w0 (ScalarField): Height function of the background problem.
        contact0 (CellMask): Its contact set Λ₀.
        radii (list of float, optional): Radii for c2; four radii from 4h up to the
            inradius of Λ₀ by default.
        max_points (int): Sampled contact nodes for c2.
        min_extent (int): Minimal extent of Λ₀ in nodes along every axis.
    """
    grid = w0.grid
    h = grid.spacing
    if not contact0.any():
        raise ResolutionError("Contact set is empty")
    nodes = np.argwhere(contact0.flags)
    extent = nodes.max(axis=0) - nodes.min(axis=0) + 1
    if np.any(extent < min_extent):
        raise ResolutionError(
            f"Contact set spans {tuple(int(e) for e in extent)} nodes, need {min_extent} per axis"
        )

    M = second_difference_max(w0)

    c1 = None
    complement = CellMask(grid, ~contact0.flags)
    if complement.any():
        fb = free_boundary(contact0)
        d_fb = distance_transform(fb).dist
        far = grid.interior() & ~contact0.flags & (d_fb >= 4 * h)
        if far.any():
            c1 = float(np.min(w0.values[far] / d_fb[far] ** 2))
        d_out = distance_transform(complement).dist
    else:
        d_out = np.full(grid.shape, np.inf)

    if radii is None:
        inradius = float(np.max(d_out[contact0.flags]))
        top = max(4 * h, inradius if np.isfinite(inradius) else 4 * h * 8)
        radii = np.geomspace(4 * h, top, 4)
    c2 = 0.5
    for node in strided_nodes(contact0.flags, max_points):
        center = grid.node_coordinate(tuple(node))
        for r in radii:
            idxs, dist = ball_nodes(grid, center, r)
            if dist is None:
                continue
            inside = contact0.flags[np.ix_(*idxs)] & np.isfinite(dist)
            if not inside.any():
                continue
            rho = np.minimum(d_out[np.ix_(*idxs)], r - dist)[inside].max()
            c2 = min(c2, float(rho / r))
    return {"M": M, "c1": c1, "c2": c2, "radii": [float(r) for r in radii]}
