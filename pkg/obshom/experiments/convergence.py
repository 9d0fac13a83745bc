import math
import time
import logging
import dataclasses
import concurrent.futures
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from obshom.corrector.cell_problem import (
    EmuTable,
    LengthScaleParams,
    decay_condition_holds,
    length_scales,
    predicted_rate,
    solve_corrector,
)
from obshom.experiments.checks import (
    bulk_nondegeneracy_check,
    corrected_obstacle_check,
    gradient_check,
    sandwich_check,
)
from obshom.geometry.distance import hausdorff_distance
from obshom.geometry.probes import (
    classical_nondegeneracy,
    nondegeneracy_probe,
    regularity_estimates,
    slack_constant,
)
from obshom.geometry.sets import bulk_contact_set, bulk_free_boundary, cube_side, free_boundary
from obshom.lib.errors import (
    ConfigError,
    DomainError,
    ExperimentError,
    ObshomError,
    ResolutionError,
)
from obshom.lib.obstacles import paraboloid_contact_radius
from obshom.solver.complementarity import height_fields, solve_u0, solve_ueps

logger = logging.getLogger(__name__)

REPORT_HEADER = [
    "eps",
    "r_eps",
    "dH_contact",
    "dH_fb",
    "sandwich_lo",
    "sandwich_hi",
    "corrector_margin",
    "nondeg_margin",
    "grad_rms_ratio",
    "status",
]


@dataclasses.dataclass
class ConvergenceReport:
    """
    Per-ε rows plus constants fitted over the successful ones.

    ``constants`` holds C_Lambda, C_Gamma and C_grad (max ratio to 𝔯(ε)); ``trends``
    flags each ratio column as bounded when its max is at most twice its median.
    """

    rows: List[dict]
    constants: dict
    trends: dict
    regularity: dict
    anchor_check: Optional[dict]
    meta: dict

    def csv_rows(self):
        return [{k: row.get(k, float("nan")) for k in REPORT_HEADER} for row in self.rows]

    @property
    def violated(self):
        return any(row["status"] == "violation" for row in self.rows)

    def summary(self):
        return {
            "constants": self.constants,
            "trends": self.trends,
            "regularity": self.regularity,
            "anchor_check": self.anchor_check,
            "rows": [
                {k: v for k, v in row.items() if k not in ("probes",)} for row in self.rows
            ],
            **self.meta,
        }


def _ratio(value, r_eps):
    if value is None or r_eps <= 0 or not math.isfinite(value):
        return float("nan")
    return value / r_eps


def _min_margin(*values):
    present = [v for v in values if v is not None]
    return min(present) if present else float("nan")


def _geometry(contact_eps, contact0, fb0, r_eps, lam, anchor, h):
    bulk, lattice = bulk_contact_set(contact_eps, r_eps, lam, anchor, min_side=2 * h)
    bulk_fb = bulk_free_boundary(bulk)
    return {
        "bulk": bulk,
        "bulk_fb": bulk_fb,
        "cube_side": lattice.cube_side,
        "dH_contact": hausdorff_distance(contact0, bulk),
        "dH_fb": hausdorff_distance(fb0, bulk_fb),
    }


def run_row(config, eps, grid, k, u0_sol, record, r_eps):
    """
    Every stage of one ε row. Raises on stage failure; the caller records it.

    Args:
        config (ScenarioConfig): Scenario.
        eps (float): Period ε.
        grid (Grid): Row grid with ε/h = k.
        k (int): Cell resolution of the row.
        u0_sol (ComplementaritySolution): Background solution on ``grid``.
        record (CorrectorRecord): Corrector at μ = λ⁻¹ε^{2−p} on a k-node cell.
        r_eps (float): Minimal length scale.
    """
    start = time.time()
    lam, p = config.lam, config.p
    h = grid.spacing
    phi0 = config.phi0(grid)
    psi = config.psi_cell(k)

    ueps_sol = solve_ueps(phi0, psi, eps, p, params=config.solver, lam=lam)
    w0, weps = height_fields(u0_sol, ueps_sol, phi0)
    c_d = slack_constant(w0)

    sandwich = sandwich_check(w0, weps, r_eps, h, c_d, eps=eps, p=p, strict=False)
    corrected = corrected_obstacle_check(
        weps, psi, eps, p, lam, k, c_d, record=record, strict=False
    )

    contact0 = u0_sol.contact
    fb0 = free_boundary(contact0)
    geo = _geometry(ueps_sol.contact, contact0, fb0, r_eps, lam, config.anchor, h)

    radii = [m * r_eps for m in config.probe.radii if m * r_eps >= h]
    nondeg = {"worst_margin": None, "violations": 0, "count": 0, "points": []}
    filtered = dict(nondeg)
    if radii:
        if geo["bulk_fb"].any():
            nondeg = bulk_nondegeneracy_check(
                weps, geo["bulk_fb"], r_eps, lam, radii, c_d,
                config.probe.max_points, config.probe.stride, strict=False,
            )
        filtered = nondegeneracy_probe(
            weps, ueps_sol.contact, r_eps, lam, radii, c_d,
            config.probe.max_points, config.probe.stride,
        )
    classical = classical_nondegeneracy(
        w0, contact0, lam, radii or [4 * h], c_d, config.probe.max_points
    )
    target = config.probe.max_points or 1000
    shortfall = {
        name: suite["count"]
        for name, suite in (("bulk", nondeg), ("filtered", filtered))
        if suite["count"] < target
    }
    if shortfall:
        logger.warning(
            "eps=%s: fewer than %d probes in %s", eps, target,
            ", ".join(f"{name} ({count})" for name, count in shortfall.items()),
        )

    try:
        grad = gradient_check(
            w0, weps, r_eps, config.gradient_stride, contacts=(contact0, ueps_sol.contact)
        )
    except ResolutionError as error:
        logger.warning("eps=%s: gradient check skipped: %s", eps, error)
        grad = {"ratio": float("nan"), "skipped": str(error)}

    anchor_shifted = None
    if config.anchor_shift:
        side = max(cube_side(grid.dim, lam, r_eps), 2 * h)
        base = config.anchor or list(grid.origin)
        shifted = [a + config.anchor_shift * side for a in base]
        moved = _geometry(ueps_sol.contact, contact0, fb0, r_eps, lam, shifted, h)
        anchor_shifted = {
            "anchor": shifted,
            "dH_contact": moved["dH_contact"],
            "dH_fb": moved["dH_fb"],
        }

    violations = (
        sandwich["violations"] + corrected["violations"] + nondeg["violations"]
        + filtered["violations"] + classical["violations"]
    )
    row = {
        "eps": eps,
        "r_eps": r_eps,
        "dH_contact": geo["dH_contact"],
        "dH_fb": geo["dH_fb"],
        "sandwich_lo": sandwich["lo"],
        "sandwich_hi": sandwich["hi"],
        "corrector_margin": corrected["margin"],
        "nondeg_margin": _min_margin(
            nondeg["worst_margin"], filtered["worst_margin"], classical["worst_margin"]
        ),
        "grad_rms_ratio": grad["ratio"],
        "status": "violation" if violations else "ok",
        "h": h,
        "cell_resolution": k,
        "mu": record.mu,
        "E": record.height,
        "cube_side": geo["cube_side"],
        "slack_const": c_d,
        "contact_nodes": ueps_sol.contact.count(),
        "bulk_fb_nodes": geo["bulk_fb"].count(),
        "sweeps": ueps_sol.sweeps_used,
        "residual": ueps_sol.residual,
        "observed_gap": sandwich["observed_gap"],
        "trivial_gap": sandwich.get("trivial_gap"),
        "gradient": grad,
        "nondeg_empirical_const": nondeg.get("empirical_const"),
        "probe_counts": {
            "bulk": nondeg["count"],
            "filtered": filtered["count"],
            "classical": classical["count"],
        },
        "probe_shortfall": shortfall,
        "anchor_shifted": anchor_shifted,
        "probes": {"bulk": nondeg["points"], "filtered": filtered["points"], "classical": classical["points"]},
        "seconds": time.time() - start,
    }
    return row


def _row_job(args):
    config, eps, grid, k, u0_sol, record, r_eps = args
    try:
        return eps, run_row(config, eps, grid, k, u0_sol, record, r_eps), None
    except ObshomError as error:
        return eps, None, f"{type(error).__name__}: {error}"


def _failed_row(eps, r_eps, message):
    row = {key: float("nan") for key in REPORT_HEADER}
    row.update({"eps": eps, "r_eps": r_eps, "status": "failed", "error": message})
    return row


def _bounded(values):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return {"max": None, "median": None, "bounded": None}
    top, median = max(finite), float(np.median(finite))
    return {"max": top, "median": median, "bounded": bool(top <= 2 * median) if median > 0 else top == 0}


def run_convergence(config, threads=1):
    """
    Run the ε sweep of a scenario.

    u₀ is solved once per distinct grid and the corrector once per ε in the calling
    process; rows then run independently (in a process pool when ``threads > 1``).
    A failed row is recorded and the sweep continues.

    Raises:
        ExperimentError: Every row failed.
    """
    if not config.eps:
        raise ConfigError("Scenario has no eps values")
    eps_list = sorted(config.eps, reverse=True)
    table = None
    if config.length_scale_table:
        table = EmuTable.from_csv(config.resolve_path(config.length_scale_table))

    grids, u0_cache, caps = {}, {}, []
    for eps in eps_list:
        grid, k, capped = config.grid_for(eps)
        grids[eps] = (grid, k)
        if capped:
            caps.append({"eps": eps, "cell_resolution": k, "h": grid.spacing})
        if grid not in u0_cache:
            u0_cache[grid] = solve_u0(config.phi0(grid), params=config.solver, lam=config.lam)

    params = LengthScaleParams(config.p, config.lam)
    records = {
        eps: solve_corrector(config.psi_cell(grids[eps][1]), params.mu(eps), config.solver)
        for eps in eps_list
    }
    try:
        values = length_scales(eps_list, params, None, table=table, records=records)
    except DomainError as error:
        raise ConfigError(f"Length scale over the eps list: {error}") from error
    r_values = dict(zip(eps_list, values))

    jobs = [
        (config, eps, grids[eps][0], grids[eps][1], u0_cache[grids[eps][0]], records[eps], r_values[eps])
        for eps in eps_list
    ]
    results = {}
    with tqdm(total=len(jobs), desc="eps rows") as pbar:
        if threads > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as executor:
                futures = [executor.submit(_row_job, job) for job in jobs]
                for future in concurrent.futures.as_completed(futures):
                    eps, row, err = future.result()
                    results[eps] = (row, err)
                    pbar.update(1)
        else:
            for job in jobs:
                eps, row, err = _row_job(job)
                results[eps] = (row, err)
                pbar.update(1)

    rows = []
    for eps in eps_list:
        row, err = results[eps]
        if row is None:
            logger.error("eps=%s failed: %s", eps, err)
            row = _failed_row(eps, r_values[eps], err)
        rows.append(row)
    good = [row for row in rows if row["status"] != "failed"]
    if not good:
        raise ExperimentError("Every eps row failed")

    ratios = {
        "C_Lambda": [_ratio(r["dH_contact"], r["r_eps"]) for r in good],
        "C_Gamma": [_ratio(r["dH_fb"], r["r_eps"]) for r in good],
        "C_grad": [r["grad_rms_ratio"] for r in good],
    }
    constants = {
        name: (max((v for v in vals if math.isfinite(v)), default=None)) for name, vals in ratios.items()
    }
    trends = {name: _bounded(vals) for name, vals in ratios.items()}

    finest = min(u0_cache, key=lambda g: g.spacing)
    u0_fine = u0_cache[finest]
    w0_fine = u0_fine.u - config.phi0(finest)
    try:
        regularity = regularity_estimates(w0_fine, u0_fine.contact)
    except ResolutionError as error:
        logger.warning("Regularity estimates skipped: %s", error)
        regularity = {"skipped": str(error)}
    half_width = min(min(abs(lo), abs(hi)) for lo, hi in zip(config.lower, config.upper))
    regularity["analytic_contact_radius"] = paraboloid_contact_radius(
        config.obstacle.c, config.obstacle.b, config.dim, half_width
    )
    nodes = np.argwhere(u0_fine.contact.flags)
    if len(nodes):
        coords = np.array([finest.node_coordinate(tuple(n)) for n in nodes])
        regularity["discrete_contact_radius"] = float(np.sqrt((coords**2).sum(axis=1)).max())

    anchor_check = None
    if config.anchor_shift:
        shifted = [r for r in good if r.get("anchor_shifted")]
        changes = []
        for r in shifted:
            for key in ("dH_contact", "dH_fb"):
                base, moved = r[key], r["anchor_shifted"][key]
                if base > 0 and moved > 0:
                    changes.append(max(base / moved, moved / base))
        anchor_check = {
            "shift": config.anchor_shift,
            "max_change": max(changes) if changes else None,
            "insensitive": bool(max(changes) < 2) if changes else None,
            "C_Lambda": max((_ratio(r["anchor_shifted"]["dH_contact"], r["r_eps"]) for r in shifted), default=None),
            "C_Gamma": max((_ratio(r["anchor_shifted"]["dH_fb"], r["r_eps"]) for r in shifted), default=None),
        }

    empirical = [r["nondeg_empirical_const"] for r in good if r.get("nondeg_empirical_const") is not None]
    if empirical:
        logger.info("Sharpest bulk non-degeneracy constant over rows: %.4g", min(empirical))

    alpha = predicted_rate(config.psi.family, config.dim, **config.psi.params())["exponent"]
    decay = {
        "exponent": alpha,
        "holds": decay_condition_holds(alpha, config.p) if alpha is not None else None,
    }

    meta = {
        "scenario": config.name,
        "config_text": config.raw_text,
        "config_sha256": config.config_sha256,
        "seed": config.seed,
        "threads": threads,
        "caps": caps,
        "sharpest_nondeg_const": min(empirical) if empirical else None,
        "length_scale_source": "table" if table is not None else "direct",
        "decay_condition": decay,
    }
    return ConvergenceReport(rows, constants, trends, regularity, anchor_check, meta)
