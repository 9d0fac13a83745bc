import io
import csv
import math
import logging
import dataclasses
import concurrent.futures
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from obshom.lib.errors import (
    ConfigError,
    DomainError,
    FitError,
    InvariantViolation,
    NonConvergenceError,
    RangeError,
    ResolutionError,
)
from obshom.lib.grid import Grid, ScalarField, dirichlet_energy, laplacian_apply
from obshom.lib.obstacles import predicted_exponent
from obshom.solver.complementarity import (
    ObstacleProblemSpec,
    SolverParams,
    check_psi,
    solve_complementarity,
)

logger = logging.getLogger(__name__)

SWEEP_HEADER = ["mu", "E", "energy", "active_fraction", "sweeps"]


@dataclasses.dataclass(frozen=True, eq=False)
class CorrectorRecord:
    mu: float
    chi: ScalarField
    height: float
    energy: float
    active_fraction: float
    sweeps: int = 0
    residual: float = 0.0
    laplacian_residual: float = 0.0
    tol: float = 0.0

    def row(self):
        return {
            "mu": self.mu,
            "E": self.height,
            "energy": self.energy,
            "active_fraction": self.active_fraction,
            "sweeps": self.sweeps,
        }


@dataclasses.dataclass
class RateFit:
    """
    Log-log fit of 𝓔(μ) ~ μ^slope over a μ-sweep.

    ``fit_residual`` is the largest relative deviation of the fitted power law
    from the samples that entered the fit.
    """

    samples: List[Tuple[float, float]]
    slope: float
    intercept: float
    log_corrected_slope: float
    fit_residual: float
    window: Tuple[float, float]
    discarded: List[float] = dataclasses.field(default_factory=list)
    excluded: List[float] = dataclasses.field(default_factory=list)
    monotone: bool = True
    energy_ok: bool = True
    predicted: Optional[dict] = None
    records: List[CorrectorRecord] = dataclasses.field(default_factory=list, repr=False)

    def summary(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "log_corrected_slope": self.log_corrected_slope,
            "residual": self.fit_residual,
            "window": list(self.window),
            "samples": [list(s) for s in self.samples],
            "discarded": self.discarded,
            "excluded": self.excluded,
            "monotone": self.monotone,
            "energy_ok": self.energy_ok,
            "predicted": self.predicted,
        }


@dataclasses.dataclass(frozen=True)
class LengthScaleParams:
    p: float
    lam: float = 1.0
    cell_resolution: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.cell_resolution is not None and int(self.cell_resolution) < 3:
            raise ConfigError(f"cell_resolution must be at least 3, got {self.cell_resolution}")

    def mu(self, eps):
        return eps ** (2.0 - self.p) / self.lam


class EmuTable:
    """
    Cached 𝓔(μ) samples, interpolated piecewise-linearly in log-log coordinates.

    Heights are made nondecreasing in μ before interpolation. Queries outside the
    sampled range raise RangeError.
    """

    def __init__(self, mus, heights):
        mus = np.asarray(mus, dtype=float)
        heights = np.asarray(heights, dtype=float)
        if mus.size < 2 or mus.size != heights.size:
            raise FitError("An EmuTable needs at least two (mu, E) samples")
        if np.any(mus <= 0) or np.any(heights < 0):
            raise FitError("EmuTable samples need mu > 0 and E >= 0")
        order = np.argsort(mus)
        self.mus = mus[order]
        self.heights = np.maximum.accumulate(heights[order])

    @classmethod
    def from_function(cls, fn, mu_min, mu_max, count=33):
        mus = np.geomspace(mu_min, mu_max, count)
        return cls(mus, [fn(mu) for mu in mus])

    @classmethod
    def from_csv(cls, path):
        try:
            with open(path, "r", newline="") as f:
                rows = list(csv.DictReader(f))
        except FileNotFoundError as error:
            raise ConfigError(f"Sweep table not found: {path}") from error
        return cls([float(r["mu"]) for r in rows], [float(r["E"]) for r in rows])

    @property
    def range(self):
        return float(self.mus[0]), float(self.mus[-1])

    def __call__(self, mu):
        lo, hi = self.range
        if not lo * (1 - 1e-12) <= mu <= hi * (1 + 1e-12):
            raise RangeError(f"mu = {mu:.6g} is outside the tabulated range [{lo:.6g}, {hi:.6g}]")
        mu = min(max(mu, lo), hi)
        x = np.log(self.mus)
        if np.all(self.heights > 0):
            return float(np.exp(np.interp(math.log(mu), x, np.log(self.heights))))
        return float(np.interp(math.log(mu), x, self.heights))


def resample_cell(psi, cell_resolution):
    """Subsample ψ to ``cell_resolution`` nodes per axis (must divide its resolution)."""
    m = psi.grid.shape[0]
    if cell_resolution is None or int(cell_resolution) == m:
        return psi
    cell_resolution = int(cell_resolution)
    if m % cell_resolution != 0:
        raise ResolutionError(
            f"Cannot resample a {m}-node cell to {cell_resolution} nodes per axis"
        )
    stride = m // cell_resolution
    values = psi.values[(slice(None, None, stride),) * psi.grid.dim]
    return ScalarField(Grid.torus(cell_resolution, psi.grid.dim), values)


def solve_corrector(psi: ScalarField, mu: float, params=None) -> CorrectorRecord:
    """
    Periodic minimal supersolution χ_μ with Δ_h χ ≤ μ above ψ on the unit torus.

    Args:
        psi (ScalarField): ψ on the unit torus, values in [−1, 0].
        mu (float): Right-hand side bound μ > 0.
        params (SolverParams, optional): Solver parameters.
    """
    if not mu > 0 or not math.isfinite(mu):
        raise DomainError(f"mu must be positive, got {mu}")
    check_psi(psi)
    spec = ObstacleProblemSpec.build(psi, float(mu), None, params)
    sol = solve_complementarity(spec)
    chi = sol.u
    return CorrectorRecord(
        mu=float(mu),
        chi=chi,
        height=max(0.0, -chi.min()),
        energy=dirichlet_energy(chi),
        active_fraction=sol.contact.count() / chi.grid.size,
        sweeps=sol.sweeps_used,
        residual=sol.residual,
        laplacian_residual=sol.laplacian_residual,
        tol=spec.tol,
    )


def energy_check(rec: CorrectorRecord, mu=None, psi=None, strict=True):
    """
    Check ∫|∇χ_μ|² ≤ μ𝓔(μ) with the energy recomputed by summation by parts.

    Δ_h χ ≤ μ + r_L at every node, r_L the Laplacian-unit residual, so the energy is at
    most (μ + r_L)∫|χ| + μ max(χ, 0). The slack is that residual term plus summation
    roundoff.

    Also reports the bounds ψ ≤ χ ≤ 0 when ``psi`` is given.

    Returns:
        dict: ``energy``, ``energy_sbp``, ``bound``, ``slack``, ``ratio``, ``margin``, ``ok``.
    """
    mu = rec.mu if mu is None else float(mu)
    chi = rec.chi
    cell = chi.grid.spacing**chi.grid.dim
    terms = chi.values * laplacian_apply(chi).values * cell
    energy_sbp = float(-np.sum(terms))
    roundoff = 16 * np.finfo(float).eps * math.log2(max(chi.grid.size, 2)) * float(np.abs(terms).sum())
    slack = (
        rec.laplacian_residual * float(np.mean(np.abs(chi.values)))
        + mu * max(chi.max(), 0.0)
        + roundoff
    )
    bound = mu * rec.height * (1 + 1e-8) + slack
    worst = max(rec.energy, energy_sbp)
    report = {
        "mu": mu,
        "energy": rec.energy,
        "energy_sbp": energy_sbp,
        "bound": bound,
        "slack": slack,
        "ratio": rec.energy / (mu * rec.height) if rec.height > 0 else 0.0,
        "margin": bound - worst,
        "chi_max": chi.max(),
    }
    ok = worst <= bound and chi.max() <= rec.tol
    if psi is not None:
        gap = float((chi.values - psi.values).min())
        report["chi_minus_psi_min"] = gap
        ok = ok and gap >= -rec.tol
    report["ok"] = bool(ok)
    if strict and not ok:
        raise InvariantViolation(
            f"Corrector energy check failed at mu={mu}: energy {worst:.6e} > bound {bound:.6e}",
            report=report,
        )
    return report


def _corrector_job(psi, mu, params):
    try:
        return mu, solve_corrector(psi, mu, params), None
    except NonConvergenceError as error:
        return mu, None, str(error)


def _fit_line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept), y - (slope * x + intercept)


def emu_sweep(
    psi,
    mu_list,
    cell_resolution=None,
    params=None,
    threads=1,
    family=None,
    family_params=None,
    strict=True,
):
    """
    Solve the corrector for every μ and fit the decay rate of 𝓔(μ).

    Args:
        psi (ScalarField): ψ on the unit torus.
        mu_list (list of float): Positive, descending, spanning at least two decades.
        cell_resolution (int, optional): Nodes per axis for the solves.
        params (SolverParams, optional): Solver parameters.
        threads (int): Worker processes.
        family (str, optional): ψ family id, used to attach the predicted exponent.
        family_params (dict, optional): Extra family parameters (cusp exponent).
        strict (bool): Raise InvariantViolation on a monotonicity or energy failure.
    """
    mus = [float(m) for m in mu_list]
    if any(m <= 0 for m in mus):
        raise DomainError("Every mu must be positive")
    if any(a <= b for a, b in zip(mus, mus[1:])):
        raise DomainError("mu_list must be sorted in strictly descending order")
    if len(mus) < 4 or math.log10(mus[0] / mus[-1]) < 2 - 1e-9:
        raise FitError("A rate fit needs at least 4 values of mu spanning 2 decades")

    psi = resample_cell(psi, cell_resolution)
    check_psi(psi)
    params = params or SolverParams.from_dict()

    results = {}
    with tqdm(total=len(mus), desc="mu sweep", leave=False) as pbar:
        if threads > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as executor:
                futures = [executor.submit(_corrector_job, psi, mu, params) for mu in mus]
                for future in concurrent.futures.as_completed(futures):
                    mu, rec, err = future.result()
                    results[mu] = (rec, err)
                    pbar.update(1)
        else:
            for mu in mus:
                mu, rec, err = _corrector_job(psi, mu, params)
                results[mu] = (rec, err)
                pbar.update(1)

    records, excluded = [], []
    for mu in mus:
        rec, err = results[mu]
        if rec is None:
            logger.warning("Excluding mu=%.3e from the fit: %s", mu, err)
            excluded.append(mu)
        else:
            records.append(rec)

    monotone = True
    for a, b in zip(records, records[1:]):
        # μ decreases along the list, so 𝓔 must not grow
        if b.height > a.height + 4 * max(a.tol, b.tol):
            monotone = False
            logger.warning(
                "E(mu) not monotone: E(%.3e)=%.6e > E(%.3e)=%.6e", b.mu, b.height, a.mu, a.height
            )
    energy_reports = [energy_check(rec, psi=psi, strict=False) for rec in records]
    energy_ok = all(r["ok"] for r in energy_reports)

    fit = fit_rate(
        [(r.mu, r.height) for r in records],
        excluded=excluded,
    )
    fit.monotone = monotone
    fit.energy_ok = energy_ok
    fit.records = records
    if family is not None:
        fit.predicted = predicted_rate(family, psi.grid.dim, **(family_params or {}))
    if strict and not (monotone and energy_ok):
        raise InvariantViolation(
            "Corrector sweep violated monotonicity or the energy bound", report=fit.summary()
        )
    return fit


def fit_rate(samples, excluded=None):
    """
    Ordinary least squares on (log μ, log 𝓔). The largest μ is dropped once if its
    residual exceeds three times the median residual.
    """
    usable = sorted(((m, e) for m, e in samples if e > 0), reverse=True)
    if len(usable) < 4:
        raise FitError(f"Only {len(usable)} samples with E > 0, need at least 4")
    mu = np.array([s[0] for s in usable])
    height = np.array([s[1] for s in usable])
    x, y = np.log(mu), np.log(height)
    slope, intercept, resid = _fit_line(x, y)
    discarded = []
    median = float(np.median(np.abs(resid)))
    keeps_span = math.log10(mu[1] / mu[-1]) >= 2 - 1e-9 if len(mu) > 1 else False
    if len(usable) > 4 and keeps_span and abs(resid[0]) > max(3 * median, 1e-9):
        logger.info(
            "Discarding mu=%.3e from the fit: residual %.3e > 3 x median %.3e",
            mu[0], abs(resid[0]), median,
        )
        discarded.append(float(mu[0]))
        mu, height, x, y = mu[1:], height[1:], x[1:], y[1:]
        slope, intercept, resid = _fit_line(x, y)
    if math.log10(mu.max() / mu.min()) < 2 - 1e-9:
        raise FitError("Fitted samples span less than 2 decades of mu")
    corrected, _, _ = _fit_line(x, np.log(height / (1 + np.abs(x))))
    return RateFit(
        samples=[(float(m), float(e)) for m, e in zip(mu, height)],
        slope=slope,
        intercept=intercept,
        log_corrected_slope=corrected,
        fit_residual=float(np.max(np.abs(np.expm1(resid)))),
        window=(float(mu.min()), float(mu.max())),
        discarded=discarded,
        excluded=list(excluded or []),
    )


def sweep_csv(fit):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SWEEP_HEADER, lineterminator="\n")
    writer.writeheader()
    for rec in fit.records:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.row().items()})
    return buffer.getvalue()


def min_length_scale(
    eps, params: LengthScaleParams, psi, table=None, solver_params=None, record=None
):
    """
    𝔯(ε) = (ε^p 𝓔(λ⁻¹ε^{2−p}))^{1/2}.

    𝓔 comes from ``table`` when given, then from ``record`` (a corrector already
    solved at μ = λ⁻¹ε^{2−p}), otherwise from a direct corrector solve.
    """
    if not 0 < eps <= 1:
        raise DomainError(f"eps must lie in (0, 1], got {eps}")
    mu = params.mu(eps)
    if not math.isfinite(mu) or mu <= 0:
        raise RangeError(f"mu = {mu} is not solvable")
    if table is not None:
        height = table(mu)
    elif record is not None:
        if not math.isclose(record.mu, mu, rel_tol=1e-12):
            raise DomainError(f"Corrector record solved at mu={record.mu:.6g}, need mu={mu:.6g}")
        height = record.height
    else:
        cell = resample_cell(psi, params.cell_resolution)
        height = solve_corrector(cell, mu, solver_params).height
    return math.sqrt(eps**params.p * height)


def length_scales(eps_list, params, psi, table=None, solver_params=None, records=None):
    """
    𝔯 over an ε list; requires strict decay as ε decreases unless 𝔯 is already 0.

    ``records`` maps ε to a precomputed corrector record.
    """
    records = records or {}
    values = [
        min_length_scale(e, params, psi, table, solver_params, records.get(e)) for e in eps_list
    ]
    pairs = sorted(zip(eps_list, values), reverse=True)
    for (e1, r1), (e2, r2) in zip(pairs, pairs[1:]):
        if r1 > 0 and not r2 < r1:
            raise DomainError(
                f"r(eps) does not decay: r({e2})={r2:.6e} >= r({e1})={r1:.6e}"
            )
    return values


def predicted_rate(family, dim, **family_params):
    alpha, log_factor = predicted_exponent(family, dim, **family_params)
    return {"exponent": alpha, "log_factor": log_factor}


def decay_condition_holds(alpha, p):
    """With 𝓔(μ) ≲ μ^α, 𝔯(ε)² ≲ ε^{(1−α)p + 2α}, which vanishes iff the exponent is positive."""
    return (1 - alpha) * p + 2 * alpha > 0
