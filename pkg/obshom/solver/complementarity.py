import logging
import dataclasses
from typing import List, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, spsolve

from obshom.configs.config import Config
from obshom.lib.errors import (
    ConfigError,
    DomainError,
    EllipticityError,
    InfeasibilityError,
    NonConvergenceError,
    ObstacleRangeError,
)
from obshom.lib.grid import CellMask, Grid, ScalarField, laplacian_apply
from obshom.lib.obstacles import extend_periodic
from obshom.solver.psor import Stencil, optimal_omega, residual, run_psor

logger = logging.getLogger(__name__)

METHODS = ("psor", "psor-pdas")


@dataclasses.dataclass
class SolverParams:
    """
    Solver knobs. ``tol`` and ``warm_tol`` are relative: the absolute tolerance is
    ``tol * scale`` with ``scale = max(1, |φ|∞, |g|∞)``.
    """

    method: str = "psor-pdas"
    omega: Union[str, float] = "auto"
    tol: float = 1e-10
    max_sweeps: int = 1_000_000
    warm_tol: float = 1e-6
    warm_sweeps: int = 20_000
    check_every: int = 10
    max_active_set_iterations: int = 200
    direct_max_unknowns: int = 400_000
    progress: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown solver method '{self.method}', expected {METHODS}")
        if self.omega != "auto":
            try:
                self.omega = float(self.omega)
            except (TypeError, ValueError) as error:
                raise ConfigError(f"omega must be 'auto' or a number, got {self.omega!r}") from error
            if not 0.0 < self.omega < 2.0:
                raise ConfigError(f"omega must lie in (0, 2), got {self.omega}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if int(self.max_sweeps) < 1 or int(self.check_every) < 1:
            raise ConfigError("max_sweeps and check_every must be positive")

    @classmethod
    def from_dict(cls, overrides=None):
        values = Config().solver_defaults()
        values.update(overrides or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown solver parameters: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class ObstacleProblemSpec:
    grid: Grid
    obstacle: ScalarField
    rhs_bound: ScalarField
    boundary: Optional[ScalarField] = None
    omega: float = 1.7
    tol: float = 1e-10
    max_sweeps: int = 1_000_000
    params: SolverParams = dataclasses.field(default_factory=SolverParams)

    def __post_init__(self):
        self.grid.check_same(self.obstacle.grid, "obstacle")
        self.grid.check_same(self.rhs_bound.grid, "rhs_bound")
        if self.boundary is not None:
            self.grid.check_same(self.boundary.grid, "boundary")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if not 0.0 < self.omega < 2.0:
            raise ConfigError(f"omega must lie in (0, 2), got {self.omega}")

    @classmethod
    def build(cls, obstacle, rhs_bound, boundary=None, params=None):
        """Resolve ``auto`` omega and the absolute tolerance from ``params``."""
        params = params or SolverParams.from_dict()
        grid = obstacle.grid
        if isinstance(rhs_bound, (int, float)):
            rhs_bound = ScalarField.constant(grid, rhs_bound)
        if boundary is None and not grid.periodic:
            boundary = ScalarField.constant(grid, 0.0)
        scale = max(1.0, obstacle.norm_inf(), boundary.norm_inf() if boundary is not None else 0.0)
        omega = optimal_omega(grid) if params.omega == "auto" else float(params.omega)
        return cls(
            grid, obstacle, rhs_bound, boundary, omega,
            params.tol * scale, int(params.max_sweeps), params,
        )

    @property
    def scale(self):
        return self.tol / self.params.tol


@dataclasses.dataclass(frozen=True, eq=False)
class ComplementaritySolution:
    """
    Solved field with its exact contact mask.

    ``residual`` is max |min(u − gs, u − φ)| in solution units (gs the Gauss-Seidel
    value); ``laplacian_residual`` is the same quantity times 2n/h².
    """

    u: ScalarField
    contact: CellMask
    sweeps_used: int
    residual: float
    laplacian_residual: float = 0.0
    active_set_iterations: int = 0
    log: List[dict] = dataclasses.field(default_factory=list)

    def to_log(self):
        return {
            "sweeps_used": self.sweeps_used,
            "residual": self.residual,
            "laplacian_residual": self.laplacian_residual,
            "active_set_iterations": self.active_set_iterations,
            "contact_nodes": self.contact.count(),
            "history": self.log,
        }


class _ActiveSetOperator:
    """Sparse h²Δ_h restricted to free nodes, plus the fixed-node coupling."""

    def __init__(self, stencil):
        n_free = stencil.unknowns
        position = np.full(stencil.grid.size, -1, dtype=np.int64)
        position[stencil.free] = np.arange(n_free)
        cols = position[stencil.neighbors]
        inside = cols >= 0
        rows = np.broadcast_to(np.arange(n_free)[:, None], cols.shape)
        off = sp.coo_matrix(
            (np.ones(int(inside.sum())), (rows[inside], cols[inside])),
            shape=(n_free, n_free),
        )
        self.matrix = (off - stencil.two_n * sp.identity(n_free)).tocsr()
        self.fixed = ~inside
        self.stencil = stencil

    def coupling(self, u):
        """Contribution of fixed (face) nodes to h²Δ_h at every free node."""
        values = u[self.stencil.neighbors]
        return np.where(self.fixed, values, 0.0).sum(axis=1)


def _active_set_polish(u, phi, f, stencil, spec, history):
    """
    Primal-dual active-set iteration on the free nodes, warm-started from ``u``.

    The multiplier is λ = h²(f − Δ_h u) and the active set {λ + 2n(φ − u) > 0}.
    Returns the number of iterations; ``u`` is updated in place.
    """
    params = spec.params
    op = _ActiveSetOperator(stencil)
    h2, two_n = stencil.h2, stencil.two_n
    free = stencil.free
    uF, phiF, fF = u[free].copy(), phi[free], f[free]
    coupling = op.coupling(u)
    target = h2 * fF - coupling
    lam = target - op.matrix @ uF
    active = (lam + two_n * (phiF - uF)) > 0
    iterations = 0
    for iterations in range(1, params.max_active_set_iterations + 1):
        if spec.grid.periodic and not active.any():
            # torus Laplacian is singular without a pinned node
            active = np.zeros_like(active)
            active[np.argmax(lam + two_n * (phiF - uF))] = True
        inactive = ~active
        new = np.where(active, phiF, uF)
        if inactive.any():
            rhs = target[inactive] - op.matrix[inactive][:, active] @ phiF[active]
            block = -op.matrix[inactive][:, inactive]
            if int(inactive.sum()) <= params.direct_max_unknowns:
                new[inactive] = spsolve(block.tocsc(), -rhs)
            else:
                x, info = cg(
                    block, -rhs, x0=uF[inactive], rtol=0.0, atol=0.1 * spec.tol,
                    maxiter=50 * max(stencil.grid.shape) ** 2,
                )
                if info != 0:
                    logger.warning("CG stopped without reaching its tolerance (info=%d)", info)
                new[inactive] = x
        lam = target - op.matrix @ new
        lam[inactive] = np.maximum(lam[inactive], 0.0)
        updated = (lam + two_n * (phiF - new)) > 0
        uF = new
        history.append({"active_set_iteration": iterations, "active": int(active.sum())})
        if np.array_equal(updated, active):
            break
        active = updated
    u[free] = np.maximum(uF, phiF)
    return iterations


def solve_complementarity(spec: ObstacleProblemSpec) -> ComplementaritySolution:
    """
    Solve min{f − Δ_h u, u − φ} = 0 on the free nodes of ``spec.grid``.

    Dirichlet face nodes are held at the boundary data and carry no obstacle
    constraint. With method ``psor-pdas`` a projected SOR warm start is followed by
    an active-set polish and, if needed, more projected SOR sweeps.
    """
    grid = spec.grid
    params = spec.params
    f = spec.rhs_bound.values.ravel().copy()
    phi = spec.obstacle.values.ravel().copy()
    if grid.periodic and not f.mean() > 0:
        raise InfeasibilityError(
            f"Periodic problem needs a positive mean right-hand side, got {f.mean():.3e}"
        )

    stencil = Stencil(grid)
    u = phi.copy()
    if not grid.periodic:
        faces = ~grid.interior().ravel()
        u[faces] = spec.boundary.values.ravel()[faces]

    history = []
    sweeps, iterations = 0, 0
    if params.method == "psor-pdas":
        warm = max(params.warm_tol * spec.scale, spec.tol)
        sweeps, r = run_psor(
            u, phi, f, stencil, spec.omega, warm,
            min(params.warm_sweeps, spec.max_sweeps), params.check_every,
            history, raise_on_failure=False, progress=params.progress,
        )
        iterations = _active_set_polish(u, phi, f, stencil, spec, history)
        r = residual(u, phi, f, stencil)
        history.append({"sweep": sweeps, "residual": r, "stage": "active-set"})
        if r > spec.tol:
            logger.info("Active-set polish left residual %.3e, continuing with PSOR", r)
    try:
        more, r = run_psor(
            u, phi, f, stencil, spec.omega, spec.tol,
            max(spec.max_sweeps - sweeps, 1), params.check_every,
            history, progress=params.progress,
        )
    except NonConvergenceError as error:
        raise NonConvergenceError(
            str(error), residual=error.residual, sweeps=sweeps + (error.sweeps or 0)
        ) from error
    sweeps += more

    u_grid = u.reshape(grid.shape)
    contact = grid.interior() & (u_grid == phi.reshape(grid.shape))
    if grid.periodic and not contact.any():
        raise InfeasibilityError("Periodic solve converged with an empty contact set")
    logger.info(
        "Solved %s problem on %s: %d sweeps, %d active-set iterations, residual %.3e, contact %d",
        grid.topology, grid.shape, sweeps, iterations, r, int(contact.sum()),
    )
    return ComplementaritySolution(
        u=ScalarField(grid, u_grid),
        contact=CellMask(grid, contact),
        sweeps_used=sweeps,
        residual=r,
        laplacian_residual=r * stencil.two_n / stencil.h2,
        active_set_iterations=iterations,
        log=history,
    )


def ellipticity_slack(phi0):
    return 64.0 * np.finfo(float).eps * max(phi0.norm_inf(), 1.0) / phi0.grid.spacing**2


def check_ellipticity(phi0: ScalarField, lam: float):
    """Require λ ≤ −Δ_h φ₀ ≤ 1/λ on interior nodes (up to roundoff)."""
    if not 0 < lam <= 1:
        raise ConfigError(f"lambda must lie in (0, 1], got {lam}")
    grid = phi0.grid
    neg_lap = -laplacian_apply(phi0).values
    slack = ellipticity_slack(phi0)
    interior = grid.interior()
    bad = interior & ((neg_lap < lam - slack) | (neg_lap > 1.0 / lam + slack))
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EllipticityError(
            f"−Δφ₀ = {neg_lap[node]:.6g} at node {node} (x = {grid.node_coordinate(node)}) "
            f"is outside [{lam}, {1.0 / lam}]",
            node=node,
            value=float(neg_lap[node]),
        )


def _check_background(phi0, boundary):
    grid = phi0.grid
    if grid.periodic:
        raise DomainError("The background obstacle lives on a Dirichlet box, not a torus")
    faces = ~grid.interior()
    if not np.all(phi0.values[faces] < 0):
        raise DomainError("φ₀ must be negative on the box faces")
    if not np.any(phi0.values[grid.interior()] > 0):
        raise DomainError("φ₀ must be positive somewhere inside the box")


def solve_u0(phi0, boundary=None, params=None, lam=1.0):
    """
    Solve the background obstacle problem min{Δu₀, u₀ − φ₀} = 0.

    Args:
        phi0 (ScalarField): Background obstacle on a Dirichlet box.
        boundary (ScalarField, optional): Face data, zero by default.
        params (SolverParams, optional): Solver parameters.
        lam (float): Ellipticity constant λ.
    """
    _check_background(phi0, boundary)
    check_ellipticity(phi0, lam)
    spec = ObstacleProblemSpec.build(phi0, 0.0, boundary, params)
    return solve_complementarity(spec)


def check_psi(psi: ScalarField):
    if not psi.grid.periodic:
        raise ObstacleRangeError("ψ must be given on the unit torus")
    if abs(psi.grid.period - 1.0) > 1e-12:
        raise ObstacleRangeError(f"ψ must live on the unit cell, got period {psi.grid.period}")
    lo, hi = psi.min(), psi.max()
    if lo < -1.0 - 1e-12 or hi > 1e-12:
        raise ObstacleRangeError(f"ψ must take values in [−1, 0], got [{lo}, {hi}]")
    if hi < -1e-12:
        logger.warning("max ψ = %.3e is not 0; the corrector height is shifted accordingly", hi)


def oscillatory_obstacle(phi0, psi, eps, p):
    """φ_ε = φ₀ + ε^p ψ(x/ε), with ψ extended periodically by node index."""
    check_psi(psi)
    ext = extend_periodic(psi, phi0.grid, eps)
    return ScalarField(phi0.grid, phi0.values + eps**p * ext)


def solve_ueps(phi0, psi, eps, p, boundary=None, params=None, lam=1.0):
    """
    Solve the oscillatory obstacle problem with φ_ε = φ₀ + ε^p ψ(x/ε).

    Args:
        phi0 (ScalarField): Background obstacle on a Dirichlet box.
        psi (ScalarField): ψ on the unit torus; its resolution must be a multiple of ε/h.
        eps (float): Oscillation period ε; ε/h must be an integer.
        p (float): Amplitude exponent.
        boundary (ScalarField, optional): Face data, zero by default.
        params (SolverParams, optional): Solver parameters.
        lam (float): Ellipticity constant λ.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    _check_background(phi0, boundary)
    check_ellipticity(phi0, lam)
    phi_eps = oscillatory_obstacle(phi0, psi, eps, p)
    spec = ObstacleProblemSpec.build(phi_eps, 0.0, boundary, params)
    return solve_complementarity(spec)


def height_fields(u0_sol, ueps_sol, phi0):
    """w₀ = u₀ − φ₀ and w_ε = u_ε − φ₀."""
    u0 = u0_sol.u if isinstance(u0_sol, ComplementaritySolution) else u0_sol
    ueps = ueps_sol.u if isinstance(ueps_sol, ComplementaritySolution) else ueps_sol
    phi0.grid.check_same(u0.grid, "u0 and phi0")
    phi0.grid.check_same(ueps.grid, "ueps and phi0")
    return u0 - phi0, ueps - phi0


def verify_complementarity(sol, spec):
    """
    Independent re-check of a solution against its problem.

    Returns a dict with ``residual`` (solution units), ``laplacian_residual``
    (max |min(f − Δ_h u, u − φ)|), ``obstacle_violation`` (max of φ − u) and
    ``supersolution_violation`` (max of Δ_h u − f), all over free nodes.
    """
    u = sol.u if isinstance(sol, ComplementaritySolution) else sol
    spec.grid.check_same(u.grid, "solution and problem")
    grid = spec.grid
    free = grid.interior()
    n2 = 2 * grid.dim
    defect = (spec.rhs_bound.values - laplacian_apply(u).values)[free]
    gap = (u.values - spec.obstacle.values)[free]
    lap_res = np.abs(np.minimum(defect, gap))
    scaled = np.abs(np.minimum(defect * grid.spacing**2 / n2, gap))
    return {
        "residual": float(scaled.max()),
        "laplacian_residual": float(lap_res.max()),
        "obstacle_violation": float(max(0.0, (-gap).max())),
        "supersolution_violation": float(max(0.0, (-defect).max())),
    }
