import os
import json
import math
import hashlib
import logging
import dataclasses
from typing import List, Optional

from obshom.configs.config import Config
from obshom.lib.errors import ConfigError, EllipticityError, InvalidGridError
from obshom.lib.grid import Grid
from obshom.lib.obstacles import PSI_FAMILIES, check_paraboloid_window, paraboloid, psi_cell
from obshom.lib.utils import HParams
from obshom.solver.complementarity import SolverParams

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class ObstacleConfig:
    family: str = "paraboloid"
    c: float = 0.25
    b: float = 0.5

    def __post_init__(self):
        if self.family != "paraboloid":
            raise ConfigError(f"Unknown obstacle family '{self.family}'")


@dataclasses.dataclass
class PsiConfig:
    family: str = "laminar"
    s: float = 1.0
    value: float = 0.0

    def __post_init__(self):
        if self.family not in PSI_FAMILIES:
            raise ConfigError(f"Unknown psi family '{self.family}', expected one of {PSI_FAMILIES}")

    def params(self):
        if self.family == "cusp":
            return {"s": self.s}
        if self.family == "constant":
            return {"value": self.value}
        return {}


@dataclasses.dataclass
class ProbeConfig:
    """Probe radii are multiples of 𝔯(ε)."""

    radii: List[float] = dataclasses.field(default_factory=lambda: [1.0, 2.0, 4.0])
    max_points: Optional[int] = 1000
    stride: Optional[int] = None


@dataclasses.dataclass
class ScenarioConfig:
    name: str
    dim: int
    lower: List[float]
    upper: List[float]
    obstacle: ObstacleConfig
    psi: PsiConfig
    p: float
    lam: float
    eps: List[float]
    nodes_per_eps: int = 32
    max_nodes_per_axis: int = 1025
    anchor: Optional[List[float]] = None
    anchor_shift: Optional[float] = None
    probe: ProbeConfig = dataclasses.field(default_factory=ProbeConfig)
    gradient_stride: int = 1
    corrector: dict = dataclasses.field(default_factory=dict)
    solver: SolverParams = dataclasses.field(default_factory=SolverParams)
    length_scale_table: Optional[str] = None
    verify: dict = dataclasses.field(default_factory=dict)
    seed: int = 0
    raw_text: str = ""
    source_path: Optional[str] = None

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except FileNotFoundError as error:
            raise ConfigError(f"Config file not found: {path}") from error
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as error:
            raise ConfigError(f"Invalid JSON in {path}: {error}") from error
        return cls.from_dict(data, raw_text=raw.decode("utf-8"), source_path=path)

    @classmethod
    def from_dict(cls, data, raw_text="", source_path=None):
        if not isinstance(data, dict):
            raise ConfigError("A scenario must be a JSON object")
        defaults = Config().experiment
        hp = HParams(**data)
        try:
            dim = int(hp["dim"])
            domain = hp["domain"]
            lower = _per_axis(domain["lower"], dim)
            upper = _per_axis(domain["upper"], dim)
            obstacle = ObstacleConfig(**hp.get("obstacle", HParams()).to_dict())
            psi = PsiConfig(**hp.get("psi", HParams()).to_dict())
            probe = ProbeConfig(
                **{"radii": defaults["probe_radii"], "max_points": defaults["probe_points"],
                   **hp.get("probe", HParams()).to_dict()}
            )
            config = cls(
                name=str(hp.get("name", os.path.splitext(os.path.basename(source_path or "scenario"))[0])),
                dim=dim,
                lower=lower,
                upper=upper,
                obstacle=obstacle,
                psi=psi,
                p=float(hp["p"]),
                lam=float(hp.get("lambda", 1.0)),
                eps=[float(e) for e in hp.get("eps", [])],
                nodes_per_eps=int(hp.get("nodes_per_eps", defaults["nodes_per_eps"])),
                max_nodes_per_axis=int(hp.get("max_nodes_per_axis", defaults["max_nodes_per_axis"])),
                anchor=hp.get("anchor"),
                anchor_shift=hp.get("anchor_shift"),
                probe=probe,
                gradient_stride=int(hp.get("gradient_stride", defaults["gradient_stride"])),
                corrector=hp.get("corrector", HParams()).to_dict(),
                solver=SolverParams.from_dict(hp.get("solver", HParams()).to_dict()),
                length_scale_table=hp.get("length_scale_table"),
                verify=hp.get("verify", HParams()).to_dict(),
                seed=int(hp.get("seed", defaults["seed"])),
                raw_text=raw_text,
                source_path=source_path,
            )
        except KeyError as error:
            raise ConfigError(f"Scenario is missing the key {error}") from error
        except (TypeError, ValueError) as error:
            if isinstance(error, ConfigError):
                raise
            raise ConfigError(f"Invalid scenario: {error}") from error
        config.validate()
        return config

    def validate(self):
        if self.dim not in (1, 2, 3):
            raise ConfigError(f"dim must be 1, 2 or 3, got {self.dim}")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ConfigError("Domain upper corner must exceed the lower corner on every axis")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        try:
            check_paraboloid_window(self.dim, self.obstacle.b, self.lam)
        except EllipticityError as error:
            raise ConfigError(str(error)) from error
        if self.obstacle.c <= 0:
            raise ConfigError("Paraboloid height c must be positive")
        nearest_face = min(min(abs(lo), abs(hi)) for lo, hi in zip(self.lower, self.upper))
        if self.obstacle.c - self.obstacle.b * nearest_face**2 >= 0:
            raise ConfigError("Paraboloid must be negative on the box faces")
        if any(not 0 < e <= 1 for e in self.eps):
            raise ConfigError("Every eps must lie in (0, 1]")
        for e in self.eps:
            if abs(math.log2(e) - round(math.log2(e))) > 1e-12:
                logger.warning("eps = %s is not dyadic", e)
        if self.nodes_per_eps < 1 or self.max_nodes_per_axis < 3:
            raise ConfigError("nodes_per_eps and max_nodes_per_axis must be positive")
        if self.anchor is not None and len(self.anchor) != self.dim:
            raise ConfigError(f"anchor must have {self.dim} entries")
        if any(r <= 0 for r in self.probe.radii):
            raise ConfigError("Probe radii must be positive multiples of r(eps)")
        for e in self.eps:
            self.grid_for(e)

    @property
    def config_sha256(self):
        return hashlib.sha256(self.raw_text.encode("utf-8")).hexdigest()

    def resolve_path(self, path):
        if path is None or os.path.isabs(path) or self.source_path is None:
            return path
        return os.path.join(os.path.dirname(os.path.abspath(self.source_path)), path)

    def grid_for(self, eps):
        """
        Dirichlet grid for one ε: h = ε/k with k = nodes_per_eps, halved until the
        per-axis node count fits ``max_nodes_per_axis``.

        Returns:
            tuple: ``(Grid, k, capped)``.
        """
        k = self.nodes_per_eps
        capped = False
        while True:
            h = eps / k
            counts = [(hi - lo) / h + 1 for lo, hi in zip(self.lower, self.upper)]
            if max(counts) <= self.max_nodes_per_axis + 1e-9 or k == 1:
                break
            if k % 2:
                raise ConfigError(f"Cannot cap the grid for eps={eps}: eps/h = {k} is odd")
            k //= 2
            capped = True
        if capped:
            logger.info("eps=%s: resolution capped to eps/h = %d (h = %.3e)", eps, k, eps / k)
        if k < Config().experiment["min_nodes_per_eps"]:
            logger.warning("eps=%s: only %d nodes per period, the cell is under-resolved", eps, k)
        try:
            grid = Grid.box(self.lower, self.upper, eps / k, self.dim)
        except InvalidGridError as error:
            raise ConfigError(f"eps={eps}: {error}") from error
        offsets = [lo / grid.spacing for lo in self.lower]
        if any(abs(o - round(o)) > 1e-9 * max(1.0, abs(o)) for o in offsets):
            raise ConfigError(f"eps={eps}: the box corner does not lie on the grid lattice")
        if max(grid.shape) > self.max_nodes_per_axis:
            raise ConfigError(
                f"eps={eps}: even eps/h = 1 exceeds {self.max_nodes_per_axis} nodes per axis"
            )
        return grid, k, capped

    def phi0(self, grid):
        return paraboloid(grid, self.obstacle.c, self.obstacle.b)

    def psi_cell(self, nodes):
        return psi_cell(self.psi.family, self.dim, nodes, **self.psi.params())

    def cell_resolution(self):
        value = self.corrector.get("cell_resolution")
        return int(value) if value else Config().cell_resolution(self.dim)

    def mu_list(self):
        return [float(m) for m in self.corrector.get("mu_list", Config().corrector["mu_list"])]


def _per_axis(value, dim):
    if isinstance(value, (int, float)):
        return [float(value)] * dim
    if len(value) != dim:
        raise ConfigError(f"Expected {dim} coordinates, got {value}")
    return [float(v) for v in value]
