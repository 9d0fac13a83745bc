import os
import sys
import math
import logging
import argparse
from functools import lru_cache

now_dir = os.getcwd()
sys.path.append(now_dir)

from obshom.lib.errors import ConfigError, InvariantViolation, ObshomError
from obshom.lib.utils import load_field, save_field, write_csv, write_json

logger = logging.getLogger("obshom")


@lru_cache(maxsize=1)
def get_config():
    from obshom.configs.config import Config

    return Config()


def setup_logging(verbosity):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
    )
    logging.getLogger("numba").setLevel(logging.WARNING)


def resolve_out_dir(out_dir):
    return os.environ.get("OBSHOM_OUT") or out_dir


def set_threads(threads):
    count = get_config().resolve_threads(threads)
    import numba

    numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))
    return count


def load_scenario(config_path):
    from obshom.experiments.scenario import ScenarioConfig

    return ScenarioConfig.from_file(config_path)


# Solve
def run_solve_script(config_path: str, out_dir: str, eps: float = None):
    from obshom.solver.complementarity import (
        ObstacleProblemSpec,
        height_fields,
        oscillatory_obstacle,
        solve_u0,
        solve_ueps,
        verify_complementarity,
    )

    scenario = load_scenario(config_path)
    if eps is None:
        if not scenario.eps:
            raise ConfigError("Scenario has no eps values; pass --eps")
        eps = max(scenario.eps)
    grid, k, _ = scenario.grid_for(eps)
    phi0 = scenario.phi0(grid)
    psi = scenario.psi_cell(k)

    u0 = solve_u0(phi0, params=scenario.solver, lam=scenario.lam)
    ueps = solve_ueps(phi0, psi, eps, scenario.p, params=scenario.solver, lam=scenario.lam)
    w0, weps = height_fields(u0, ueps, phi0)

    specs = {
        "u0": (u0, ObstacleProblemSpec.build(phi0, 0.0, params=scenario.solver)),
        "ueps": (
            ueps,
            ObstacleProblemSpec.build(
                oscillatory_obstacle(phi0, psi, eps, scenario.p), 0.0, params=scenario.solver
            ),
        ),
    }
    checks = {name: verify_complementarity(sol, spec) for name, (sol, spec) in specs.items()}

    os.makedirs(out_dir, exist_ok=True)
    for name, field in (
        ("phi0", phi0), ("u0", u0.u), ("ueps", ueps.u), ("w0", w0), ("weps", weps),
        ("contact0", u0.contact), ("contact_eps", ueps.contact),
    ):
        save_field(os.path.join(out_dir, f"{name}.json"), field)
    write_json(
        os.path.join(out_dir, "solve_log.json"),
        {"eps": eps, "h": grid.spacing, "u0": u0.to_log(), "ueps": ueps.to_log(), "verify": checks},
    )
    for name, check in checks.items():
        if check["residual"] > 2 * specs[name][1].tol:
            raise InvariantViolation(f"{name} residual {check['residual']:.3e} exceeds tol", report=check)
    return f"Solved eps={eps} on {grid.shape} nodes; fields written to {out_dir}"


# Corrector
def run_corrector_script(config_path: str, out_dir: str, mu: float = None):
    from obshom.corrector.cell_problem import energy_check, predicted_rate, solve_corrector

    scenario = load_scenario(config_path)
    mu = mu if mu is not None else float(scenario.corrector.get("mu", scenario.mu_list()[0]))
    psi = scenario.psi_cell(scenario.cell_resolution())
    record = solve_corrector(psi, mu, scenario.solver)
    report = energy_check(record, psi=psi, strict=False)

    os.makedirs(out_dir, exist_ok=True)
    save_field(os.path.join(out_dir, "chi.json"), record.chi)
    write_json(
        os.path.join(out_dir, "corrector.json"),
        {
            **record.row(),
            "residual": record.residual,
            "energy_check": report,
            "predicted": predicted_rate(scenario.psi.family, scenario.dim, **scenario.psi.params()),
        },
    )
    if not report["ok"]:
        raise InvariantViolation("Corrector energy or bound check failed", report=report)
    return f"E({mu:g}) = {record.height:.6e}, energy ratio {report['ratio']:.4f}"


# Sweep
def run_sweep_emu_script(config_path: str, out_dir: str, threads: int):
    from obshom.corrector.cell_problem import decay_condition_holds, emu_sweep, sweep_csv
    from obshom.lib.utils import atomic_write

    scenario = load_scenario(config_path)
    psi = scenario.psi_cell(scenario.cell_resolution())
    fit = emu_sweep(
        psi,
        scenario.mu_list(),
        params=scenario.solver,
        threads=threads,
        family=scenario.psi.family,
        family_params=scenario.psi.params(),
        strict=False,
    )
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "sweep.csv"), sweep_csv(fit))
    write_json(
        os.path.join(out_dir, "fit.json"),
        {**fit.summary(), "decay_condition": decay_condition_holds(fit.slope, scenario.p)},
    )
    if not (fit.monotone and fit.energy_ok):
        raise InvariantViolation("Corrector sweep violated monotonicity or the energy bound")
    return (
        f"Slope {fit.slope:.4f}, log-corrected slope {fit.log_corrected_slope:.4f} "
        f"over mu in [{fit.window[0]:g}, {fit.window[1]:g}]"
    )


# Converge
def run_converge_script(config_path: str, out_dir: str, threads: int):
    from obshom.experiments.convergence import REPORT_HEADER, run_convergence

    scenario = load_scenario(config_path)
    report = run_convergence(scenario, threads=threads)

    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "report.csv"), REPORT_HEADER, report.csv_rows())
    write_json(os.path.join(out_dir, "summary.json"), report.summary())
    for index, row in enumerate(report.rows):
        if "probes" in row:
            write_json(os.path.join(out_dir, f"probes_{index}.json"), row["probes"])
    if report.violated:
        raise InvariantViolation("At least one eps row violated a verified bound")
    constants = ", ".join(
        f"{k}={v:.3f}" if isinstance(v, float) and math.isfinite(v) else f"{k}={v}"
        for k, v in report.constants.items()
    )
    return f"Convergence run finished ({len(report.rows)} rows): {constants}"


# Gradcheck
def run_gradcheck_script(config_path: str, out_dir: str):
    from obshom.experiments.checks import gradient_check, sandwich_check

    scenario = load_scenario(config_path)
    verify = scenario.verify
    try:
        w0_path, weps_path, r_eps = verify["w0"], verify["weps"], float(verify["r_eps"])
    except KeyError as error:
        raise ConfigError(f"gradcheck needs verify.{error.args[0]} in the scenario") from error
    w0 = load_field(scenario.resolve_path(w0_path))
    weps = load_field(scenario.resolve_path(weps_path))

    sandwich = sandwich_check(w0, weps, r_eps, strict=False)
    gradient = gradient_check(w0, weps, r_eps, scenario.gradient_stride)
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "gradcheck.json"), {"sandwich": sandwich, "gradient": gradient})
    if not sandwich["ok"]:
        raise InvariantViolation(
            f"Sandwich violated at {sandwich['violations']} nodes", report=sandwich
        )
    return f"Gradient RMS ratio {gradient['ratio']:.4f}; sandwich margins {sandwich['lo']:.3e} / {sandwich['hi']:.3e}"


# Parse arguments
def parse_arguments(argv=None):
    parser = argparse.ArgumentParser(
        description="Oscillatory obstacle problems: solves, correctors and convergence checks."
    )
    subparsers = parser.add_subparsers(
        title="subcommands", dest="mode", help="Choose a mode"
    )
    subparsers.required = True

    def common(sub):
        sub.add_argument(
            "--config",
            type=str,
            help="Path to the JSON scenario file.",
            required=True,
        )
        sub.add_argument(
            "--out_dir",
            type=str,
            help="Output directory (OBSHOM_OUT overrides it).",
            default=os.path.join(now_dir, "outputs"),
        )
        sub.add_argument(
            "--threads",
            type=int,
            help="Worker count, 0 for every core.",
            default=0,
        )
        sub.add_argument(
            "--verbosity",
            type=int,
            help="0 warnings, 1 info, 2 debug.",
            choices=[0, 1, 2],
            default=1,
        )
        return sub

    solve_parser = common(subparsers.add_parser("solve", help="Solve u0 and ueps for one eps"))
    solve_parser.add_argument(
        "--eps",
        type=float,
        help="Period eps; the largest eps of the scenario by default.",
        default=None,
    )
    corrector_parser = common(subparsers.add_parser("corrector", help="Solve one cell problem"))
    corrector_parser.add_argument(
        "--mu",
        type=float,
        help="Right-hand side bound mu; taken from the scenario by default.",
        default=None,
    )
    common(subparsers.add_parser("sweep-emu", help="Sweep mu and fit the decay of E(mu)"))
    common(subparsers.add_parser("converge", help="Run the eps convergence experiment"))
    common(subparsers.add_parser("gradcheck", help="Verify stored height fields"))

    return parser.parse_args(argv)


def main(argv=None):
    try:
        args = parse_arguments(argv)
    except SystemExit as exit_:
        return 2 if exit_.code else 0

    setup_logging(args.verbosity)
    out_dir = resolve_out_dir(args.out_dir)

    try:
        if not os.path.isfile(args.config):
            raise ConfigError(f"Config file not found: {args.config}")
        threads = set_threads(args.threads)
        if args.mode == "solve":
            message = run_solve_script(args.config, out_dir, eps=args.eps)
        elif args.mode == "corrector":
            message = run_corrector_script(args.config, out_dir, mu=args.mu)
        elif args.mode == "sweep-emu":
            message = run_sweep_emu_script(args.config, out_dir, threads)
        elif args.mode == "converge":
            message = run_converge_script(args.config, out_dir, threads)
        elif args.mode == "gradcheck":
            message = run_gradcheck_script(args.config, out_dir)
    except ConfigError as error:
        print(f"Configuration error: {error}", file=sys.stderr)
        return 2
    except InvariantViolation as error:
        print(f"Invariant violated: {error}", file=sys.stderr)
        return 1
    except ObshomError as error:
        print(f"An error occurred during execution: {error}", file=sys.stderr)
        import traceback

        traceback.print_exc()
        return 1

    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
