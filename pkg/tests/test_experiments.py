import os
import dataclasses

import numpy as np
import pytest

from obshom.experiments.checks import (
    ball_average,
    bulk_nondegeneracy_check,
    corrected_obstacle_check,
    gradient_check,
    sandwich_check,
)
from obshom.experiments.convergence import REPORT_HEADER, run_convergence
from obshom.experiments.scenario import ScenarioConfig
from obshom.geometry.probes import slack_constant
from obshom.geometry.sets import bulk_contact_set, bulk_free_boundary
from obshom.lib.errors import (
    ConfigError,
    DegenerateSetError,
    DomainError,
    InvariantViolation,
    ResolutionError,
)
from obshom.lib.grid import CellMask, Grid, sample
from obshom.lib.obstacles import paraboloid, psi_cell
from obshom.lib.utils import write_csv
from obshom.solver.complementarity import height_fields, solve_u0, solve_ueps


SCENARIOS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "scenarios")


def _scenario(**overrides):
    data = {
        "name": "line",
        "dim": 1,
        "domain": {"lower": -1.0, "upper": 1.0},
        "obstacle": {"family": "paraboloid", "c": 0.25, "b": 0.5},
        "psi": {"family": "laminar"},
        "p": 1.0,
        "lambda": 1.0,
        "eps": [0.125, 0.0625, 0.03125],
        "nodes_per_eps": 32,
    }
    data.update(overrides)
    return data


def _solve_row(psi, eps=2.0**-3, h=2.0**-8, p=1.0):
    grid = Grid.box(-1.0, 1.0, h, dim=1)
    phi0 = paraboloid(grid, 0.25, 0.5)
    u0 = solve_u0(phi0)
    ueps = solve_ueps(phi0, psi, eps, p)
    w0, weps = height_fields(u0, ueps, phi0)
    return grid, u0, ueps, w0, weps


@pytest.fixture(scope="module")
def flat_row():
    return _solve_row(psi_cell("constant", 1, 32, value=-1.0))


@pytest.fixture(scope="module")
def zero_row():
    return _solve_row(psi_cell("constant", 1, 32, value=0.0))


def test_sandwich_for_zero_psi(zero_row):
    grid, _, _, w0, weps = zero_row
    report = sandwich_check(w0, weps, 0.0)
    assert report["ok"]
    assert report["lo"] == pytest.approx(report["slack"])
    assert report["hi"] == pytest.approx(report["slack"])
    assert report["observed_gap"] == 0.0


def test_sandwich_is_tight_for_flat_psi(flat_row):
    eps = 2.0**-3
    _, _, ueps, w0, weps = flat_row
    assert ueps.contact.any()
    report = sandwich_check(w0, weps, np.sqrt(eps), eps=eps, p=1.0)
    assert report["ok"]
    assert report["lo"] == pytest.approx(report["slack"], abs=1e-12)
    assert report["trivial_gap"] == eps
    assert report["observed_gap"] <= eps + 1e-12


def test_sandwich_violation_names_the_node(zero_row):
    grid, _, _, w0, _ = zero_row
    raised = w0 + 1.0
    with pytest.raises(InvariantViolation) as info:
        sandwich_check(w0, raised, 0.0)
    assert info.value.report["violations"] == grid.size
    assert "upper bound" in str(info.value)
    report = sandwich_check(w0, raised, 0.0, strict=False)
    assert not report["ok"]
    assert report["hi"] == pytest.approx(report["slack"] - 1.0)


def test_corrected_obstacle_bound_for_flat_psi(flat_row):
    grid, _, _, w0, weps = flat_row
    psi = psi_cell("constant", 1, 32, value=-1.0)
    report = corrected_obstacle_check(weps, psi, 2.0**-3, 1.0, 1.0, w0=w0)
    assert report["ok"]
    assert report["E"] == 1.0
    assert report["margin"] >= 0.0
    assert report["slack"] == pytest.approx(slack_constant(w0) * grid.spacing**2)


def test_corrected_obstacle_slack_needs_the_background(flat_row):
    _, _, _, _, weps = flat_row
    psi = psi_cell("constant", 1, 32, value=-1.0)
    with pytest.raises(DomainError):
        corrected_obstacle_check(weps, psi, 2.0**-3, 1.0, 1.0)


def test_corrected_obstacle_bound_for_laminar_psi():
    eps, psi = 2.0**-4, psi_cell("laminar", 1, 32)
    _, _, _, w0, weps = _solve_row(psi, eps=eps, h=2.0**-9)
    report = corrected_obstacle_check(weps, psi, eps, 1.0, 1.0, w0=w0)
    assert report["ok"]
    assert report["mu"] == pytest.approx(eps)
    r_eps = np.sqrt(eps * report["E"])
    assert sandwich_check(w0, weps, r_eps)["ok"]


def test_ball_average_of_constant():
    torus = Grid.torus(32, 2)
    avg = ball_average(np.full(torus.shape, 3.0), torus, 0.1)
    assert np.allclose(avg, 3.0, atol=1e-12)
    box = Grid.box([0.0, 0.0], [1.0, 1.0], 1 / 32)
    avg = ball_average(np.full(box.shape, 3.0), box, 0.1)
    inside = box.distance_to_faces() >= 0.1
    assert np.allclose(avg[inside], 3.0, atol=1e-10)


def test_gradient_check(zero_row):
    grid, u0, ueps, w0, weps = zero_row
    report = gradient_check(w0, weps, 0.1, contacts=(u0.contact, ueps.contact))
    assert report["ratio"] == 0.0
    assert report["centers"] > 0
    assert report["pointwise_ratio"] == 0.0
    shifted = gradient_check(w0, w0 + 0.25, 0.1)
    assert shifted["ratio"] <= 1e-8
    tilted = w0 + sample(lambda x: 0.01 * x[0], grid)
    assert gradient_check(w0, tilted, 0.1)["max_rms"] == pytest.approx(0.01, rel=1e-6)
    with pytest.raises(ResolutionError):
        gradient_check(w0, weps, 2 * grid.spacing)


def test_bulk_nondegeneracy_for_zero_psi(zero_row):
    grid, u0, _, w0, _ = zero_row
    r_eps = 0.05
    bulk, _ = bulk_contact_set(u0.contact, r_eps, 1.0)
    report = bulk_nondegeneracy_check(w0, bulk_free_boundary(bulk), r_eps, 1.0, [0.05, 0.1])
    assert report["ok"]
    assert report["const"] == pytest.approx(1 / 8)
    assert report["count"] == 4
    with pytest.raises(DegenerateSetError):
        bulk_nondegeneracy_check(w0, CellMask.empty(grid), r_eps, 1.0, [0.05])


def test_scenario_parsing():
    config = ScenarioConfig.from_dict(_scenario(probe={"radii": [1, 3]}, solver={"tol": 1e-9}))
    assert config.lower == [-1.0] and config.upper == [1.0]
    assert config.probe.radii == [1, 3]
    assert config.solver.tol == 1e-9
    assert config.solver.method == "psor-pdas"
    assert config.cell_resolution() == 1024
    grid, k, capped = config.grid_for(0.125)
    assert (k, capped, grid.shape) == (32, False, (513,))


def test_scenario_caps_the_grid():
    config = ScenarioConfig.from_dict(_scenario(max_nodes_per_axis=129, eps=[0.125]))
    grid, k, capped = config.grid_for(0.125)
    assert capped and k == 8 and grid.shape == (129,)


@pytest.mark.parametrize(
    "overrides",
    [
        {"p": None},
        {"lambda": 1.5},
        {"psi": {"family": "spiral"}},
        {"obstacle": {"c": 0.25, "b": 0.1}},
        {"obstacle": {"c": 1.0, "b": 0.5}},
        {"eps": [0.1 * 3]},
        {"solver": {"omega": 2.5}},
        {"solver": {"sweeps": 3}},
    ],
)
def test_scenario_rejects_bad_values(overrides):
    data = _scenario(**overrides)
    if data.get("p", 0) is None:
        del data["p"]
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)


def test_convergence_run_on_laminar_line(tmp_path):
    config = ScenarioConfig.from_dict(
        _scenario(corrector={"cell_resolution": 256}, max_nodes_per_axis=2049)
    )
    report = run_convergence(config)
    assert [row["eps"] for row in report.rows] == [0.125, 0.0625, 0.03125]
    r_values = [row["r_eps"] for row in report.rows]
    assert r_values[0] > r_values[1] > r_values[2] > 0
    assert not report.violated
    for row in report.rows:
        assert row["status"] == "ok"
        assert row["probe_shortfall"]["bulk"] == row["probe_counts"]["bulk"] < 1000
        assert row["sandwich_lo"] >= 0.0
        assert row["sandwich_hi"] >= 0.0
        assert row["corrector_margin"] >= 0.0
        assert row["cell_resolution"] == 32
        assert np.isfinite(row["dH_contact"]) and np.isfinite(row["dH_fb"])
    assert report.constants["C_Lambda"] is not None
    assert report.regularity["analytic_contact_radius"] == pytest.approx(1 - 1 / np.sqrt(2))
    assert abs(report.regularity["discrete_contact_radius"] - (1 - 1 / np.sqrt(2))) <= 2 * 2.0**-10
    assert report.meta["length_scale_source"] == "direct"
    assert report.summary()["decay_condition"] == {"exponent": 1.0, "holds": True}

    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(str(first), REPORT_HEADER, report.csv_rows())
    write_csv(str(second), REPORT_HEADER, run_convergence(config).csv_rows())
    assert first.read_bytes() == second.read_bytes()


def test_convergence_run_with_zero_psi():
    config = ScenarioConfig.from_dict(
        _scenario(psi={"family": "constant", "value": 0.0}, eps=[0.125, 0.0625])
    )
    report = run_convergence(config)
    assert not report.violated
    for row in report.rows:
        assert row["status"] == "ok"
        assert row["r_eps"] == 0.0
        assert row["dH_contact"] <= 2 * row["h"]
        assert np.isnan(row["grad_rms_ratio"])
        assert row["gradient"]["skipped"]
    assert report.constants["C_Lambda"] is None


def test_canonical_line_scenario_has_no_violations():
    config = ScenarioConfig.from_file(os.path.join(SCENARIOS, "1d_sine.json"))
    config = dataclasses.replace(config, eps=[0.125, 0.0625, 0.03125])
    report = run_convergence(config)
    assert not report.violated
    assert [row["status"] for row in report.rows] == ["ok"] * 3
    assert not any(row["nondeg_margin"] < 0 for row in report.rows)


def test_peak_plane_scenario_constants_stay_bounded():
    config = ScenarioConfig.from_file(os.path.join(SCENARIOS, "2d_peak.json"))
    config = dataclasses.replace(config, eps=[0.125, 0.0625, 0.03125], max_nodes_per_axis=513)
    report = run_convergence(config)
    assert not report.violated
    assert [row["status"] for row in report.rows] == ["ok"] * 3
    assert [row["cell_resolution"] for row in report.rows] == [32, 16, 8]
    assert report.trends["C_Lambda"]["bounded"]
    assert report.trends["C_Gamma"]["bounded"]
    assert report.anchor_check["max_change"] < 2
    assert report.meta["decay_condition"] == {"exponent": 1.0, "holds": True}
