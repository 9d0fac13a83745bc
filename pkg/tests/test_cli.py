import json
import os

import numpy as np
import pytest

import core
from obshom.lib.utils import load_field, save_field


def _write_scenario(path, **overrides):
    data = {
        "name": "cli",
        "dim": 1,
        "domain": {"lower": -1.0, "upper": 1.0},
        "obstacle": {"c": 0.25, "b": 0.5},
        "psi": {"family": "laminar"},
        "p": 1.0,
        "lambda": 1.0,
        "eps": [0.125],
        "nodes_per_eps": 16,
        "corrector": {"cell_resolution": 128, "mu": 0.01, "mu_list": [0.1, 0.03, 0.01, 0.003, 0.001]},
    }
    data.update(overrides)
    path.write_text(json.dumps(data))
    return str(path)


def test_missing_config_exits_with_two(tmp_path):
    out_dir = tmp_path / "out"
    code = core.main(["converge", "--config", str(tmp_path / "nope.json"), "--out_dir", str(out_dir)])
    assert code == 2
    assert not out_dir.exists()


def test_invalid_json_exits_with_two(tmp_path):
    config = tmp_path / "broken.json"
    config.write_text("{not json")
    assert core.main(["solve", "--config", str(config), "--out_dir", str(tmp_path)]) == 2


def test_usage_errors_exit_with_two():
    assert core.main(["converge"]) == 2
    assert core.main(["unknown-mode"]) == 2


def test_corrector_command(tmp_path):
    config = _write_scenario(tmp_path / "s.json")
    out_dir = tmp_path / "out"
    assert core.main(["corrector", "--config", config, "--out_dir", str(out_dir), "--threads", "1"]) == 0
    chi = load_field(str(out_dir / "chi.json"))
    assert chi.grid.shape == (128,)
    report = json.loads((out_dir / "corrector.json").read_text())
    assert report["mu"] == 0.01
    assert report["energy_check"]["ok"]


def test_out_dir_from_environment(tmp_path, monkeypatch):
    config = _write_scenario(tmp_path / "s.json")
    target = tmp_path / "env_out"
    monkeypatch.setenv("OBSHOM_OUT", str(target))
    assert core.main(["corrector", "--config", config, "--out_dir", str(tmp_path / "ignored"), "--mu", "0.1"]) == 0
    assert (target / "chi.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_sweep_command(tmp_path):
    config = _write_scenario(tmp_path / "s.json")
    out_dir = tmp_path / "out"
    assert core.main(["sweep-emu", "--config", config, "--out_dir", str(out_dir), "--threads", "1"]) == 0
    lines = (out_dir / "sweep.csv").read_text().splitlines()
    assert lines[0] == "mu,E,energy,active_fraction,sweeps"
    assert len(lines) == 6
    fit = json.loads((out_dir / "fit.json").read_text())
    assert 0.9 <= fit["slope"] <= 1.1
    assert fit["decay_condition"] is True


def test_solve_then_gradcheck(tmp_path):
    out_dir = tmp_path / "out"
    config = _write_scenario(
        tmp_path / "s.json",
        verify={"w0": "out/w0.json", "weps": "out/weps.json", "r_eps": 0.05},
    )
    assert core.main(["solve", "--config", config, "--out_dir", str(out_dir)]) == 0
    for name in ("phi0", "u0", "ueps", "w0", "weps", "contact0", "contact_eps"):
        assert (out_dir / f"{name}.json").exists()
    w0 = load_field(str(out_dir / "w0.json"))
    assert w0.grid.shape == (257,)
    log = json.loads((out_dir / "solve_log.json").read_text())
    assert log["eps"] == 0.125

    check_dir = tmp_path / "check"
    assert core.main(["gradcheck", "--config", config, "--out_dir", str(check_dir)]) == 0
    report = json.loads((check_dir / "gradcheck.json").read_text())
    assert report["sandwich"]["ok"]
    assert np.isfinite(report["gradient"]["ratio"])

    save_field(str(out_dir / "weps.json"), w0 - 1.0)
    assert core.main(["gradcheck", "--config", config, "--out_dir", str(check_dir)]) == 1
    report = json.loads((check_dir / "gradcheck.json").read_text())
    assert not report["sandwich"]["ok"]


def test_gradcheck_without_verify_block(tmp_path):
    config = _write_scenario(tmp_path / "s.json")
    assert core.main(["gradcheck", "--config", config, "--out_dir", str(tmp_path / "out")]) == 2


@pytest.mark.parametrize("verbosity", ["0", "2"])
def test_verbosity_flag(tmp_path, verbosity):
    config = _write_scenario(tmp_path / "s.json")
    out_dir = tmp_path / "out"
    args = ["corrector", "--config", config, "--out_dir", str(out_dir), "--verbosity", verbosity]
    assert core.main(args) == 0
    assert os.path.exists(out_dir / "corrector.json")
