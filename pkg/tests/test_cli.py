from __future__ import annotations

import json
import math
import shutil
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from ldq.cli import EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION, main

DATA = Path(str(resources.files("ldq") / "data"))
GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, command, config, *extra):
    out = tmp_path / command
    code = main([command, "--config", str(config), "--out", str(out), *extra])
    return code, out


@pytest.mark.parametrize("command,name", [("fluid", "fluid_burst"), ("rate", "rate_burst"),
                                          ("rate", "rate_fluid_point")])
def test_golden_files(tmp_path, command, name):
    code, out = run(tmp_path, command, DATA / f"{name}.json")
    assert code == EXIT_OK
    for ref in sorted((GOLDEN / name).iterdir()):
        assert (out / ref.name).read_bytes() == ref.read_bytes(), ref.name


def test_rate_burst_closed_form(tmp_path):
    code, out = run(tmp_path, "rate", DATA / "rate_burst.json")
    value = json.loads((out / "rate.json").read_text())["value"]
    poisson = lambda x: x * math.log(x) - x + 1  # noqa: E731
    assert value == pytest.approx(poisson(2.0) + 3 * poisson(0.5), abs=1e-12)


def test_rate_at_fluid_point_is_zero(tmp_path):
    code, out = run(tmp_path, "rate", DATA / "rate_fluid_point.json")
    assert code == EXIT_OK
    assert json.loads((out / "rate.json").read_text())["value"] == 0.0


def test_fluid_output_first_segment(tmp_path):
    # station 1 busy at rate 1 and station 2 passing its inflow 0.6 straight through
    code, out = run(tmp_path, "fluid", DATA / "fluid_burst.json")
    lines = (out / "flow.csv").read_text().splitlines()
    assert lines[0].startswith("# seed=0 config_sha256=")
    assert lines[1] == "t,A1,A2,D1,D2,Q1,Q2"
    row = [float(v) for v in lines[3].split(",")]
    assert row[0] == pytest.approx(0.1)
    assert row[1:5] == pytest.approx([0.215, 0.06, 0.1, 0.06], abs=1e-12)


@pytest.mark.parametrize("command,name", [("fluid", "fluid_burst"), ("rate", "rate_mm1_queue"),
                                          ("approx", "approx_twostation"),
                                          ("counterexample", "counterexample"),
                                          ("simulate", "simulate_feedback")])
def test_manifest_replay_is_bit_exact(tmp_path, capsys, command, name):
    code, out = run(tmp_path, command, DATA / f"{name}.json")
    assert code == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == command and "versions" in man and man["outputs"]
    capsys.readouterr()
    code = main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "again")])
    result = json.loads(capsys.readouterr().out)
    assert code == EXIT_OK
    assert result["identical"] and result["config_sha256_match"]
    for o in man["outputs"]:
        assert (tmp_path / "again" / o["name"]).read_bytes() == (out / o["name"]).read_bytes()


def test_seed_is_recorded_everywhere(tmp_path):
    code, out = run(tmp_path, "simulate", DATA / "simulate_feedback.json", "--seed", "123")
    assert code == EXIT_OK
    assert (out / "paths.csv").read_text().startswith("# seed=123 ")
    assert json.loads((out / "summary.json").read_text())["seed"] == 123
    assert json.loads((out / "manifest.json").read_text())["seed"] == 123


def test_missing_config_leaves_no_output(tmp_path, capsys):
    out = tmp_path / "never"
    code = main(["fluid", "--config", str(tmp_path / "absent.json"), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert not out.exists()
    assert "error" in json.loads(capsys.readouterr().err)


def test_missing_key_is_config_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 1}))
    code, out = run(tmp_path, "rate", cfg)
    assert code == EXIT_CONFIG
    assert not out.exists()


def test_invalid_network_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"network": {"kind": "fluid", "lam": [1, 0], "mu": [1, 1],
                                           "routing": [[0, 1.0], [1.0, 0]], "horizon": 1}}))
    code, out = run(tmp_path, "fluid", cfg)
    assert code == EXIT_VALIDATION
    assert not out.exists()
    err = json.loads(capsys.readouterr().err)
    assert err["invariant"]


def test_tampered_manifest_output_is_detected(tmp_path, capsys):
    code, out = run(tmp_path, "rate", DATA / "rate_burst.json")
    man = json.loads((out / "manifest.json").read_text())
    man["outputs"][0]["sha256"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(man))
    capsys.readouterr()
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r")]) == EXIT_VALIDATION


def test_config_file_references_resolve_relative_to_config(tmp_path):
    for name in ("rate_burst.json", "burst_model.json", "burst_network.json"):
        shutil.copy(DATA / name, tmp_path / name)
    code, out = run(tmp_path, "rate", tmp_path / "rate_burst.json")
    assert code == EXIT_OK
    assert (out / "rate.json").read_bytes() == (GOLDEN / "rate_burst" / "rate.json").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ldq", "rate", "--config", str(DATA / "rate_mm1_queue.json"),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    value = json.loads((tmp_path / "o" / "rate.json").read_text())["value"]
    # constant queue growth 1/2 for M/M/1(1, 2): the optimal tilt has e^theta = (1/2 + sqrt(33/4)) / 2
    z = (0.5 + math.sqrt(0.25 + 8)) / 2
    assert value == pytest.approx(0.5 * math.log(z) - (z - 1) - 2 * (1 / z - 1), abs=1e-8)
