import json
import subprocess
import sys

import pytest

from mfbellman.cli import main, run

BASE = {
    "version": 1,
    "preset": {"name": "zero"},
    "grid": {"T": 1.0, "steps": 4},
    "particles": {"M": 20, "K": 10, "K_out": 5},
    "family": {"u1": {"type": "piecewise", "values": [-1, 1], "breaks": [0.5]}},
    "initial": {"x": 0.2, "zeta": {"normal": {"n": 20}}, "mu1": {"atoms": [0.0, 0.5]}},
    "check": {"delta": 0.5},
}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return str(p)


def report(out):
    with open(f"{out}/report.json") as fh:
        return json.load(fh)


def test_dpp_check_zero(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert run("dpp-check", write(tmp_path, BASE), out) == 0
    r = report(out)
    assert r["pass"] and r["result"]["dpp_W"]["gap"] == 0 and r["result"]["dpp_vartheta"]["gap"] == 0
    assert r["config"]["k_star"] > 0 and len(r["config_hash"]) == 64
    assert all(c["verifies"] for c in r["checks"])
    assert "PASS dpp_W" in capsys.readouterr().out


def test_closure_cubic(tmp_path):
    out = str(tmp_path / "o")
    cfg = dict(BASE, check={"f": [0, 0, 0, 1]})
    assert run("closure", write(tmp_path, cfg), out) == 0
    r = report(out)
    assert r["result"]["closure_coefficients"] == [[0, 0, 0, 1], [0, 0, 3], [0, 6], [6]]
    assert (tmp_path / "o" / "theta.csv").exists()


def test_invariance_constant_noise(tmp_path):
    cfg = dict(BASE, preset={"name": "constant_noise", "params": {"c0": 1.0}}, c0=1.0,
               grid={"T": 1.0, "steps": 16}, particles={"M": 10_000, "K": 10_000},
               initial={"zeta": {"normal": {"n": 10_000, "scale": 0.5}}, "mu1": {"normal": {"n": 10_000, "scale": 0.5}}},
               check={"auto_level": True})
    out = str(tmp_path / "o")
    assert run("invariance", write(tmp_path, cfg), out) == 0
    r = report(out)
    assert r["checks"][0]["margin"] >= 0
    assert (tmp_path / "o" / "margins.csv").read_text().startswith("time,bound")


def test_reports_byte_identical(tmp_path):
    path = write(tmp_path, dict(BASE, preset={"name": "controlled_noise"}))
    texts = []
    for k in range(2):
        out = str(tmp_path / f"o{k}")
        run("value", path, out)
        r = report(out)
        r.pop("timestamp")
        texts.append((json.dumps(r, sort_keys=True), (tmp_path / f"o{k}" / "members.csv").read_text()))
    assert texts[0] == texts[1]
    out = str(tmp_path / "o3")
    run("value", path, out, seed=5)
    assert report(out)["config_hash"] != json.loads(texts[0][0])["config_hash"]


@pytest.mark.parametrize("command", ["simulate", "value", "hamiltonian", "viscosity-check", "probe-assumptions"])
def test_other_commands(tmp_path, command):
    cfg = dict(BASE, preset={"name": "drift_control"},
               family={"u1": {"type": "constants", "values": [-1, 1]}, "u2": {"type": "constants", "values": [0]}},
               initial={"x": 0.2, "zeta": {"atoms": [0.0, 0.3]}, "mu1": {"atoms": [0.0, 0.5]},
                        "mu2": {"atoms": [0.0, 0.3]}},
               check={"test_function": {"terms": [
                   {"F": [[[0, 1, 0], 1.0], [[1, 0, 0], 1.0], [[0, 0, 0], -1.0]]},
                   {"F": [[[0, 2, 0], 1.0]]}]},
                   "side": "sub", "control_grid": {"values": [-1, 1]},
                   "templates": {"times": [0.0, 0.5], "scale_mu1": [0.5, 1.0]}})
    out = str(tmp_path / "o")
    assert run(command, write(tmp_path, cfg), out) == 0
    assert report(out)["command"] == command


def test_failing_check_exit_1(tmp_path):
    cfg = dict(BASE, preset={"name": "zero", "params": {"phi": {"exp_abs": 1.0, "exp_rate": 2.0}}},
               check={"samples": 20})
    assert run("probe-assumptions", write(tmp_path, cfg), str(tmp_path / "o")) == 1


def test_invalid_configs_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "version": 1,\n  "preset": {"name": "zero"},\n  "grid": {"T": 1, "steps": 0}\n}\n')
    assert run("simulate", str(p), str(tmp_path / "o")) == 2
    err = capsys.readouterr().err
    assert "line 4" in err and "grid/steps" in err
    p.write_text('{"version": 1,, }')
    assert run("simulate", str(p), str(tmp_path / "o")) == 2
    assert run("simulate", write(tmp_path, dict(BASE, preset={"name": "nope"})), str(tmp_path / "o")) == 2
    assert run("simulate", write(tmp_path, dict(BASE, grid={"T": 1, "steps": 4, "t_start": 0.3})),
               str(tmp_path / "o")) == 2
    assert run("simulate", str(tmp_path / "missing.json"), str(tmp_path / "o")) == 2


def test_main_and_module_entry(tmp_path):
    path = write(tmp_path, BASE)
    assert main(["closure", "--config", path, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    res = subprocess.run([sys.executable, "-m", "mfbellman", "closure", "--config", path, "--out",
                          str(tmp_path / "b")], capture_output=True, text=True)
    assert res.returncode == 0 and "PASS closure_has_star_property" in res.stdout
