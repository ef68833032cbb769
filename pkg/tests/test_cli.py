import json
import subprocess
import sys

import pytest

from levyrisk.cli import dumps, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def record(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


def test_risk_min(capsys):
    rec = record(capsys, "risk-min", "--mu", "0.05", "--sigma", "0.2", "--x0", "1", "--T", "1",
                 "--n-paths", "5000")
    assert rec["results"]["value_analytic"] == -1.03125
    mc = rec["results"]["value_mc"]
    assert abs(mc["value"] + 1.03125) <= 3 * mc["stderr"]
    assert set(rec) == {"command", "config", "results", "errors", "seed", "runtime_ms"}
    assert rec["seed"] == 0 and rec["config"]["mu"] == 0.05


def test_hjbi_verify_defaults(capsys):
    rec = record(capsys, "hjbi", "verify")
    assert rec["results"]["passed"]
    assert rec["results"]["lattice_shape"] == [20, 20, 20]


def test_hjbi_perturbed_and_jumps(capsys):
    assert not record(capsys, "hjbi", "verify", "--perturb-w", "0.5", "--lattice", "4",
                      "--probes", "5")["results"]["passed"]
    rec = record(capsys, "hjbi", "solve", "--atom", "1,1,0.1")
    assert rec["results"]["w"] == pytest.approx(2.52064, abs=1e-5)
    assert record(capsys, "hjbi", "value")["results"]["value"] == -1.03125


def test_simulate_is_byte_identical(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    record(capsys, "simulate", "--seed", "7", "--n-paths", "50", "--n-steps", "10", "--csv", str(a))
    record(capsys, "simulate", "--seed", "7", "--n-paths", "50", "--n-steps", "10", "--csv", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_replay_record(capsys, tmp_path):
    out = tmp_path / "rec.json"
    assert main(["solve-bsde", "--n-paths", "2000", "--n-steps", "20", "--seed", "3", "--output", str(out)]) == 0
    first = json.loads(out.read_text())
    again = record(capsys, "solve-bsde", "--config", str(out))
    assert again["results"]["Y0"] == first["results"]["Y0"]
    changed = record(capsys, "solve-bsde", "--config", str(out), "--seed", "4")
    assert changed["config"]["seed"] == 4 and changed["config"]["n_paths"] == 2000


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "simulate", "--n-paths", "0")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run(capsys, "simulate", "--config", str(bad))[0] == 2
    code, out, err = run(capsys, "utility", "--utility", "power", "--delta", "1.5", "--n-paths", "100")
    assert code == 2 and "delta" in err
    code, out, _ = run(capsys, "solve-bsde", "--claim", "const:x")
    assert code == 2


def test_numerical_failure_is_status_1(capsys):
    # the asset claim overflows for an absurd drift
    code, out, err = run(capsys, "solve-bsde", "--claim", "asset", "--mu", "800", "--n-paths", "200",
                         "--n-steps", "5")
    assert code == 1 and "numerical failure" in err
    assert json.loads(out)["errors"]


def test_other_commands(capsys):
    rec = record(capsys, "risk", "--n-paths", "2000", "--n-steps", "20", "--tau", "0.5")
    assert abs(rec["results"]["rho"] + 1.03125) < 0.05
    rec = record(capsys, "dual-risk", "--n-paths", "2000", "--n-steps", "20", "--n-theta", "9")
    assert rec["results"]["argmax_theta0"] == -0.25
    rec = record(capsys, "utility", "--n-paths", "2000", "--n-steps", "20")
    assert rec["results"]["pi_hat"] == pytest.approx(1.25)
    rec = record(capsys, "verify", "--n-paths", "5000")
    assert rec["results"]["passed"]


def test_dumps_round_trips_floats():
    x = 0.1 + 0.2
    assert float(json.loads(dumps({"v": x}))["v"]) == x
    assert dumps([1.0, float("nan"), 3]) == "[1.0, null, 3]"


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "levyrisk", "hjbi", "value"], capture_output=True, text=True)
    assert p.returncode == 0 and json.loads(p.stdout)["results"]["value"] == -1.03125
