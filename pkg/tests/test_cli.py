import csv
import json

import numpy as np
import pytest

from porouslab import cli

SMALL = """psi.kind=power_odd
psi.m=3
sde.n_modes=4
sde.n_steps=20000
battery.trials=5
battery.moreau_fields=2
invariance.calibration_draws=50000
invariance.excessivity_restarts=200
invariance.martingale_paths=0
moments.lyapunov_states=8
moments.lyapunov_paths=8
control.pairs=2
support.paths=1000
oracle.linear_steps=20000
oracle.density_samples=4000
"""


def write_cfg(tmp_path, extra="", name="c.txt", base=SMALL):
    path = tmp_path / name
    path.write_text(base + extra)
    return str(path)


def run(argv):
    return cli.main([str(a) for a in argv])


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for code in range(6):
        assert f"  {code}  " in out


def test_missing_psi_kind_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base="sde.n_modes=4\n")
    assert run(["check-operators", "--config", cfg, "--out", tmp_path / "o"]) == cli.EXIT_CONFIG
    assert "psi.kind" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_check_operators_pass_and_forced_failure(tmp_path, capsys):
    out = tmp_path / "ok"
    assert run(["check-operators", "--config", write_cfg(tmp_path), "--out", out]) == 0
    report = json.loads((out / "operators.json").read_text())
    assert report["moreau_gradient_sign"] == "-"
    assert all(v == "pass" for v in report["verdicts"].values())
    bad = write_cfg(tmp_path, "resolvent.newton_tol=1\n", "bad.txt")
    assert run(["check-operators", "--config", bad, "--out", tmp_path / "bad"]) == cli.EXIT_FAIL
    assert "resolvent_residual" in capsys.readouterr().err


def test_simulate_then_invariance_from_file(tmp_path):
    sim = tmp_path / "sim"
    assert run(["simulate", "--config", write_cfg(tmp_path), "--out", sim]) == 0
    samples = sim / "samples.csv"
    cfg = write_cfg(tmp_path, f"invariance.samples={samples}\n", "inv.txt")
    assert run(["invariance", "--config", cfg, "--out", tmp_path / "inv"]) == 0
    rep = json.loads((tmp_path / "inv" / "invariance.json").read_text())
    assert rep["source"]["source"] == str(samples)
    assert rep["verdicts"]["invariance.negative_control_detected"] == "pass"
    with open(tmp_path / "inv" / "invariance.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["name", "p", "kind", "estimate", "se", "bias_allowance", "verdict"] and len(rows) == 15
    # convention mismatch and missing file have their own exit codes
    mism = write_cfg(tmp_path, f"invariance.samples={samples}\nsde.noise_convention=L2\n", "mis.txt")
    assert run(["invariance", "--config", mism, "--out", tmp_path / "m"]) == cli.EXIT_CONVENTION
    miss = write_cfg(tmp_path, f"invariance.samples={tmp_path / 'none.csv'}\n", "miss.txt")
    assert run(["invariance", "--config", miss, "--out", tmp_path / "n"]) == cli.EXIT_MISSING_SAMPLES


def test_solver_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "sde.dt=50\nresolvent.newton_tol=1e-300\nresolvent.max_iter=1\nsde.x0=5,5,5,5\n")
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "s"]) == cli.EXIT_SOLVER
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert man["exit_code"] == cli.EXIT_SOLVER and man["error"]


def test_control_below_threshold(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "control.rho=0.01\n")
    assert run(["control", "--config", cfg, "--out", tmp_path / "c"]) == cli.EXIT_FAIL
    err = capsys.readouterr().err
    assert "reaching condition violated" in err and "achieved distance" in err
    rep = json.loads((tmp_path / "c" / "control.json").read_text())
    assert rep["verdicts"]["control.0.reaching_condition"] == "fail"
    assert rep["problems"][0]["achieved_distance"] > 0
    with open(tmp_path / "c" / "trajectory.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "z1", "z2", "z3", "z4", "distance_H"]


def test_given_pair_control(tmp_path):
    cfg = write_cfg(tmp_path, "control.y0=0.3,0.1,0,0\ncontrol.y1=-0.2,0,0.05,0\ncontrol.eps=0.0001\n")
    assert run(["control", "--config", cfg, "--out", tmp_path / "c"]) == 0


def test_exit_status_matches_verdicts(tmp_path):
    for cmd in ("moments", "support", "oracle"):
        out = tmp_path / cmd
        code = run([cmd, "--config", write_cfg(tmp_path), "--out", out])
        man = json.loads((out / "manifest.json").read_text())
        assert man["verdicts"] and code == (0 if all(v == "pass" for v in man["verdicts"].values()) else 1)
        assert set(man) >= {"command", "argv", "config", "rng", "software", "wall_clock", "verdicts", "files"}


def test_json_is_deterministic_and_string_keyed(tmp_path):
    out = tmp_path / "o"
    run(["oracle", "--config", write_cfg(tmp_path), "--out", out])
    text = (out / "oracle.json").read_text()
    obj = json.loads(text)
    assert text == json.dumps(obj, indent=2, sort_keys=True) + "\n"
    assert np.isfinite(obj["density"]["ks"])


def test_seed_override_changes_samples(tmp_path):
    cfg = write_cfg(tmp_path)
    run(["simulate", "--config", cfg, "--out", tmp_path / "a"])
    run(["simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 3])
    assert (tmp_path / "a" / "samples.csv").read_bytes() != (tmp_path / "b" / "samples.csv").read_bytes()
    assert "sde.seed=3" in (tmp_path / "b" / "config.txt").read_text()


def test_bad_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{}")
    assert run(["rerun", path, "--out", tmp_path / "r"]) == cli.EXIT_CONFIG
