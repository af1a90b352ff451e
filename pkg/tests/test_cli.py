import json
import subprocess
import sys

import pytest

from veclyap import certifier, cli
from veclyap.cli import RunConfig, UsageError, main


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def bundle(subsystems, variables, Vs):
    return {
        "system": {"variables": variables, "subsystems": subsystems},
        "certificates": [{"subsystem": i + 1, "V": v, "degree": 2, "beta": 1.0} for i, v in enumerate(Vs)],
    }


def decoupled():
    return bundle([
        {"id": 1, "states": ["x1"], "f": ["-x1"], "g": ["0"]},
        {"id": 2, "states": ["x2"], "f": ["-2*x2"], "g": ["0"]},
    ], ["x1", "x2"], ["x1^2", "x2^2"])


def unstable():
    return bundle([
        {"id": 1, "states": ["x1"], "f": ["x1"], "g": ["0"], "input_channels": ["x1"]},
        {"id": 2, "states": ["x2"], "f": ["-x2"], "g": ["0"]},
    ], ["x1", "x2"], ["x1^2", "x2^2"])


def coupled_pair():
    return bundle([
        {"id": 1, "states": ["x1"], "f": ["-x1"], "g": ["0.5*x2"]},
        {"id": 2, "states": ["x2"], "f": ["-x2"], "g": ["0.5*x1"]},
    ], ["x1", "x2"], ["x1^2", "x2^2"])


class TestExitCodes:
    def test_certified(self, tmp_path, capsys):
        assert main(["certify", write(tmp_path / "d.json", decoupled())]) == cli.EXIT_OK
        assert capsys.readouterr().out == "k,S1,S2\n0,1.000000,1.000000\n1,0.000000,0.000000\n"

    def test_certified_with_control(self, tmp_path, capsys):
        assert main(["certify", write(tmp_path / "u.json", unstable()), "--control"]) == cli.EXIT_CONTROL
        assert "*" in capsys.readouterr().out

    def test_not_certified_names_subsystems(self, tmp_path, capsys):
        assert main(["certify", write(tmp_path / "u.json", unstable())]) == cli.EXIT_NOT_CERTIFIED
        out = capsys.readouterr()
        assert certifier.FAIL in out.out
        assert "S1" in out.err

    def test_undetermined(self, tmp_path):
        path = write(tmp_path / "p.json", coupled_pair())
        assert main(["certify", path, "--max-rounds", "1"]) == cli.EXIT_UNDETERMINED

    def test_usage_errors(self, tmp_path, capsys):
        assert main(["certify", str(tmp_path / "missing.json")]) == cli.EXIT_USAGE
        assert main(["frobnicate"]) == cli.EXIT_USAGE
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert main(["certify", str(bad)]) == cli.EXIT_USAGE
        path = write(tmp_path / "d.json", decoupled())
        assert main(["certify", path, "--levels", "1,1,1"]) == cli.EXIT_USAGE
        assert main(["certify", path, "--levels", "1.5"]) == cli.EXIT_USAGE
        assert main(["certify", path, "--eps-bar", "-1"]) == cli.EXIT_USAGE
        assert "error:" in capsys.readouterr().err

    def test_lyap_infeasible(self, tmp_path, capsys):
        sysdata = {"variables": ["x"], "subsystems": [{"id": 1, "states": ["x"], "f": ["x"], "g": ["0"]}]}
        assert main(["lyap", write(tmp_path / "s.json", sysdata)]) == cli.EXIT_LYAP
        assert "S1" in capsys.readouterr().err

    def test_validation_failure(self, tmp_path):
        # a Certified claim on an unstable subsystem must fail in simulation
        data = unstable()
        data["result"] = certifier.CertificationResult(
            certifier.Verdict.CERTIFIED, {1: [1.0, 0.0], 2: [1.0, 0.0]}, {1: 1.0, 2: 1.0}, 1e-3).to_json()
        path = write(tmp_path / "fake.json", data)
        out = tmp_path / "rep.json"
        code = main(["validate", path, "--trajectories", "10", "--horizon", "5", "--dt", "0.01",
                     "--out", str(out)])
        assert code == cli.EXIT_VALIDATION
        assert json.loads(out.read_text())["pass_fraction"] < 1

    def test_internal_error(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(certifier, "certify", boom)
        assert main(["certify", write(tmp_path / "d.json", decoupled())]) == cli.EXIT_INTERNAL

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "certify" in capsys.readouterr().out


def test_certify_then_validate(tmp_path, capsys):
    src = write(tmp_path / "d.json", decoupled())
    res = tmp_path / "res.json"
    assert main(["certify", src, "--out", str(res)]) == 0
    data = json.loads(res.read_text())
    assert data["result"]["verdict"] == "Certified" and "timestamp" in data
    rep = tmp_path / "rep.json"
    assert main(["validate", str(res), "--trajectories", "20", "--horizon", "20", "--dt", "0.01",
                 "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["pass_fraction"] == 1.0


def test_validate_needs_result(tmp_path):
    assert main(["validate", write(tmp_path / "d.json", decoupled())]) == cli.EXIT_USAGE


def test_no_timestamp_is_byte_identical(tmp_path):
    src = write(tmp_path / "p.json", coupled_pair())
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}.json"
        assert main(["certify", src, "--max-rounds", "2", "--no-timestamp", "--out", str(out),
                     "--csv", str(tmp_path / f"r{k}.csv")]) == cli.EXIT_UNDETERMINED
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "r0.csv").read_bytes() == (tmp_path / "r1.csv").read_bytes()


def test_levels_from_x0(tmp_path, capsys):
    src = write(tmp_path / "d.json", decoupled())
    assert main(["certify", src, "--from-x0", "0.5,-0.1"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "0,0.250000,0.010000"
    assert main(["certify", src, "--from-x0", "2,0"]) == cli.EXIT_USAGE


def test_json_output(tmp_path, capsys):
    assert main(["certify", write(tmp_path / "d.json", decoupled()), "--json", "--no-timestamp"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["result"]["schedule"] == {"1": [1.0, 0.0], "2": [1.0, 0.0]}
    assert "timestamp" not in data


def test_simulate(tmp_path, capsys):
    src = write(tmp_path / "d.json", decoupled())
    assert main(["simulate", src, "--x0", "1,1", "--horizon", "0.1", "--dt", "0.01"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "time,x1,x2,V1,V2" and len(lines) == 12
    assert main(["simulate", src, "--x0", "1"]) == cli.EXIT_USAGE


def test_config_overrides_flags(tmp_path, capsys):
    src = write(tmp_path / "p.json", coupled_pair())
    cfg = write(tmp_path / "cfg.json", {"max_rounds": 1})
    assert main(["certify", src, "--max-rounds", "5", "--config", cfg]) == cli.EXIT_UNDETERMINED
    assert len(capsys.readouterr().out.splitlines()) == 3
    bad = write(tmp_path / "bad.json", {"max_roundz": 1})
    assert main(["certify", src, "--config", bad]) == cli.EXIT_USAGE


def test_gen_small_network(tmp_path):
    out = tmp_path / "g.json"
    assert main(["gen", "--oscillators", "3", "--seed", "4", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert set(data) == {"generator", "system"}
    assert len(data["system"]["variables"]) == 6
    again = tmp_path / "g2.json"
    main(["gen", "--oscillators", "3", "--seed", "4", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_gen_paper_network(tmp_path):
    out = tmp_path / "g.json"
    assert main(["gen", "--out", str(out)]) == 0
    assert [s["id"] for s in json.loads(out.read_text())["system"]["subsystems"]] == list(range(1, 8))


def test_shell_pipeline(tmp_path):
    """gen | lyap | certify through real processes and pipes."""
    exe = [sys.executable, "-m", "veclyap.cli"]
    gen = subprocess.run(exe + ["gen", "--oscillators", "2", "--seed", "1", "--edge-prob", "0"],
                         capture_output=True, check=True)
    ly = subprocess.run(exe + ["lyap"], input=gen.stdout, capture_output=True, check=True)
    cert = subprocess.run(exe + ["certify", "--levels", "0.5"], input=ly.stdout, capture_output=True)
    assert cert.returncode == 0, cert.stderr.decode()
    rows = cert.stdout.decode().splitlines()
    assert rows[0] == "k,S1,S2" and rows[-1] == "1,0.000000,0.000000"


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, control=True, beta=[1.0])
        assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            RunConfig.from_json({"nope": 1})

    @pytest.mark.parametrize("kw", [{"degree": 3}, {"dt": 0}, {"beta": []}, {"max_rounds": 0},
                                    {"max_iters": 0}])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            RunConfig(**kw).validate()

    def test_solver_options(self):
        o = RunConfig(feas_tol=1e-6, max_iters=77).solver_options()
        assert o.feas_tol == 1e-6 and o.max_iters == 77
