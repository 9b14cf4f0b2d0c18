import io
import json

import pytest

from gfi import cli, coupling, verify
from gfi.estimators import CheckReport


def run(args, tmp_path=None):
    out = io.StringIO()
    argv = list(args) + (["--out", str(tmp_path)] if tmp_path is not None else [])
    return cli.main(argv, stdout=out), out.getvalue()


SIM = ["simulate", "--beta", "1", "--theta", "0.2", "--gamma", "1", "--horizon", "2",
       "--replicas", "4", "--seed", "11"]


@pytest.mark.parametrize("fidelity", ["tree", "size"])
def test_simulate_is_byte_identical(tmp_path, fidelity):
    for sub in ("a", "b"):
        code, _ = run(SIM + ["--fidelity", fidelity], tmp_path / sub)
        assert code == 0
    a = (tmp_path / "a" / "snapshots.csv").read_bytes()
    assert a == (tmp_path / "b" / "snapshots.csv").read_bytes()
    assert b"\r" not in a
    meta = json.loads(a.decode().splitlines()[0][2:])
    assert meta["config"]["fidelity"] == fidelity and meta["seed"] == 11
    assert meta["version"] and len(meta["param_hash"]) == 16


def test_simulate_replays_from_artifact(tmp_path):
    run(SIM + ["--fidelity", "tree", "--events", "true"], tmp_path / "a")
    code, _ = run(["simulate", "--config", str(tmp_path / "a" / "snapshots.csv")], tmp_path / "b")
    assert code == 0
    for name in ("snapshots.csv", "events.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_variant_flag_switches_rates(tmp_path):
    run(SIM, tmp_path / "std")
    run(SIM + ["--variant", "modified"], tmp_path / "mod")
    std = (tmp_path / "std" / "snapshots.csv").read_text()
    mod = (tmp_path / "mod" / "snapshots.csv").read_text()
    assert json.loads(mod.splitlines()[0][2:])["config"]["variant"] == "modified-edge-isolation"
    assert std != mod


def test_flags_win_over_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"beta": 3.0, "theta": 1.0, "gamma": 1.0}))
    code, _ = run(["spectral", "--config", str(cfg), "--beta", "1"], tmp_path)
    assert code == 0
    data = json.loads((tmp_path / "spectral.json").read_text())
    assert data["meta"]["config"]["beta"] == 1.0
    assert data["lambda"] == pytest.approx(-1.0, abs=1e-6)


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"beta": 1, "theta": 1, "gamma": 1, "bogus": 2}))
    assert run(["spectral", "--config", str(cfg)], tmp_path)[0] == 1


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(tmp_path / "env"))
    code, _ = run(["spectral", "--beta", "1", "--theta", "1", "--gamma", "1"])
    assert code == 0 and (tmp_path / "env" / "spectral.json").exists()


def test_cache_and_no_cache(tmp_path):
    args = ["spectral", "--beta", "1", "--theta", "0.5", "--gamma", "1"]
    run(args, tmp_path)
    cached = list((tmp_path / ".gfi-cache").glob("spectral-*.json"))
    assert len(cached) == 1
    first = (tmp_path / "spectral.json").read_bytes()
    run(args, tmp_path)
    assert (tmp_path / "spectral.json").read_bytes() == first
    run(args + ["--no-cache"], tmp_path / "fresh")
    assert not (tmp_path / "fresh" / ".gfi-cache").exists()
    fresh = json.loads((tmp_path / "fresh" / "spectral.json").read_text())
    assert fresh["lambda"] == json.loads(first)["lambda"]


def test_phase_surface_csv(tmp_path):
    code, out = run(["phase", "--beta", "1", "--thetas", "0.2:0.8:3", "--gammas", "0.5,1,2"],
                    tmp_path)
    assert code == 0
    lines = (tmp_path / "phase.csv").read_text().splitlines()
    meta = json.loads(lines[0][2:])
    assert meta["flags"]["nonincreasing_in_theta"] and meta["flags"]["nondecreasing_in_gamma"]
    assert lines[1].startswith("beta,theta,gamma,lambda") and len(lines) == 2 + 9


def test_critical_domain_error(tmp_path, capsys):
    code, _ = run(["critical", "--beta", "1", "--theta", "1.2"], tmp_path)
    assert code == 1
    assert "domain error" in capsys.readouterr().err


def test_critical_value(tmp_path):
    code, _ = run(["critical", "--beta", "1", "--theta", "0.3,0.6"], tmp_path)
    rows = json.loads((tmp_path / "critical.json").read_text())["critical"]
    assert code == 0 and rows[0]["gamma_c"] < rows[1]["gamma_c"]


def test_verify_reports_statistics(tmp_path):
    code, out = run(["verify", "--only", "1,4"], tmp_path)
    assert code == 0 and "[PASS]" in out
    report = json.loads((tmp_path / "verify.json").read_text())
    assert [c["criterion"] for c in report["criteria"]] == [1, 4]
    assert all("statistic" in c for c in report["criteria"])


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    failing = lambda profile: CheckReport("forced", 1.0, 0.0, False)
    monkeypatch.setattr(verify, "CHECKS", [(1, "forced", failing)])
    code, out = run(["verify"], tmp_path)
    assert code == 2 and "[FAIL]" in out


def test_couple_and_violation_exit_code(tmp_path, monkeypatch):
    args = ["couple", "--n", "1", "--n-prime", "2", "--beta", "1", "--beta-prime", "1.5",
            "--theta", "0.5", "--gamma", "1", "--pairs", "3"]
    assert run(args, tmp_path / "ok")[0] == 0
    lines = (tmp_path / "ok" / "coupling.jsonl").read_text().splitlines()
    assert "meta" in json.loads(lines[0]) and len(lines) > 1

    def broken(*a, **k):
        raise coupling.CouplingViolation("forced", {"label": ""})

    monkeypatch.setattr(coupling, "coupled_processes", broken)
    assert run(args, tmp_path / "bad")[0] == 2
    assert (tmp_path / "bad" / "coupling-violation.json").exists()


def test_resource_cap_exit_codes(tmp_path):
    code, _ = run(["simulate", "--beta", "3", "--theta", "0.01", "--gamma", "3", "--horizon", "20",
                   "--cluster-cap", "20"], tmp_path)
    assert code == 3
    code, _ = run(["spectral", "--beta", "1", "--theta", "0.01", "--gamma", "0.01", "--N", "32",
                   "--N-cap", "64", "--no-cache"], tmp_path)
    assert code == 3


@pytest.mark.parametrize("args", [
    ["simulate", "--beta", "-1", "--theta", "1", "--gamma", "1"],
    ["simulate", "--theta", "1", "--gamma", "1"],
    ["simulate", "--beta", "1", "--theta", "1", "--gamma", "1", "--fidelity", "exact"],
    ["simulate", "--beta", "1", "--theta", "1", "--gamma", "1", "--initial", "0"],
    ["spectral", "--beta", "1", "--theta", "1", "--gamma", "1", "--variant", "other"],
    ["simulate", "--nonsense"],
])
def test_validation_exit_code(tmp_path, args):
    assert run(args, tmp_path)[0] == 1
