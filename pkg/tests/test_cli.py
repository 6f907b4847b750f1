import json
import subprocess
import sys
from pathlib import Path

import pytest

from taskfarm.cli import main, parse_duration
from taskfarm.model import read_tasks, read_workload
from taskfarm.trace import read_trace

DATA = Path(__file__).parent / "data"


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


SPEC = {"counts": {"d2dUHF": 30, "o2dUHF": 10}, "cost": {"family": "exponential", "mean_s": 20}, "seed": 5}


@pytest.mark.parametrize("text,seconds", [("90", 90), ("1.5h", 5400), ("6h40m", 24000), ("30s", 30), ("2m", 120),
                                          (12, 12)])
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds


@pytest.mark.parametrize("bad", ["", "h", "1d", "abc"])
def test_parse_duration_rejects(bad):
    with pytest.raises(ValueError):
        parse_duration(bad)


def test_gen_is_deterministic_and_seed_overridable(cli_env, capsys):
    spec = write_json(cli_env / "spec.json", SPEC)
    run_cli(capsys, "gen", "--spec", spec, "--out", "a.jsonl")
    run_cli(capsys, "gen", "--spec", spec, "--out", "b.jsonl")
    assert Path("a.jsonl").read_bytes() == Path("b.jsonl").read_bytes()
    code, out = run_cli(capsys, "gen", "--spec", spec, "--out", "c.jsonl", "--seed", "6", "--json")
    assert code == 0 and json.loads(out)["n_calc"] == 40
    assert Path("c.jsonl").read_bytes() != Path("a.jsonl").read_bytes()


def test_flag_beats_env_beats_config(cli_env, capsys, monkeypatch):
    spec = write_json(cli_env / "spec.json", SPEC)
    config = write_json(cli_env / "cfg.json", {"seed": 1, "gen": {"seed": 2}})
    ref = {}
    for seed in (2, 3, 4):
        run_cli(capsys, "gen", "--spec", spec, "--out", f"ref{seed}.jsonl", "--seed", seed)
        ref[seed] = Path(f"ref{seed}.jsonl").read_bytes()
    run_cli(capsys, "gen", "--spec", spec, "--out", "x.jsonl", "--config", config)
    assert Path("x.jsonl").read_bytes() == ref[2]  # section beats top level
    monkeypatch.setenv("PH_SEED", "3")
    run_cli(capsys, "gen", "--spec", spec, "--out", "x.jsonl", "--config", config)
    assert Path("x.jsonl").read_bytes() == ref[3]
    run_cli(capsys, "gen", "--spec", spec, "--out", "x.jsonl", "--config", config, "--seed", "4")
    assert Path("x.jsonl").read_bytes() == ref[4]


def test_cluster_subcommand(cli_env, capsys):
    spec = write_json(cli_env / "spec.json", SPEC)
    run_cli(capsys, "gen", "--spec", spec, "--out", "w.jsonl")
    g = write_json(cli_env / "g.json", {"d2dUHF": 7, "*": 4})
    code, out = run_cli(capsys, "cluster", "--workload", "w.jsonl", "--granularity", g, "--out", "t.jsonl",
                        "--ordering", "LONGEST_FIRST", "--json")
    tasks = read_tasks("t.jsonl")
    assert code == 0 and json.loads(out)["n_task"] == len(tasks) == 5 + 3
    costs = [t.total_cost for t in tasks]
    assert costs == sorted(costs, reverse=True)
    assert sum(len(t.calc_ids) for t in tasks) == len(read_workload("w.jsonl"))


def test_domain_errors_exit_1(cli_env, capsys):
    code, out = run_cli(capsys, "cluster", "--out", "t.jsonl", "--json")
    assert code == 1 and "error" in json.loads(out)
    bad = write_json(cli_env / "bad.json", {"counts": {"nope": 1}})
    assert run_cli(capsys, "gen", "--spec", bad, "--out", "x.jsonl")[0] == 1
    assert run_cli(capsys, "gen", "--spec", "missing.json", "--out", "x.jsonl")[0] == 1


def test_usage_errors_exit_2(cli_env):
    for argv in (["frobnicate"], ["gen"], ["analyze", "--trace", "x", "--out", "y", "--dt", "soon"]):
        r = subprocess.run([sys.executable, "-m", "taskfarm.cli", *argv], capture_output=True, text=True)
        assert r.returncode == 2, argv


def test_bounds_subcommand(cli_env, capsys):
    for name in ("farm_runs.csv", "grid_runs.csv"):
        code, out = run_cli(capsys, "bounds", "--rows", DATA / name, "--json")
        doc = json.loads(out)
        assert code == 0 and doc["all_passed"] and len(doc["rows"]) == 4
    Path("bad.csv").write_text("t_total,t_busy,slots\n1h,200h,100\n")
    code, out = run_cli(capsys, "bounds", "--rows", "bad.csv")
    assert code == 1 and out.startswith("FAIL")
    Path("junk.csv").write_text("t_total,t_busy,slots\nsoon,1h,1\n")
    assert run_cli(capsys, "bounds", "--rows", "junk.csv")[0] == 1


def test_analyze_subcommand_writes_outputs(cli_env, capsys):
    code, out = run_cli(capsys, "analyze", "--trace", DATA / "small_trace.jsonl", "--out", "an", "--dt", "10",
                        "--json")
    doc = json.loads(out)
    assert code == 0 and doc["decomposition"]["n_w"] == 2  # peak pool
    assert Path("an/series/pool_busy.csv").read_text() == (DATA / "small_series_dt10.csv").read_text()
    assert Path("an/profile.csv").read_text() == (DATA / "small_profile.csv").read_text()
    assert json.loads(Path("an/summary.json").read_text())["N_calc"] == 6
    assert json.loads(Path("an/decomposition.json").read_text())["B"] == 40.0


def scenario(tmp, **extra):
    scn = {
        "workload": {"spec": SPEC},
        "granularity": {"*": 2},
        "cluster": {"workers": 3, "slots": 2, "arrival": {"kind": "SHIFTED_EXPONENTIAL", "mean_s": 20}},
        "seeds": [1, 2],
        "dt": 10,
        **extra,
    }
    return write_json(tmp / "scn.json", scn)


def test_sim_is_deterministic(cli_env, capsys):
    scn = scenario(cli_env)
    run_cli(capsys, "sim", "--scenario", scn, "--out", "s1")
    run_cli(capsys, "sim", "--scenario", scn, "--out", "s2")
    for rel in ("report.json", "seed-1/trace.jsonl", "seed-2/summary.json", "seed-2/decomposition.json"):
        assert Path("s1", rel).read_bytes() == Path("s2", rel).read_bytes(), rel
    assert Path("s1/seed-1/trace.jsonl").read_bytes() != Path("s1/seed-2/trace.jsonl").read_bytes()
    assert read_trace("s1/seed-1/trace.jsonl")


def test_sim_with_policies_reports_experiment(cli_env, capsys):
    scn = scenario(cli_env, policies=["NATURAL", "LONGEST_FIRST"], mode="PUSH", push={"p_loss": 0.1})
    code, out = run_cli(capsys, "sim", "--scenario", scn, "--out", "s", "--json")
    doc = json.loads(out)
    assert code == 0 and len(doc["runs"]) == 4
    assert set(doc["experiment"]["policies"]) == {"NATURAL", "LONGEST_FIRST"}
    assert Path("s/LONGEST_FIRST-seed-2/trace.jsonl").exists()


def test_verify_build_then_check(cli_env, capsys):
    root = cli_env / "deploy"
    (root / "bin").mkdir(parents=True)
    (root / "bin" / "tool").write_bytes(b"#!/bin/sh\necho hi\n")
    (root / "data.txt").write_text("x")
    code, _ = run_cli(capsys, "verify", "--build", "--manifest", "m.json", "--root", root, "--package-version", "1.2")
    assert code == 0
    assert run_cli(capsys, "verify", "--manifest", "m.json", "--root", root)[0] == 0
    (root / "data.txt").write_text("y")
    code, out = run_cli(capsys, "verify", "--manifest", "m.json", "--root", root)
    assert code == 1 and "data.txt" in out
    Path("broken.json").write_text("{}")
    assert run_cli(capsys, "verify", "--manifest", "broken.json", "--root", root)[0] == 1


def test_status_without_endpoint_is_domain_error(cli_env, capsys):
    assert run_cli(capsys, "status")[0] == 1
    assert run_cli(capsys, "drain", "--url", "http://127.0.0.1:9")[0] == 1


def test_console_script_installed():
    r = subprocess.run(["taskfarm", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
