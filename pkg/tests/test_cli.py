import io
import json
import os
import subprocess
import sys

import pytest

from parplan.cli import main
from parplan.report import parse_records

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PROFILE = os.path.join(ROOT, "configs", "a100_synthetic_bandwidth.csv")
STRAT = ["--b", "1", "--n", "4", "--a", "0", "--s_pp", "1", "--s_dp", "16", "--s_tp", "1",
         "--s_sp", "1", "--s_ps", "4", "--s_gs", "1", "--s_oss", "2"]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(f"""model:
  preset: 7b
  seq_len: 4096
  global_batch_tokens: {4096 * 64}
cluster:
  total_gpus: 16
  gpus_per_node: 8
  gpu_memory_capacity_bytes: 80e9
paths:
  bandwidth_csv: {PROFILE}
""")
    return str(p)


def cli(*argv):
    out = io.StringIO()
    code = main(list(argv), out)
    return code, out.getvalue()


def test_plan_table_and_records(config):
    code, text = cli("plan", "--config", config, "--top-k", "5")
    assert code == 0 and text.splitlines()[0].split()[0] == "rank"
    code, recs = cli("plan", "--config", config, "--top-k", "5", "--format", "records")
    assert code == 0 and len(parse_records(recs)) == 5


def test_plan_records_byte_identical(config):
    assert cli("plan", "--config", config, "--format", "records") == \
        cli("plan", "--config", config, "--format", "records")


def test_plan_no_feasible(config):
    code, text = cli("plan", "--config", config, "--gpu-memory-bytes", "1e6")
    assert code == 2 and text == "no feasible plan\n"


def test_plan_emits_breakdown_figure_and_explain(config, tmp_path):
    csv_path, png = tmp_path / "out" / "bd.csv", tmp_path / "out" / "bd.png"
    code, text = cli("plan", "--config", config, "--top-k", "3", "--explain", "0",
                     "--emit-breakdown", str(csv_path), "--figure", str(png))
    assert code == 0 and "if doubled" in text
    assert csv_path.read_text().startswith("rank,strategy")
    assert png.read_bytes()[:4] == b"\x89PNG"


def test_profile_flag_overrides(config, tmp_path):
    code, _ = cli("plan", "--config", config, "--profile", str(tmp_path / "missing.csv"))
    assert code == 1


def test_estimate(config, tmp_path):
    code, text = cli("estimate", "--config", config, *STRAT,
                     "--emit-breakdown", str(tmp_path / "e.csv"), "--figure", str(tmp_path / "e.png"))
    assert code == 0
    assert "memory (GiB)" in text and "TGS" in text
    rec = json.loads(text.strip().splitlines()[-1])
    assert rec["schema_version"] == 1 and rec["strategy"]["s_ps"] == 4
    assert (tmp_path / "e.png").exists() and (tmp_path / "e.csv").exists()


def test_estimate_infeasible(config):
    bad = list(STRAT)
    bad[bad.index("--s_dp") + 1] = "8"
    code, text = cli("estimate", "--config", config, *bad)
    assert code == 2 and json.loads(text)["feasible"] is False


def test_validate(config):
    code, text = cli("validate", "--config", config, *STRAT)
    assert code == 0 and json.loads(text) == {
        "feasible": True, "violations": [],
        "strategy": {k.lstrip("-"): int(v) for k, v in zip(STRAT[::2], STRAT[1::2])}}
    bad = list(STRAT)
    bad[bad.index("--s_gs") + 1] = "4"
    code, text = cli("validate", "--config", config, *bad)
    assert code == 2 and json.loads(text)["violations"] == ["gs_choice"]


def test_validate_needs_all_flags(config):
    with pytest.raises(SystemExit) as exc:
        main(["validate", "--config", config, "--b", "1"], io.StringIO())
    assert exc.value.code == 1


def test_simulate_overlap_hand_example(tmp_path):
    code, text = cli("simulate-overlap", "--emit-timeline", str(tmp_path / "t.csv"),
                     "--figure", str(tmp_path / "t.png"))
    assert code == 0
    rows = {line.split()[0]: line.split() for line in text.splitlines()[2:4]}
    assert rows["forward"][2] == "30" and rows["forward"][4] == "40"
    assert rows["backward"][2] == "50" and rows["backward"][4] == "80"
    assert (tmp_path / "t.csv").read_text().startswith("stream,kind,layer,start,end")
    assert (tmp_path / "t.png").exists()


def test_simulate_overlap_from_strategy(config):
    code, text = cli("simulate-overlap", "--config", config, *STRAT, "--format", "records")
    assert code == 0
    recs = [json.loads(x) for x in text.splitlines()]
    assert {r["phase"] for r in recs} == {"forward", "backward"}
    code, _ = cli("simulate-overlap", "--config", config, "--b", "1")
    assert code == 1


def test_simulate_mempool(tmp_path):
    cfg = os.path.join(ROOT, "configs", "llama65b_256k_mempool.yaml")
    strat = ["--b", "1", "--n", "2", "--a", "1", "--s_pp", "1", "--s_dp", "8", "--s_tp", "1",
             "--s_sp", "16", "--s_ps", "32", "--s_gs", "1", "--s_oss", "2"]
    code, text = cli("simulate-mempool", "--config", cfg, *strat, "--policy", "consolidate",
                     "--format", "records")
    assert code == 0
    base, cons = [json.loads(x) for x in text.splitlines()]
    assert base["policies"] == "none" and base["fragments_at_peak"] == {str(176 * 2**20): 40}
    assert str(176 * 2**20) not in cons["fragments_at_peak"]
    code, text = cli("simulate-mempool", "--config", cfg, *strat, "--policy", "all",
                     "--figure", str(tmp_path / "m.png"))
    assert code == 0 and "688" in text and (tmp_path / "m.png").exists()


def test_profile_check():
    code, text = cli("profile-check", PROFILE)
    assert code == 0 and "all-reduce" in text and "GB/s" in text
    code, _ = cli("profile-check", "/nonexistent.csv")
    assert code == 1
    code, _ = cli("profile-check")
    assert code == 1


def test_config_errors_exit_1(tmp_path, capsys):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    code, _ = cli("plan", "--config", str(empty))
    assert code == 1
    code, _ = cli("plan", "--preset", "7b")
    assert code == 1
    err = capsys.readouterr().err
    assert "empty configuration" in err and "cluster.total_gpus" in err


def test_module_entry_point(config):
    proc = subprocess.run([sys.executable, "-m", "parplan", "plan", "--config", config,
                           "--top-k", "2", "--format", "records"], capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 2
    proc = subprocess.run([sys.executable, "-m", "parplan", "frobnicate"], capture_output=True)
    assert proc.returncode == 1
