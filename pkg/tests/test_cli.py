import csv
import json
import os
import subprocess
import sys

import pytest

from riskmap.cli import main
from riskmap.scenario import load_scenario


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def files_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_gen_writes_loadable_files(tmp_path, capsys):
    out = tmp_path / "s"
    code, _, _ = run(capsys, "gen", "straight", 10, "--out", out, "--seed", 3)
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(f"straight_3_{i}.json" for i in range(10))
    for p in out.iterdir():
        assert load_scenario(p).horizon == 30


def test_gen_rerun_identical(tmp_path, capsys):
    run(capsys, "gen", "all", 2, "--out", tmp_path / "a", "--seed", 5)
    run(capsys, "gen", "all", 2, "--out", tmp_path / "b", "--seed", 5)
    a, b = files_bytes(tmp_path / "a"), files_bytes(tmp_path / "b")
    assert len(a) == 10 and a == b


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_unwritable_dir_permissions(tmp_path, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    code, _, err = run(capsys, "gen", "straight", 1, "--out", locked)
    assert code == 4 and str(locked) in err


def test_gen_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    target = blocker / "sub"
    code, _, err = run(capsys, "gen", "straight", 1, "--out", target)
    assert code != 0 and str(target) in err


def test_unknown_flag_rejected(capsys):
    assert run(capsys, "gen", "straight", "--bogus", "--out", "x")[0] == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "all", "10", "--out", str(root / "train"), "--seed", "1"]) == 0
    assert main(["gen", "all", "1", "--out", str(root / "held"), "--seed", "99"]) == 0
    assert main(["train", "--stage", "1", "--scenarios", str(root / "train"), "--out", str(root / "s1"),
                 "--epochs", "3"]) == 0
    return root


def test_stage1_csv_rows_per_epoch(workspace):
    rows = list(csv.DictReader((workspace / "s1" / "stage1_loss.csv").open()))
    assert len(rows) >= 3
    assert [int(r["epoch"]) for r in rows] == list(range(len(rows)))
    assert (workspace / "s1" / "predictor.json").is_file()


def test_stage2_without_checkpoint_names_file(workspace, capsys):
    missing = workspace / "nope" / "predictor.json"
    code, _, err = run(capsys, "train", "--stage", 2, "--scenarios", workspace / "train",
                       "--out", workspace / "s2x", "--ckpt-predictor", missing)
    assert code == 4 and str(missing) in err
    code, _, err = run(capsys, "train", "--stage", 2, "--scenarios", workspace / "train", "--out",
                       workspace / "s2x")
    assert code == 2 and "--ckpt-predictor" in err


def test_stage2_loss_mask_and_determinism(workspace, capsys):
    args = ["train", "--stage", 2, "--scenarios", workspace / "train", "--ckpt-predictor",
            workspace / "s1" / "predictor.json", "--epochs", 2, "--count", 100, "--loss-mask", "-demo_cost"]
    assert run(capsys, *args, "--out", workspace / "m1")[0] == 0
    assert run(capsys, *args, "--out", workspace / "m2")[0] == 0
    a, b = files_bytes(workspace / "m1"), files_bytes(workspace / "m2")
    assert set(a) == {"planner.json", "stage2_loss.csv"} and a == b
    rows = list(csv.DictReader((workspace / "m1" / "stage2_loss.csv").open()))
    assert len(rows) == 3 and all(float(r["demo_cost"]) >= 0.0 for r in rows)
    assert run(capsys, "train", "--stage", 2, "--scenarios", workspace / "train", "--out", workspace / "m3",
               "--ckpt-predictor", workspace / "s1" / "predictor.json", "--loss-mask", "-l_bogus")[0] == 2


def test_stage1_divergence_exit_code(workspace, capsys):
    code, _, err = run(capsys, "train", "--stage", 1, "--scenarios", workspace / "held", "--out",
                       workspace / "div", "--epochs", 3, "--lr", 1e6)
    assert code == 3 and "diverged" in err


def test_plan_json(workspace, capsys):
    scen = workspace / "train" / "straight_1_0.json"
    code, out, _ = run(capsys, "plan", scen, "--ckpt-predictor", workspace / "s1" / "predictor.json",
                       "--count", 400, "--dump-riskmap", workspace / "risk.csv")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["trajectory"]) == 30 and len(doc["cost_table"]) == 400
    assert 0 <= doc["index"] < 400 and doc["cost"] == doc["cost_table"][doc["index"]]
    assert 0.0 < doc["wall_time_ms"] < 100.0
    with (workspace / "risk.csv").open() as fh:
        assert sum(1 for _ in fh) == 1 + 400 * 30


def test_plan_errors(workspace, capsys):
    scen = workspace / "train" / "straight_1_0.json"
    code, _, err = run(capsys, "plan", scen, "--count", 401)
    assert code == 2 and "401" in err
    assert run(capsys, "plan", workspace / "missing.json")[0] == 4
    assert run(capsys, "plan", scen, "--ckpt-planner", workspace / "missing.json")[0] == 4


def test_eval_reports(workspace, capsys):
    args = ["eval", "--scenarios", workspace / "held", "--ckpt-predictor", workspace / "s1" / "predictor.json",
            "--counts", "100,400,900"]
    assert run(capsys, *args, "--out", workspace / "e1")[0] == 0
    assert run(capsys, *args, "--out", workspace / "e2")[0] == 0
    a = files_bytes(workspace / "e1")
    assert sorted(a) == sorted(f"report_{n}.{ext}" for n in (100, 400, 900) for ext in ("csv", "json"))
    assert a == files_bytes(workspace / "e2")
    rep = json.loads(a["report_400.json"])
    assert rep["count"] == 400 and len(rep["rows"]) == 5


def test_eval_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "eval", "--scenarios", tmp_path / "empty", "--out", tmp_path / "o")[0] != 0
    assert run(capsys, "eval", "--scenarios", tmp_path / "nowhere", "--out", tmp_path / "o")[0] != 0


def test_ablate_writes_summary(workspace, capsys):
    code, out, _ = run(capsys, "ablate", "--scenarios", workspace / "held", "--eval-scenarios", workspace / "held",
                       "--ckpt-predictor", workspace / "s1" / "predictor.json", "--epochs", 1, "--count", 100,
                       "--out", workspace / "abl")
    assert code == 0
    data = json.loads((workspace / "abl" / "ablation.json").read_text())
    assert set(data) == {"all", "-demo_cost", "-l_sel", "-l_l2", "-l_con", "-l_v"}


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "riskmap.cli", "gen", "curve", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["written"] == 1
