import json

import numpy as np
import pytest

from odemerge.cli import main
from odemerge.params import load_checkpoint
from odemerge.tasks import load_task

FAST = ["--tasks", "3"]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_tasks": 3, "train_steps": 100, "pretrain_steps": 50}))
    return str(p)


def test_merge_writes_results(tmp_path, config, capsys):
    out = tmp_path / "res"
    assert main(["merge", "--config", config, "--method", "odem", "--out", str(out)]) == 0
    assert (out / "run.json").is_file() and (out / "accuracy_matrix.csv").is_file()
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["method"] == "odem" and len(run["acc_w"]) == 3
    assert "final ACC_w" in capsys.readouterr().out


def test_flag_overrides(tmp_path, config):
    out = tmp_path / "res"
    assert main(["merge", "--config", config, "--method", "ties", "--tasks", "2", "--step-size", "0.1",
                 "--calib", "64", "--seed", "4", "--utility", "random", "--gamma-override", "0.5",
                 "--out", str(out)]) == 0
    cfg = json.loads((out / "run.json").read_text())["config"]
    assert (cfg["method"], cfg["n_tasks"], cfg["calibration_capacity"], cfg["permutation_seed"]) == ("ties", 2, 64, 4)
    assert cfg["integration"]["step_size"] == 0.1 and cfg["method_params"]["gamma_override"] == 0.5
    assert cfg["utility_mode"] == "random"


def test_suite_writes_aggregate(tmp_path, config):
    out = tmp_path / "s"
    assert main(["suite", "--config", config, "--permutations", "2", "--methods", "odem,swa", "--out", str(out)]) == 0
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["n_permutations"] == 2
    assert set(agg["methods"]) == {"odem", "swa"} and agg["methods"]["odem"]["final_acc_w"]["n"] == 2


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["merge", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["merge", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"n_tasks": -1}))
    assert main(["merge", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["merge", "--step-size", "3", "--out", str(tmp_path)]) == 2


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["merge", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_gen_tasks_and_train(tmp_path, config):
    assert main(["gen-tasks", "--config", config, "--out", str(tmp_path / "t")]) == 0
    assert load_task(tmp_path / "t" / "task_02.json").id == 2
    assert main(["train", "--config", config, "--out", str(tmp_path / "m")]) == 0
    psi0 = load_checkpoint(tmp_path / "m" / "psi0.odem")
    t1 = load_checkpoint(tmp_path / "m" / "task_01.odem")
    assert psi0.arch == t1.arch and not np.array_equal(psi0.params, t1.params)


def test_sweep_stats_validate(tmp_path, config):
    assert main(["sweep", "--config", config, "--step", "2", "--out", str(tmp_path / "w")]) == 0
    assert len((tmp_path / "w" / "sweep.csv").read_text().splitlines()) == 12
    assert main(["sweep", "--config", config, "--step", "1", "--out", str(tmp_path / "w")]) == 2
    assert main(["stats", "--config", config, "--out", str(tmp_path / "h")]) == 0
    assert (tmp_path / "h" / "gamma_hist.csv").is_file() and (tmp_path / "h" / "ratio_hist.csv").is_file()
    assert main(["validate-schedule", "--config", config, "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "schedule.json").read_text())
    assert [s["k"] for s in rep["steps"]] == [2, 3] and "spearman" in rep


def test_runtime_error_exits_1(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_tasks": 2, "train_lr": 1e308, "pretrain_steps": 0}))
    assert main(["merge", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "diverged" in capsys.readouterr().err
