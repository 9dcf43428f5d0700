import json

import numpy as np
import pytest

from odemerge import harness
from odemerge.errors import ArgumentError, FormatError, NumericError
from odemerge.harness import (ModelCache, StreamConfig, arrival_order, candidate_times, load_config,
                              run_stream, run_suite, schedule_validation, stream_tasks, utility_weights,
                              write_run)
from odemerge.mergers import MethodParams
from odemerge.metrics import acc_w, bwt_w
from odemerge.tasks import accuracy

SMALL = StreamConfig(n_tasks=4, train_steps=200, pretrain_steps=100)


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ArgumentError):
        StreamConfig(n_tasks=0)
    with pytest.raises(ArgumentError):
        StreamConfig(calibration_capacity=0)
    with pytest.raises(ArgumentError):
        StreamConfig(utility_mode="zipf")
    with pytest.raises(ArgumentError):
        StreamConfig(method="nope")
    cfg = StreamConfig(method="C.TIES", method_params=MethodParams(ties_keep_fraction=0.5), n_tasks=5)
    assert cfg.method == "ties"
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text(json.dumps({"n_taks": 3}))
    with pytest.raises(FormatError, match="n_taks"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_tasks_are_distinct_regions():
    tasks = stream_tasks(SMALL)
    assert [t.id for t in tasks] == [1, 2, 3, 4]
    centres = np.array([t.X_train.mean(0) for t in tasks])
    assert np.min(np.linalg.norm(centres[:, None] - centres[None], axis=-1) + 1e9 * np.eye(4)) > 3


def test_utility_modes():
    u = utility_weights(SMALL)
    assert u.w == (0.25,) * 4
    r = utility_weights(SMALL.replace(utility_mode="random", utility_seed=4))
    assert abs(sum(r.w) - 1.0) < 1e-15 and len(set(r.w)) == 4
    raw = np.array(r.w) * (1 / min(r.w))
    assert raw.max() < 10.0  # draws lie in (0.1, 1)
    assert r != utility_weights(SMALL.replace(utility_mode="random", utility_seed=5))


def test_single_task_stream():
    r = run_stream(SMALL.replace(n_tasks=1))
    cache = ModelCache()
    cfg = SMALL.replace(n_tasks=1)
    psi1 = cache.model(cfg, stream_tasks(cfg)[0]).params
    assert r.final_acc == r.matrix.get(1, 1) == accuracy(psi1, cfg.arch, stream_tasks(cfg)[0])
    assert r.bwt_w == [None]


def test_uniform_stream_uses_one_over_k():
    cache = ModelCache()
    r = run_stream(SMALL, cache)
    assert r.weights == [0.25] * 4
    steps = sorted({row[0] for row in r.diagnostics})
    assert steps == [2, 3, 4]
    # each merge step integrates to t_k = 1/k
    for k in steps:
        last_t = max(row[1] for row in r.diagnostics if row[0] == k)
        assert last_t < 1.0 / k


def test_metrics_recompute_exactly():
    r = run_stream(SMALL.replace(utility_mode="random", utility_seed=1))
    w = r.weights
    for k in range(1, 5):
        assert r.acc_w[k - 1] == acc_w(r.matrix, k, w)
        if k > 1:
            assert r.bwt_w[k - 1] == bwt_w(r.matrix, k, w)


def test_diagonal_recorded_at_its_step():
    cfg, cache = SMALL.replace(method="swa"), ModelCache()
    r = run_stream(cfg, cache)
    arrived = [stream_tasks(cfg)[i] for i in arrival_order(cfg)]
    psi = [cache.model(cfg, t).params for t in arrived]
    deployed = psi[0]
    for k in range(2, 5):
        deployed = (1 - 1 / k) * deployed + psi[k - 1] / k
        assert r.matrix.get(k, k) == accuracy(deployed, cfg.arch, arrived[k - 1])


def test_stream_is_deterministic(tmp_path):
    cfg = SMALL.replace(utility_mode="random", permutation_seed=3)
    a = write_run(run_stream(cfg, ModelCache()), tmp_path / "a")
    b = write_run(run_stream(cfg, ModelCache()), tmp_path / "b")
    for f in ("run.json", "accuracy_matrix.csv", "diagnostics.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    rows = (a / "diagnostics.csv").read_text().splitlines()
    assert rows[0] == "merge_step,t,loss,gamma,dot_gu,align_ratio" and len(rows) > 1
    timing = json.loads((a / "timing.json").read_text())
    assert len(timing["merge_wall_time_s"]) == 4
    run = json.loads((a / "run.json").read_text())
    assert run["config"]["permutation_seed"] == 3 and "diagnostics_summary" in run


def test_suite_singleton_and_fairness():
    cache = ModelCache()
    rep, results = run_suite(SMALL, 1, 1, ["swa", "ta", "ties"], cache)
    assert len(cache) == 4  # one training pass shared by all methods
    for m in ("swa", "ta", "ties"):
        agg = rep["methods"][m]["final_acc_w"]
        assert agg["std"] == 0.0 and agg["n"] == 1
    assert rep["methods"]["swa"]["final_acc_w"]["mean"] == rep["methods"]["ta"]["final_acc_w"]["mean"]
    assert all(r.order == results[0].order for r in results)


def test_suite_aggregates_with_sample_std():
    rep, results = run_suite(SMALL, 3, 2, ["swa"])
    vals = [r.final_acc for r in results]
    agg = rep["methods"]["swa"]["final_acc_w"]
    assert agg["n"] == 6 and agg["mean"] == float(np.mean(vals))
    assert abs(agg["std"] - float(np.std(vals, ddof=1))) < 1e-15
    with pytest.raises(ArgumentError):
        run_suite(SMALL, 0)


def test_suite_parallel_matches_serial():
    serial, _ = run_suite(SMALL, 2, 1, ["odem", "opcm"])
    parallel, _ = run_suite(SMALL, 2, 1, ["odem", "opcm"], workers=2)
    assert serial == parallel


def test_failed_run_names_its_seeds(monkeypatch):
    def boom(*a, **k):
        raise NumericError("synthetic failure")
    monkeypatch.setattr(harness, "merge_step", boom)
    with pytest.raises(NumericError, match="permutation_seed=0.*merge step 1"):
        run_suite(SMALL, 1, 1, ["swa"])


def test_candidate_times():
    assert candidate_times(0.25) == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert len(candidate_times()) == 21
    with pytest.raises(ArgumentError):
        candidate_times(0.3)


def test_schedule_validation_shape():
    rep = schedule_validation(SMALL)
    assert [s["k"] for s in rep.steps] == [2, 3, 4]
    assert all(s["t_star"] in candidate_times() for s in rep.steps)
    assert rep.steps[0]["t_k"] == 0.5
    assert -1.0 <= rep.correlation <= 1.0
    with pytest.raises(ArgumentError):
        schedule_validation(SMALL.replace(n_tasks=2))


def test_schedule_validation_degenerate(monkeypatch):
    # validation always prefers the smallest candidate time
    monkeypatch.setattr(harness, "sweep_step", lambda ctx, cfg, tasks, w, grid: -np.arange(len(grid), dtype=float))
    rep = schedule_validation(SMALL)
    assert [s["t_star"] for s in rep.steps] == [0.0, 0.0, 0.0]
    assert rep.correlation == 0.0 and rep.degenerate


def test_schedule_validation_tie_goes_to_smaller_t(monkeypatch):
    monkeypatch.setattr(harness, "sweep_step", lambda ctx, cfg, tasks, w, grid: np.where(np.array(grid) >= 0.5, 1.0, 0.0))
    rep = schedule_validation(SMALL)
    assert all(s["t_star"] == 0.5 for s in rep.steps)
