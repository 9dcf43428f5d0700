"""End-to-end continual-merging runs: task streams, training, merging, reports.

A stream places ``n_tasks`` synthetic tasks on a ring of input regions
(task ``i`` is centred at angle ``2*pi*i/n`` and radius ``region_radius``)
and fine-tunes one model per task from a shared ``psi0``.  ``psi0`` is
itself trained for ``pretrain_steps`` on an auxiliary pool of tasks placed
between the stream's regions, so every task starts from the same
generic initialisation.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, OdeMergeError
from .integrator import IntegrationConfig, integrate
from .dynamics import FieldContext
from .mergers import (METHODS, MethodParams, UtilityWeights, canonical_method, init_state,
                      merge_step, odem_step, schedule_time)
from .metrics import (AccuracyMatrix, acc_w, alignment_histogram, bwt_w, gamma_histogram,
                      spearman)
from .params import ArchDescriptor, Checkpoint
from .tasks import (MLPOracle, SyntheticTask, accuracy, build_calibration, generate_task,
                    init_params, train_task_model)

UTILITY_MODES = ("uniform", "random")
UTILITY_LOW, UTILITY_HIGH = 0.1, 1.0


def default_arch() -> ArchDescriptor:
    return ArchDescriptor.mlp([2, 16, 16, 4], "tanh")


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 8
    method: str = "odem"
    method_params: MethodParams = MethodParams()
    integration: IntegrationConfig = IntegrationConfig()
    calibration_capacity: int = 1024
    calib_include_incoming: bool = True
    calib_seed: int = 0
    utility_mode: str = "uniform"
    utility_seed: int = 0
    permutation_seed: int = 0
    arch: ArchDescriptor = field(default_factory=default_arch)
    train_steps: int = 500
    train_lr: float = 0.1
    task_seed: int = 1000
    separation: float = 3.0
    clusters_per_class: int = 1
    noise: float = 1.0
    region_radius: float = 5.0
    init_seed: int = 123
    pretrain_steps: int = 300
    pretrain_seed: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if self.n_tasks < 1:
            raise ArgumentError("n_tasks must be >= 1")
        if self.calibration_capacity < 1:
            raise ArgumentError("calibration_capacity must be >= 1")
        if self.utility_mode not in UTILITY_MODES:
            raise ArgumentError(f"utility_mode must be one of {UTILITY_MODES}")
        if self.train_steps < 1 or self.pretrain_steps < 0:
            raise ArgumentError("train_steps must be >= 1 and pretrain_steps >= 0")
        if not (math.isfinite(self.train_lr) and self.train_lr >= 0):
            raise ArgumentError("train_lr must be finite and >= 0")
        if self.region_radius < 0:
            raise ArgumentError("region_radius must be >= 0")

    @property
    def class_count(self) -> int:
        return self.arch.class_count

    def replace(self, **kw) -> "StreamConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["method_params"] = dataclasses.asdict(self.method_params)
        d["integration"] = {"step_size": self.integration.step_size,
                            "record_grid": None if self.integration.record_grid is None
                            else list(self.integration.record_grid)}
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        try:
            if "method_params" in d:
                d["method_params"] = MethodParams(**d["method_params"])
            if "integration" in d:
                d["integration"] = IntegrationConfig(**d["integration"])
            if "arch" in d:
                d["arch"] = ArchDescriptor.from_dict(d["arch"])
        except TypeError as exc:
            raise FormatError(f"malformed config: {exc}") from exc
        return cls(**d)


def load_config(path) -> StreamConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return StreamConfig.from_dict(raw)


# --------------------------------------------------------------------------
# tasks, psi0 and the task-model cache
# --------------------------------------------------------------------------

def _ring_offset(cfg: StreamConfig, pos: float) -> tuple:
    a = 2 * math.pi * pos / cfg.n_tasks
    return (cfg.region_radius * math.cos(a), cfg.region_radius * math.sin(a))


def stream_tasks(cfg: StreamConfig) -> list[SyntheticTask]:
    """Tasks in generation order; ids are 1-based."""
    return [generate_task(cfg.task_seed + i, cfg.class_count, cfg.clusters_per_class, cfg.separation,
                          _ring_offset(cfg, i), cfg.noise, task_id=i + 1)
            for i in range(cfg.n_tasks)]


def pretrain_pool(cfg: StreamConfig) -> list[SyntheticTask]:
    return [generate_task(cfg.pretrain_seed + i, cfg.class_count, cfg.clusters_per_class, cfg.separation,
                          _ring_offset(cfg, i + 0.5), cfg.noise, task_id=0)
            for i in range(cfg.n_tasks)]


def _psi0_key(cfg: StreamConfig) -> tuple:
    return (json.dumps(cfg.arch.to_dict(), sort_keys=True), cfg.init_seed, cfg.pretrain_steps,
            cfg.pretrain_seed, cfg.train_lr, cfg.n_tasks, cfg.separation, cfg.clusters_per_class,
            cfg.noise, cfg.region_radius)


class ModelCache:
    """Memoises psi0 and task-adapted models so every method sees the same checkpoints."""

    def __init__(self):
        self._psi0: dict = {}
        self._models: dict = {}

    def psi0(self, cfg: StreamConfig) -> Checkpoint:
        key = _psi0_key(cfg)
        if key not in self._psi0:
            init = Checkpoint(cfg.arch, init_params(cfg.arch, cfg.init_seed), "init", cfg.init_seed)
            if cfg.pretrain_steps:
                pool = pretrain_pool(cfg)
                joint = dataclasses.replace(
                    pool[0], X_train=np.concatenate([t.X_train for t in pool]),
                    y_train=np.concatenate([t.y_train for t in pool]))
                init = train_task_model(joint, cfg.arch, init, cfg.pretrain_steps, cfg.train_lr, "psi0")
            self._psi0[key] = init
        return self._psi0[key]

    def model(self, cfg: StreamConfig, task: SyntheticTask) -> Checkpoint:
        key = (task.seed, tuple(task.offset), _psi0_key(cfg), cfg.train_steps, cfg.train_lr)
        if key not in self._models:
            self._models[key] = train_task_model(task, cfg.arch, self.psi0(cfg), cfg.train_steps,
                                                 cfg.train_lr, f"task{task.id}")
        return self._models[key]

    def __len__(self):
        return len(self._models)


def arrival_order(cfg: StreamConfig) -> list[int]:
    """0-based task indices in arrival order."""
    return [int(i) for i in np.random.default_rng(cfg.permutation_seed).permutation(cfg.n_tasks)]


def utility_weights(cfg: StreamConfig) -> UtilityWeights:
    """Weights indexed by arrival position, normalised to sum to 1."""
    if cfg.utility_mode == "uniform":
        return UtilityWeights.uniform(cfg.n_tasks)
    w = np.random.default_rng(cfg.utility_seed).uniform(UTILITY_LOW, UTILITY_HIGH, cfg.n_tasks)
    return UtilityWeights(tuple(w / w.sum()))


def calibration_oracle(cfg: StreamConfig, arrived: list[SyntheticTask], k: int) -> MLPOracle:
    seen = arrived[:k] if cfg.calib_include_incoming else arrived[:k - 1]
    return MLPOracle.from_calibration(cfg.arch, build_calibration(seen, cfg.calibration_capacity,
                                                                  cfg.calib_seed + k))


# --------------------------------------------------------------------------
# single stream
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    config: dict
    order: list
    weights: list
    matrix: AccuracyMatrix
    acc_w: list
    bwt_w: list
    diagnostics: list = field(default_factory=list)  # (merge_step, t, loss, gamma, dot_gu, align_ratio)
    wall_time: list = field(default_factory=list)

    @property
    def final_acc(self) -> float:
        return self.acc_w[-1]

    @property
    def final_bwt(self) -> float:
        return self.bwt_w[-1]

    def summary(self, t_bins: int = 20, v_bins: int = 20) -> dict:
        diags = [_Diag(*row[1:]) for row in self.diagnostics]
        return {
            "n_steps": len(diags),
            "rho_hat": max((d.align_ratio for d in diags), default=0.0),
            "gamma_below_one_fraction": (sum(d.gamma < 1.0 for d in diags) / len(diags)) if diags else 0.0,
            "gamma_histogram": gamma_histogram(diags, t_bins, v_bins).tolist(),
            "alignment_histogram": alignment_histogram(diags, t_bins, v_bins).tolist(),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "order": self.order,
            "weights": self.weights,
            "accuracy_matrix": [self.matrix.row(k).tolist() for k in range(1, self.matrix.n + 1)],
            "acc_w": self.acc_w,
            "bwt_w": self.bwt_w,
            "final_acc_w": self.final_acc,
            "final_bwt_w": self.final_bwt,
            "diagnostics_summary": self.summary(),
        }


@dataclass(frozen=True)
class _Diag:
    t: float
    loss: float
    gamma: float
    dot_gu: float
    align_ratio: float


def run_stream(cfg: StreamConfig, cache: ModelCache | None = None) -> RunResult:
    """Train (or reuse) task models, merge them in arrival order and score every step.

    ``a[k][k]`` is measured right after step ``k``; all entries of row ``k``
    come from the deployed model ``Psi_k``.
    """
    cache = ModelCache() if cache is None else cache
    tasks = stream_tasks(cfg)
    order = arrival_order(cfg)
    arrived = [tasks[i] for i in order]
    weights = utility_weights(cfg)
    psi0 = cache.psi0(cfg)
    state = init_state(cfg.method, psi0.params, cfg.arch)
    m = AccuracyMatrix(cfg.n_tasks)
    accs, bwts, diag_rows, walls = [], [], [], []

    for k, task in enumerate(arrived, start=1):
        psi_k = cache.model(cfg, task).params
        oracle = calibration_oracle(cfg, arrived, k) if (cfg.method == "odem" and k > 1) else None
        start = time.perf_counter()
        try:
            state = merge_step(state, psi_k, weights, cfg.method_params, oracle, cfg.integration)
        except OdeMergeError as exc:
            raise type(exc)(f"merge step {k} (task {task.id}): {exc}") from exc
        walls.append(time.perf_counter() - start)
        if cfg.method == "odem" and k > 1:
            diag_rows.extend((k,) + row for row in state.trajectories[-1].diagnostics_rows())
        for i in range(1, k + 1):
            m.set(k, i, accuracy(state.psi, cfg.arch, arrived[i - 1]))
        accs.append(acc_w(m, k, weights))
        bwts.append(bwt_w(m, k, weights) if k > 1 else None)

    return RunResult(cfg.to_dict(), [tasks[i].id for i in order], list(weights.w), m, accs, bwts,
                     diag_rows, walls)


def _json_dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_run(result: RunResult, out_dir) -> Path:
    """Write run.json, accuracy_matrix.csv, diagnostics.csv and timing.json.

    Wall times live only in timing.json so the other files are byte-identical
    across repeated runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(result.to_dict(), out / "run.json")
    result.matrix.to_csv(out / "accuracy_matrix.csv")
    with open(out / "diagnostics.csv", "w") as fh:
        fh.write("merge_step,t,loss,gamma,dot_gu,align_ratio\n")
        for row in result.diagnostics:
            fh.write(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]) + "\n")
    _json_dump({"merge_wall_time_s": result.wall_time}, out / "timing.json")
    return out


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

def _suite_configs(base: StreamConfig, n_permutations: int, n_utility_draws: int, methods):
    for p in range(n_permutations):
        for d in range(n_utility_draws):
            for method in methods:
                yield base.replace(method=method, permutation_seed=base.permutation_seed + p,
                                   utility_seed=base.utility_seed + d)


def _run_one(args):
    cfg, cache = args
    try:
        return run_stream(cfg, cache)
    except OdeMergeError as exc:
        raise type(exc)(f"run failed (method={cfg.method}, permutation_seed={cfg.permutation_seed}, "
                        f"utility_seed={cfg.utility_seed}): {exc}") from exc


def _agg(values) -> dict:
    v = np.asarray(values, dtype=float)
    std = float(v.std(ddof=1)) if v.shape[0] > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "n": int(v.shape[0]), "values": v.tolist()}


def run_suite(base_cfg: StreamConfig, n_permutations: int = 1, n_utility_draws: int = 1,
              methods=None, cache: ModelCache | None = None, workers: int = 1):
    """Run every (permutation, utility draw, method) combination and aggregate final metrics.

    Returns ``(report, results)``; ``report[method]`` holds mean and sample
    std of the final ACC_w and BWT_w.  All methods share one model cache.
    """
    if n_permutations < 1 or n_utility_draws < 1:
        raise ArgumentError("n_permutations and n_utility_draws must be >= 1")
    methods = [canonical_method(m) for m in (methods or [base_cfg.method])]
    cache = ModelCache() if cache is None else cache
    cfgs = list(_suite_configs(base_cfg, n_permutations, n_utility_draws, methods))
    for task in stream_tasks(base_cfg):  # fill the cache before any fan-out
        cache.model(base_cfg, task)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_one, [(c, cache) for c in cfgs]))
    else:
        results = [_run_one((c, cache)) for c in cfgs]

    report = {"n_permutations": n_permutations, "n_utility_draws": n_utility_draws,
              "utility_mode": base_cfg.utility_mode, "methods": {}}
    for method in methods:
        mine = [r for c, r in zip(cfgs, results) if c.method == method]
        bwt = [r.final_bwt for r in mine if r.final_bwt is not None]
        report["methods"][method] = {
            "final_acc_w": _agg([r.final_acc for r in mine]),
            "final_bwt_w": _agg(bwt) if bwt else None,
        }
    return report, results


# --------------------------------------------------------------------------
# trajectory sweeps and schedule validation
# --------------------------------------------------------------------------

def candidate_times(interval: float = 0.05) -> tuple:
    n = int(round(1.0 / interval))
    if n < 1 or abs(n * interval - 1.0) > 1e-9:
        raise ArgumentError("interval must divide 1")
    return tuple(round(i / n, 12) for i in range(n + 1))


def sweep_step(ctx: FieldContext, cfg: StreamConfig, eval_tasks, weights, grid) -> np.ndarray:
    """Weighted accuracy over ``eval_tasks`` at each grid time of the ODE-M trajectory."""
    traj = integrate(ctx, 1.0, IntegrationConfig(cfg.integration.step_size, grid),
                     cfg.method_params.gamma_override)
    w = np.asarray(weights, dtype=float)
    acc = np.array([[accuracy(theta, cfg.arch, t) for t in eval_tasks] for _, theta in traj.snapshots])
    return acc @ (w / w.sum())


@dataclass
class ScheduleReport:
    steps: list          # per merge step k >= 2: dict(k, t_k, t_star, best_acc)
    correlation: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {"steps": self.steps, "spearman": self.correlation, "degenerate": self.degenerate}


def schedule_validation(cfg: StreamConfig, cache: ModelCache | None = None,
                        interval: float = 0.05) -> ScheduleReport:
    """Find the best operating time per merge step and correlate it with the schedule.

    At each step the ODE-M trajectory from the deployed model to the incoming
    model is scored at candidate times ``0, interval, ..., 1`` by weighted test
    accuracy over the tasks seen so far; the best time wins, ties going to the
    smaller t.  The stream itself advances with the scheduled time.  Reports
    spearman({1 - t_k*}, {(k-1)/k}); a constant series gives 0 with
    ``degenerate=True``.
    """
    if cfg.n_tasks < 3:
        raise ArgumentError("schedule validation needs a stream of at least 3 tasks")
    cfg = cfg.replace(method="odem")
    cache = ModelCache() if cache is None else cache
    tasks = stream_tasks(cfg)
    arrived = [tasks[i] for i in arrival_order(cfg)]
    weights = utility_weights(cfg)
    grid = candidate_times(interval)
    state = init_state("odem", cache.psi0(cfg).params, cfg.arch)
    steps = []
    for k, task in enumerate(arrived, start=1):
        psi_k = cache.model(cfg, task).params
        oracle = calibration_oracle(cfg, arrived, k) if k > 1 else None
        if k > 1:
            ctx = FieldContext.build(state.psi, psi_k, oracle)
            scores = sweep_step(ctx, cfg, arrived[:k], weights.w[:k], grid)
            best = int(np.argmax(scores))  # first maximum, i.e. the smaller t
            steps.append({"k": k, "t_k": schedule_time(weights, k), "t_star": grid[best],
                          "best_acc": float(scores[best])})
        state = odem_step(state, psi_k, oracle, weights, cfg.integration, cfg.method_params.gamma_override)

    retained = [1.0 - s["t_star"] for s in steps]
    reference = [(s["k"] - 1) / s["k"] for s in steps]
    rho = spearman(retained, reference)
    if math.isnan(rho):
        return ScheduleReport(steps, 0.0, True)
    return ScheduleReport(steps, rho, False)


__all__ = [
    "METHODS", "StreamConfig", "load_config", "ModelCache", "RunResult", "ScheduleReport",
    "stream_tasks", "pretrain_pool", "arrival_order", "utility_weights", "calibration_oracle",
    "run_stream", "write_run", "run_suite", "candidate_times", "sweep_step", "schedule_validation",
]
