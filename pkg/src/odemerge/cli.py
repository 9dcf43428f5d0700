"""Command-line entry point: ``odemerge <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dynamics import FieldContext
from .errors import FormatError, OdeMergeError
from .harness import (ModelCache, StreamConfig, arrival_order, calibration_oracle, candidate_times,
                      load_config, run_stream, run_suite, schedule_validation, stream_tasks,
                      utility_weights, write_run)
from .integrator import IntegrationConfig
from .mergers import METHODS, init_state, merge_step
from .metrics import histogram_to_csv, trajectory_sweep
from .params import save_checkpoint
from .tasks import save_task


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with stream settings")
    common.add_argument("--method", help=f"merge method ({', '.join(METHODS)})")
    common.add_argument("--tasks", type=int, help="number of tasks in the stream")
    common.add_argument("--step-size", type=float, help="Euler step size")
    common.add_argument("--calib", type=int, help="calibration set capacity")
    common.add_argument("--seed", type=int, help="permutation seed")
    common.add_argument("--utility", choices=("uniform", "random"), help="utility weight mode")
    common.add_argument("--gamma-override", type=float, help="pin gamma to a constant in [0, 1]")
    common.add_argument("--out", default="results", help="output directory (default: results)")

    p = argparse.ArgumentParser(prog="odemerge", description="Continual model merging along rectified ODE paths.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-tasks", parents=[common], help="write task files for the stream")
    sub.add_parser("train", parents=[common], help="train psi0 and all task models, write checkpoints")
    sub.add_parser("merge", parents=[common], help="run one stream")
    s = sub.add_parser("suite", parents=[common], help="run several permutations and aggregate")
    s.add_argument("--permutations", type=int, default=1)
    s.add_argument("--draws", type=int, default=1, help="utility draws per permutation")
    s.add_argument("--methods", help="comma-separated method list (default: --method)")
    s.add_argument("--workers", type=int, default=1)
    w = sub.add_parser("sweep", parents=[common], help="score the trajectory of one merge step over t in [0, 1]")
    w.add_argument("--step", type=int, help="merge step k >= 2 (default: last)")
    w.add_argument("--interval", type=float, default=0.1)
    sub.add_parser("stats", parents=[common], help="gamma and alignment histograms of an ODE-M stream")
    v = sub.add_parser("validate-schedule", parents=[common], help="best operating time per step vs the schedule")
    v.add_argument("--interval", type=float, default=0.05)
    return p


def _config(args) -> StreamConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
        except FormatError as exc:
            msg = str(exc)
            raise UsageError(msg if args.config in msg else f"{args.config}: {msg}") from exc
        except OdeMergeError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    else:
        cfg = StreamConfig()
    try:
        return cfg.replace(**_overrides(args, cfg))
    except OdeMergeError as exc:
        raise UsageError(str(exc)) from exc


def _overrides(args, cfg) -> dict:
    kw = {}
    if args.method is not None:
        kw["method"] = args.method
    if args.tasks is not None:
        kw["n_tasks"] = args.tasks
    if args.step_size is not None:
        kw["integration"] = IntegrationConfig(args.step_size, cfg.integration.record_grid)
    if args.calib is not None:
        kw["calibration_capacity"] = args.calib
    if args.seed is not None:
        kw["permutation_seed"] = args.seed
    if args.utility is not None:
        kw["utility_mode"] = args.utility
    if args.gamma_override is not None:
        kw["method_params"] = replace(cfg.method_params, gamma_override=args.gamma_override)
    return kw


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _gen_tasks(cfg, out, args):
    for task in stream_tasks(cfg):
        save_task(task, out / f"task_{task.id:02d}.json")
    print(f"wrote {cfg.n_tasks} task files to {out}")


def _train(cfg, out, args):
    cache = ModelCache()
    save_checkpoint(cache.psi0(cfg), out / "psi0.odem")
    for task in stream_tasks(cfg):
        save_checkpoint(cache.model(cfg, task), out / f"task_{task.id:02d}.odem")
    print(f"wrote psi0 and {cfg.n_tasks} task checkpoints to {out}")


def _merge(cfg, out, args):
    r = run_stream(cfg)
    write_run(r, out)
    print(f"{cfg.method}: final ACC_w {r.final_acc:.4f}"
          + (f", BWT_w {r.final_bwt:+.4f}" if r.final_bwt is not None else ""))


def _suite(cfg, out, args):
    methods = args.methods.split(",") if args.methods else [cfg.method]
    report, _ = run_suite(cfg, args.permutations, args.draws, methods, workers=args.workers)
    _dump(report, out / "aggregate.json")
    for m, v in report["methods"].items():
        a = v["final_acc_w"]
        print(f"{m}: ACC_w {a['mean']:.4f} +- {a['std']:.4f} over {a['n']} runs")


def _prefix_state(cfg, cache, k):
    """Deployed ODE-M state after k-1 steps, plus the arrived tasks."""
    arrived = [stream_tasks(cfg)[i] for i in arrival_order(cfg)]
    weights = utility_weights(cfg)
    state = init_state(cfg.method, cache.psi0(cfg).params, cfg.arch)
    for j in range(1, k):
        oracle = calibration_oracle(cfg, arrived, j) if (cfg.method == "odem" and j > 1) else None
        state = merge_step(state, cache.model(cfg, arrived[j - 1]).params, weights, cfg.method_params,
                           oracle, cfg.integration)
    return state, arrived


def _sweep(cfg, out, args):
    k = args.step if args.step is not None else cfg.n_tasks
    if not 2 <= k <= cfg.n_tasks:
        raise UsageError(f"--step must be in 2..{cfg.n_tasks}")
    cache = ModelCache()
    state, arrived = _prefix_state(cfg, cache, k)
    ctx = FieldContext.build(state.psi, cache.model(cfg, arrived[k - 1]).params,
                             calibration_oracle(cfg, arrived, k))
    res = trajectory_sweep(ctx, cfg.arch, arrived[:k], cfg.integration.step_size,
                           candidate_times(args.interval), cfg.method_params.gamma_override)
    res.to_csv(out / "sweep.csv")
    print(f"step {k}: best mean accuracy at t={res.best_time:.2f}")


def _stats(cfg, out, args):
    r = run_stream(cfg.replace(method="odem"))
    summary = r.summary()
    histogram_to_csv(np.array(summary["gamma_histogram"]), out / "gamma_hist.csv", "gamma")
    histogram_to_csv(np.array(summary["alignment_histogram"]), out / "ratio_hist.csv", "ratio")
    _dump({"rho_hat": summary["rho_hat"], "n_steps": summary["n_steps"],
           "gamma_below_one_fraction": summary["gamma_below_one_fraction"]}, out / "stats.json")
    print(f"{summary['n_steps']} Euler steps, rho_hat {summary['rho_hat']:.4f}, "
          f"gamma<1 on {100 * summary['gamma_below_one_fraction']:.1f}%")


def _validate(cfg, out, args):
    rep = schedule_validation(cfg, interval=args.interval)
    _dump(rep.to_dict(), out / "schedule.json")
    flag = " (degenerate: constant best times)" if rep.degenerate else ""
    print(f"spearman(1 - t*, (k-1)/k) = {rep.correlation:.4f}{flag}")


COMMANDS = {"gen-tasks": _gen_tasks, "train": _train, "merge": _merge, "suite": _suite,
            "sweep": _sweep, "stats": _stats, "validate-schedule": _validate}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except UsageError as exc:
        print(f"odemerge: error: {exc}", file=sys.stderr)
        return 2
    except (OdeMergeError, OSError) as exc:
        print(f"odemerge: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
