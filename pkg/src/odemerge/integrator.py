"""Explicit Euler integration of the rectified field from theta0 toward theta1."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import FieldContext, StepDiagnostics, rectified_velocity
from .errors import ArgumentError, NumericError
from .params import ArchDescriptor, Checkpoint, save_checkpoint

DIAG_COLUMNS = ("t", "loss", "gamma", "dot_gu", "align_ratio")


@dataclass(frozen=True)
class IntegrationConfig:
    step_size: float = 0.05
    record_grid: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.step_size <= 0.5:
            raise ArgumentError(f"step_size must be in (0, 0.5], got {self.step_size}")
        if self.record_grid is not None:
            grid = tuple(float(t) for t in self.record_grid)
            if any(not 0.0 <= t <= 1.0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ArgumentError("record_grid must be strictly increasing within [0, 1]")
            object.__setattr__(self, "record_grid", grid)


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    final: np.ndarray | None = None
    final_t: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.snapshots])

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation between recorded snapshots."""
        times = self.times
        if not times[0] <= t <= times[-1]:
            raise ArgumentError(f"t={t} outside recorded range [{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, t, side="left"))
        if times[j] == t:
            return self.snapshots[j][1].copy()
        (ta, xa), (tb, xb) = self.snapshots[j - 1], self.snapshots[j]
        return xa + ((t - ta) / (tb - ta)) * (xb - xa)

    def diagnostics_rows(self):
        for d in self.diagnostics:
            yield (d.t, d.loss, d.gamma, d.dot_gu, d.align_ratio)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIAG_COLUMNS)
            for row in self.diagnostics_rows():
                w.writerow([repr(float(v)) for v in row])


def dump_snapshots(traj: Trajectory, arch: ArchDescriptor, out_dir, prefix="theta") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, theta in traj.snapshots:
        p = out_dir / f"{prefix}_t{t:.4f}.odem"
        save_checkpoint(Checkpoint(arch, theta, f"{prefix}@{t:.4f}"), p)
        paths.append(p)
    return paths


def _step_times(t_target: float, h: float) -> list[float]:
    n_full = int(math.floor(t_target / h + 1e-9))
    times = [i * h for i in range(1, n_full + 1)]
    if times and abs(times[-1] - t_target) <= 1e-9:
        times[-1] = t_target
    elif t_target - (times[-1] if times else 0.0) > 0:
        times.append(t_target)
    return times


def integrate(ctx: FieldContext, t_target: float, cfg: IntegrationConfig | None = None,
              gamma_override: float | None = None) -> Trajectory:
    """Euler-integrate the rectified field from ``ctx.theta0`` up to ``t_target``.

    Steps have size ``cfg.step_size``; the last one is shortened to land on
    ``t_target``.  For ``t_target == 1`` the step that would reach t=1 is
    replaced by an exact jump to ``ctx.theta1``.  Without a record grid a
    snapshot is kept after every step; with one, each grid time is linearly
    interpolated inside the step that reaches it (grid times past
    ``t_target`` are skipped).
    """
    cfg = cfg or IntegrationConfig()
    if not 0.0 < t_target <= 1.0:
        raise ArgumentError(f"t_target must be in (0, 1], got {t_target}")
    if gamma_override is not None and not 0.0 <= gamma_override <= 1.0:
        raise ArgumentError("gamma_override must lie in [0, 1]")

    grid = list(cfg.record_grid) if cfg.record_grid is not None else None
    theta = ctx.theta0.copy()
    t = 0.0
    traj = Trajectory()
    gi = 0
    if grid is None:
        traj.snapshots.append((0.0, theta.copy()))
    else:
        while gi < len(grid) and grid[gi] == 0.0:
            traj.snapshots.append((0.0, theta.copy()))
            gi += 1

    for step, t_next in enumerate(_step_times(t_target, cfg.step_size)):
        try:
            v, diag = rectified_velocity(ctx, theta, t, gamma_override)
        except NumericError as exc:
            raise NumericError(f"step {step} (t={t:.6g}): {exc}") from exc
        traj.diagnostics.append(diag)
        if t_next == 1.0:
            new_theta = ctx.theta1.copy()
        else:
            new_theta = theta + (t_next - t) * v
            if not np.all(np.isfinite(new_theta)):
                raise NumericError(f"non-finite parameters after step {step} (t={t_next:.6g})")
        if grid is None:
            traj.snapshots.append((t_next, new_theta.copy()))
        else:
            while gi < len(grid) and grid[gi] <= t_next + 1e-12:
                s = grid[gi]
                if abs(s - t_next) <= 1e-12:
                    snap = new_theta.copy()
                else:
                    snap = theta + ((s - t) / (t_next - t)) * (new_theta - theta)
                traj.snapshots.append((s, snap))
                gi += 1
        theta, t = new_theta, t_next

    traj.final = theta
    traj.final_t = t
    return traj


def integrate_with_gamma_override(ctx, t_target, cfg, gamma_fixed: float) -> Trajectory:
    return integrate(ctx, t_target, cfg, gamma_override=gamma_fixed)
