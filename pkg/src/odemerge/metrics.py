"""Accuracy bookkeeping, utility-weighted metrics and trajectory analyses."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .dynamics import FieldContext
from .errors import ArgumentError
from .integrator import IntegrationConfig, Trajectory, integrate
from .params import as_vector
from .tasks import accuracy


class AccuracyMatrix:
    """Lower-triangular a[k][i]: accuracy of Psi_k on task i (both 1-based)."""

    def __init__(self, n: int):
        self.n = int(n)
        self._a = np.full((self.n, self.n), np.nan)

    def set(self, k: int, i: int, value: float) -> None:
        if not 1 <= i <= k <= self.n:
            raise ArgumentError(f"entry ({k}, {i}) outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ArgumentError(f"accuracy {value} outside [0, 1]")
        self._a[k - 1, i - 1] = value

    def get(self, k: int, i: int) -> float:
        if not 1 <= i <= k <= self.n:
            raise ArgumentError(f"entry ({k}, {i}) outside the lower triangle")
        return float(self._a[k - 1, i - 1])

    def row(self, k: int) -> np.ndarray:
        return self._a[k - 1, :k].copy()

    def diagonal(self) -> np.ndarray:
        return np.diag(self._a).copy()

    def to_array(self) -> np.ndarray:
        return self._a.copy()

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for k, row in enumerate(rows, start=1):
            if len(row) < k:
                raise ArgumentError(f"row {k} has {len(row)} entries, needs {k}")
            for i in range(1, k + 1):
                m.set(k, i, float(row[i - 1]))
        return m

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"task_{i}" for i in range(1, self.n + 1)])
            for k in range(1, self.n + 1):
                w.writerow([k] + [repr(float(self._a[k - 1, i])) if i < k else "" for i in range(self.n)])


def _weights(weights, k):
    w = np.asarray(getattr(weights, "w", weights), dtype=float)
    if w.shape[0] < k:
        raise ArgumentError(f"need {k} weights, got {w.shape[0]}")
    return w[:k]


def acc_w(m: AccuracyMatrix, k: int, weights) -> float:
    """Utility-weighted accuracy of Psi_k over tasks 1..k."""
    w = _weights(weights, k)
    total = float(w.sum())
    if total <= 0:
        raise ArgumentError("weights over the first k tasks sum to zero")
    return float(np.dot(w, m.row(k)) / total)


def bwt_w(m: AccuracyMatrix, k: int, weights) -> float:
    """Utility-weighted backward transfer of Psi_k over tasks 1..k-1."""
    if k < 2:
        raise ArgumentError("backward transfer needs k >= 2")
    w = _weights(weights, k - 1)
    total = float(w.sum())
    if total <= 0:
        raise ArgumentError("weights over the first k-1 tasks sum to zero")
    drop = m.row(k)[: k - 1] - m.diagonal()[: k - 1]
    return float(np.dot(w, drop) / total)


def loss_barrier(oracle, path, grid_n: int = 201) -> float:
    """Max excess of the loss over the chord between endpoint losses.

    ``path`` is a :class:`Trajectory` covering [0, 1] or a ``(theta0, theta1)``
    pair for the straight segment.  The supremum is taken over ``grid_n``
    evenly spaced times including both endpoints.
    """
    if grid_n < 3:
        raise ArgumentError("grid_n must be >= 3")
    ts = np.linspace(0.0, 1.0, grid_n)
    if isinstance(path, Trajectory):
        at = path.at
    else:
        theta0, theta1 = as_vector(path[0]), as_vector(path[1])
        at = lambda t: theta0 + t * (theta1 - theta0)  # noqa: E731
    losses = np.array([oracle.loss(at(float(t))) for t in ts])
    excess = losses - (ts * losses[-1] + (1.0 - ts) * losses[0])
    return float(excess.max())


def envelope_constant(oracle, traj: Trajectory) -> float:
    """Half the largest second derivative of the loss along the piecewise-linear path."""
    worst = 0.0
    for (ta, xa), (tb, xb) in zip(traj.snapshots, traj.snapshots[1:]):
        vel = (xb - xa) / (tb - ta)
        worst = max(worst, abs(oracle.directional_curvature(xa, vel)))
    return 0.5 * worst


def max_alignment(diags) -> float:
    return max((d.align_ratio for d in diags), default=0.0)


@dataclass
class SweepResult:
    times: np.ndarray
    accuracies: np.ndarray  # shape (len(times), n_tasks)

    @property
    def mean(self) -> np.ndarray:
        return self.accuracies.mean(axis=1)

    @property
    def best_time(self) -> float:
        return float(self.times[int(np.argmax(self.mean))])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"task_{i}" for i in range(1, self.accuracies.shape[1] + 1)] + ["mean"])
            for t, row, m in zip(self.times, self.accuracies, self.mean):
                w.writerow([repr(float(t))] + [repr(float(a)) for a in row] + [repr(float(m))])


def trajectory_sweep(ctx: FieldContext, arch, eval_tasks, step_size: float = 0.05,
                     grid=None, gamma_override=None) -> SweepResult:
    """Integrate once to t=1 and score snapshots at ``grid`` (default 0, 0.1, ..., 1)."""
    if not eval_tasks:
        raise ArgumentError("eval_tasks must be non-empty")
    grid = tuple(np.round(np.linspace(0.0, 1.0, 11), 10)) if grid is None else tuple(grid)
    traj = integrate(ctx, 1.0, IntegrationConfig(step_size, grid), gamma_override)
    acc = np.array([[accuracy(theta, arch, task) for task in eval_tasks] for _, theta in traj.snapshots])
    return SweepResult(traj.times, acc)


def _hist(diags, attr, t_bins, v_bins):
    if t_bins < 1 or v_bins < 1:
        raise ArgumentError("bin counts must be >= 1")
    if not diags:
        return np.zeros((t_bins, v_bins), dtype=np.int64)
    t = np.array([d.t for d in diags])
    v = np.clip(np.array([getattr(d, attr) for d in diags]), 0.0, 1.0)
    counts, _, _ = np.histogram2d(t, v, bins=[t_bins, v_bins], range=[[0.0, 1.0], [0.0, 1.0]])
    return counts.astype(np.int64)


def gamma_histogram(diags, t_bins: int = 20, gamma_bins: int = 20) -> np.ndarray:
    """Counts of (t, gamma) pairs on [0,1]^2; rows index t, columns gamma."""
    return _hist(diags, "gamma", t_bins, gamma_bins)


def alignment_histogram(diags, t_bins: int = 20, ratio_bins: int = 20) -> np.ndarray:
    """Counts of (t, alignment ratio) pairs; ratios are clipped to [0, 1]."""
    return _hist(diags, "align_ratio", t_bins, ratio_bins)


def histogram_to_csv(counts: np.ndarray, path, value_name: str) -> None:
    t_bins, v_bins = counts.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_lo", "t_hi", f"{value_name}_lo", f"{value_name}_hi", "count"])
        for i in range(t_bins):
            for j in range(v_bins):
                w.writerow([repr(i / t_bins), repr((i + 1) / t_bins), repr(j / v_bins),
                            repr((j + 1) / v_bins), int(counts[i, j])])


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either series is constant.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("spearman needs two 1-D series of equal length")
    if x.shape[0] < 2:
        raise ArgumentError("spearman needs at least two points")
    rx, ry = rankdata(x) - (x.shape[0] + 1) / 2, rankdata(y) - (y.shape[0] + 1) / 2
    denom = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if denom == 0.0:
        return float("nan")
    return float(np.dot(rx, ry) / denom)
