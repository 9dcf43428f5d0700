"""Synthetic classification tasks, a small MLP, and the loss oracles.

Tasks are 2-D Gaussian mixtures.  All tasks in a stream share one class
count and one output head, so every task-adapted model lives in the same
parameter space.  Oracles expose ``loss``, ``grad`` and ``loss_and_grad``
over flat parameter vectors and are deterministic in their inputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from ._fallback import mlp_forward
from .errors import ArgumentError, DimensionError, FormatError, NumericError, TrainingError
from .params import ACTIVATIONS, ArchDescriptor, Checkpoint, as_vector

N_TRAIN = 600
N_TEST = 200


@dataclass(frozen=True)
class SyntheticTask:
    id: int
    seed: int
    class_count: int
    clusters_per_class: int
    separation: float
    offset: tuple = (0.0, 0.0)
    noise: float = 1.0
    X_train: np.ndarray = field(default=None, repr=False, compare=False)
    y_train: np.ndarray = field(default=None, repr=False, compare=False)
    X_test: np.ndarray = field(default=None, repr=False, compare=False)
    y_test: np.ndarray = field(default=None, repr=False, compare=False)

    def generator_params(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed,
            "class_count": self.class_count,
            "clusters_per_class": self.clusters_per_class,
            "separation": self.separation,
            "offset": list(self.offset),
            "noise": self.noise,
        }


def generate_task(seed, class_count=4, clusters_per_class=1, separation=3.0,
                  offset=(0.0, 0.0), noise=1.0, task_id=0) -> SyntheticTask:
    """Draw a 2-D Gaussian-mixture task (600 train / 200 test, each split class-balanced).

    Cluster centres sit on a circle of radius ``separation`` around
    ``offset`` with a seed-dependent rotation; slots are assigned to classes
    by a random permutation.  Each sample gets unit-scale isotropic noise
    times ``noise``.
    """
    if class_count < 2:
        raise ArgumentError("class_count must be >= 2")
    if clusters_per_class < 1:
        raise ArgumentError("clusters_per_class must be >= 1")
    if not separation > 0:
        raise ArgumentError("separation must be > 0")
    rng = np.random.default_rng(seed)
    n_slots = class_count * clusters_per_class
    angles = rng.uniform(0.0, 2 * math.pi) + 2 * math.pi * np.arange(n_slots) / n_slots
    slot_class = rng.permutation(n_slots) % class_count
    centres = np.asarray(offset, dtype=float) + separation * np.column_stack([np.cos(angles), np.sin(angles)])
    slots_by_class = [np.flatnonzero(slot_class == c) for c in range(class_count)]

    n = N_TRAIN + N_TEST
    labels = np.concatenate([rng.permutation(np.arange(N_TRAIN) % class_count),
                             rng.permutation(np.arange(N_TEST) % class_count)])
    pick = rng.integers(0, clusters_per_class, size=n)
    slot = np.array([slots_by_class[c][j] for c, j in zip(labels, pick)])
    X = centres[slot] + noise * rng.standard_normal((n, 2))
    return SyntheticTask(
        id=int(task_id), seed=int(seed), class_count=int(class_count),
        clusters_per_class=int(clusters_per_class), separation=float(separation),
        offset=tuple(float(v) for v in offset), noise=float(noise),
        X_train=X[:N_TRAIN], y_train=labels[:N_TRAIN].astype(np.int64),
        X_test=X[N_TRAIN:], y_test=labels[N_TRAIN:].astype(np.int64),
    )


def task_from_params(params: dict) -> SyntheticTask:
    return generate_task(
        params["seed"], params["class_count"], params["clusters_per_class"],
        params["separation"], tuple(params.get("offset", (0.0, 0.0))),
        params.get("noise", 1.0), params.get("id", 0),
    )


def save_task(task: SyntheticTask, path) -> None:
    """Store only the generator parameters; samples are regenerated on load."""
    Path(path).write_text(json.dumps(task.generator_params(), indent=2, sort_keys=True) + "\n")


def load_task(path) -> SyntheticTask:
    try:
        return task_from_params(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed task file ({exc})") from exc


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

def init_params(arch: ArchDescriptor, seed: int, scale: float = 1.0) -> np.ndarray:
    """Gaussian weights with variance ``scale**2 / fan_in``, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for s in arch.layer_shapes:
        if len(s) == 2:
            parts.append((scale / math.sqrt(s[0])) * rng.standard_normal(s[0] * s[1]))
        else:
            parts.append(np.zeros(s[0]))
    return np.concatenate(parts)


def logits(theta, arch: ArchDescriptor, X) -> np.ndarray:
    sizes = arch.mlp_sizes()
    return mlp_forward(as_vector(theta), np.asarray(X, dtype=float), sizes, ACTIVATIONS[arch.activation])[-1]


def accuracy(theta, arch: ArchDescriptor, task: SyntheticTask, split: str = "test") -> float:
    """Fraction of correct argmax predictions; ties go to the lowest class index."""
    X, y = (task.X_test, task.y_test) if split == "test" else (task.X_train, task.y_train)
    pred = np.argmax(logits(theta, arch, X), axis=1)
    return float(np.mean(pred == y))


def train_task_model(task: SyntheticTask, arch: ArchDescriptor, init: Checkpoint,
                     steps: int, lr: float, label: str | None = None) -> Checkpoint:
    """Full-batch gradient descent on the task's training split."""
    if init.arch != arch:
        raise ArgumentError("init checkpoint does not match arch")
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    sizes = arch.mlp_sizes()
    act = ACTIVATIONS[arch.activation]
    theta = np.array(init.params, dtype=np.float64)
    for step in range(steps):
        loss, g = kernels.mlp_loss_grad(theta, task.X_train, task.y_train, sizes, act)
        if not math.isfinite(loss) or not np.all(np.isfinite(g)):
            raise TrainingError(f"training diverged at step {step}", step=step)
        theta -= lr * g
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"training diverged at step {step}", step=step)
    return Checkpoint(arch, theta, label if label is not None else f"task{task.id}", task.seed)


# --------------------------------------------------------------------------
# calibration data and oracles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationSet:
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    source: np.ndarray = field(repr=False)
    capacity: int = 1024

    def __len__(self):
        return int(self.y.shape[0])


def build_calibration(tasks_seen, capacity: int = 1024, seed: int = 0) -> CalibrationSet:
    """Pool an equal share of each task's training split.

    Each task gets ``capacity // len(tasks_seen)`` samples drawn without
    replacement (the remainder goes one each to the earliest tasks); a task
    with fewer training samples than its share contributes all of them.
    """
    tasks_seen = list(tasks_seen)
    if not tasks_seen:
        raise ArgumentError("need at least one task")
    if capacity < len(tasks_seen):
        raise ArgumentError("capacity smaller than the number of tasks")
    base, rem = divmod(capacity, len(tasks_seen))
    rng = np.random.default_rng(seed)
    Xs, ys, srcs = [], [], []
    for pos, task in enumerate(tasks_seen):
        share = min(base + (1 if pos < rem else 0), task.y_train.shape[0])
        idx = rng.choice(task.y_train.shape[0], size=share, replace=False)
        Xs.append(task.X_train[idx])
        ys.append(task.y_train[idx])
        srcs.append(np.full(share, task.id, dtype=np.int64))
    return CalibrationSet(np.concatenate(Xs), np.concatenate(ys), np.concatenate(srcs), capacity)


class LossOracle:
    """Deterministic loss and gradient over flat parameter vectors."""

    dim: int

    def loss(self, theta) -> float:
        return self.loss_and_grad(theta, want_grad=False)[0]

    def grad(self, theta) -> np.ndarray:
        return self.loss_and_grad(theta)[1]

    def loss_and_grad(self, theta, want_grad=True):
        raise NotImplementedError

    def directional_curvature(self, theta, direction, eps=1e-5) -> float:
        """d^2/ds^2 L(theta + s*direction) at s=0, by central differences of the gradient."""
        theta, direction = as_vector(theta), as_vector(direction)
        gp = self.grad(theta + eps * direction)
        gm = self.grad(theta - eps * direction)
        return float(np.dot(gp - gm, direction) / (2 * eps))

    def _check(self, theta) -> np.ndarray:
        theta = as_vector(theta)
        if theta.shape[0] != self.dim:
            raise DimensionError(f"theta has length {theta.shape[0]}, oracle expects {self.dim}")
        if not np.all(np.isfinite(theta)):
            raise NumericError("non-finite parameters")
        return theta


class MLPOracle(LossOracle):
    """Mean cross-entropy of an MLP over a fixed sample set."""

    def __init__(self, arch: ArchDescriptor, X, y):
        self.arch = arch
        self.sizes = arch.mlp_sizes()
        self.activation = ACTIVATIONS[arch.activation]
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.y = np.ascontiguousarray(y, dtype=np.int64)
        self.dim = arch.size

    @classmethod
    def from_calibration(cls, arch, calib: CalibrationSet):
        return cls(arch, calib.X, calib.y)

    def loss_and_grad(self, theta, want_grad=True):
        theta = self._check(theta)
        loss, g = kernels.mlp_loss_grad(theta, self.X, self.y, self.sizes, self.activation, want_grad)
        if not math.isfinite(loss) or (g is not None and not np.all(np.isfinite(g))):
            raise NumericError("non-finite loss or gradient")
        return loss, g


class QuadraticOracle(LossOracle):
    """``0.5 * (theta - center)^T diag(curvature) (theta - center)``."""

    def __init__(self, center, curvature=None):
        self.center = as_vector(center).copy()
        self.dim = self.center.shape[0]
        if curvature is None:
            curvature = np.ones(self.dim)
        self.curvature = as_vector(curvature).copy()
        if self.curvature.shape != self.center.shape:
            raise DimensionError("curvature and center lengths differ")
        if not np.all(self.curvature > 0):
            raise ArgumentError("curvature entries must be > 0")

    def loss_and_grad(self, theta, want_grad=True):
        r = self._check(theta) - self.center
        ar = self.curvature * r
        loss = 0.5 * float(np.dot(r, ar))
        if not math.isfinite(loss):
            raise NumericError("non-finite quadratic loss")
        return loss, (ar if want_grad else None)

    def directional_curvature(self, theta, direction, eps=None) -> float:
        d = as_vector(direction)
        return float(np.dot(d, self.curvature * d))


class FunctionOracle(LossOracle):
    """Wraps plain callables; handy for analytic test landscapes."""

    def __init__(self, dim, loss_fn, grad_fn):
        self.dim = int(dim)
        self._loss, self._grad = loss_fn, grad_fn

    def loss_and_grad(self, theta, want_grad=True):
        theta = self._check(theta)
        loss = float(self._loss(theta))
        g = as_vector(self._grad(theta)) if want_grad else None
        if not math.isfinite(loss) or (g is not None and not np.all(np.isfinite(g))):
            raise NumericError("non-finite loss or gradient")
        return loss, g


def finite_diff_grad(oracle: LossOracle, theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time (2d loss calls)."""
    if not eps > 0:
        raise ArgumentError("eps must be > 0")
    theta = as_vector(theta)
    out = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.shape[0]):
        probe[i] = theta[i] + eps
        fp = oracle.loss(probe)
        probe[i] = theta[i] - eps
        fm = oracle.loss(probe)
        probe[i] = theta[i]
        out[i] = (fp - fm) / (2 * eps)
    return out
