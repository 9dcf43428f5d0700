"""Continual merge rules: ODE-M and four utility-aware baselines.

Each ``*_step`` is a pure transition ``MergeState -> MergeState``.  Steps are
1-based: after step ``k`` the state holds the deployed model Psi_k built from
``psi_1..psi_k``.  The first step of every method deploys ``psi_1`` as-is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import FieldContext
from .errors import ArgumentError, DimensionError, NumericError
from .integrator import IntegrationConfig, Trajectory, integrate
from .params import ArchDescriptor, as_vector

METHODS = ("odem", "swa", "ta", "ties", "opcm")
METHOD_ALIASES = {
    "ode-m": "odem", "odem": "odem",
    "c.swa": "swa", "swa": "swa",
    "c.ta": "ta", "ta": "ta",
    "c.ties": "ties", "ties": "ties",
    "opcm-lite": "opcm", "opcm": "opcm",
}


def canonical_method(name: str) -> str:
    try:
        return METHOD_ALIASES[name.strip().lower()]
    except KeyError:
        raise ArgumentError(f"unknown merge method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass(frozen=True)
class UtilityWeights:
    w: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if any(not math.isfinite(x) or x < 0 for x in w):
            raise ArgumentError("utility weights must be finite and non-negative")
        if w and not any(x > 0 for x in w):
            raise ArgumentError("at least one utility weight must be positive")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, n: int) -> "UtilityWeights":
        return cls(tuple([1.0 / n] * n))

    def prefix_sum(self, k: int) -> float:
        return float(sum(self.w[:k]))

    def __len__(self):
        return len(self.w)


@dataclass(frozen=True)
class MethodParams:
    lambda_ta: float = 1.0
    ties_keep_fraction: float = 0.2
    lambda_ties: float = 1.0
    opcm_rule: str = "sqrt_k"
    opcm_constant: float = 1.0
    gamma_override: float | None = None

    def __post_init__(self):
        for name in ("lambda_ta", "lambda_ties", "opcm_constant"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ArgumentError(f"{name} must be finite and > 0")
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ArgumentError("ties_keep_fraction must be in (0, 1]")
        if self.opcm_rule not in ("sqrt_k", "constant"):
            raise ArgumentError("opcm_rule must be 'sqrt_k' or 'constant'")
        if self.gamma_override is not None and not 0.0 <= self.gamma_override <= 1.0:
            raise ArgumentError("gamma_override must lie in [0, 1]")

    def opcm_lambda(self, k: int) -> float:
        return math.sqrt(k) if self.opcm_rule == "sqrt_k" else self.opcm_constant


@dataclass(frozen=True)
class MergeState:
    method: str
    psi: np.ndarray | None
    k: int
    W: float
    acc_update: np.ndarray | None
    psi0: np.ndarray
    arch: ArchDescriptor | None = None
    trajectories: tuple = field(default=(), repr=False)


def init_state(method: str, psi0, arch: ArchDescriptor | None = None) -> MergeState:
    psi0 = as_vector(psi0).copy()
    return MergeState(canonical_method(method), None, 0, 0.0, None, psi0, arch)


def utility_ratio(weights: UtilityWeights, k: int) -> float:
    """Share of the incoming task in the accumulated utility, ``w_k / W_k``."""
    if not 1 <= k <= len(weights):
        raise ArgumentError(f"k={k} outside 1..{len(weights)}")
    total = weights.prefix_sum(k)
    if total <= 0:
        raise ArgumentError("accumulated utility is zero")
    return weights.w[k - 1] / total


def schedule_time(weights: UtilityWeights, k: int) -> float:
    """Operating time for merge step ``k >= 2``; equals ``1/k`` under equal utilities."""
    if k < 2:
        raise ArgumentError("the schedule is defined for k >= 2")
    return utility_ratio(weights, k)


def _first(state: MergeState, psi_k, weights, acc_update=None) -> MergeState:
    psi_k = as_vector(psi_k).copy()
    return replace(state, psi=psi_k, k=1, W=weights.prefix_sum(1), acc_update=acc_update)


def _check_incoming(state: MergeState, psi_k, weights) -> np.ndarray:
    psi_k = as_vector(psi_k)
    if psi_k.shape != state.psi0.shape:
        raise DimensionError("incoming model does not match the pre-trained dimension")
    if state.k + 1 > len(weights):
        raise ArgumentError("no utility weight for the incoming task")
    return psi_k


def _finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("merged model has non-finite entries")
    return x


def odem_step(state: MergeState, psi_k, oracle, weights: UtilityWeights,
              cfg: IntegrationConfig | None = None, gamma_override: float | None = None) -> MergeState:
    """Integrate from the deployed model toward ``psi_k`` and stop at the scheduled time."""
    psi_k = _check_incoming(state, psi_k, weights)
    if state.k == 0:
        return _first(state, psi_k, weights)
    k = state.k + 1
    ctx = FieldContext.build(state.psi, psi_k, oracle)
    traj = integrate(ctx, schedule_time(weights, k), cfg, gamma_override)
    return replace(state, psi=_finite(traj.final), k=k, W=weights.prefix_sum(k),
                   trajectories=state.trajectories + (traj,))


def swa_step(state: MergeState, psi_k, weights: UtilityWeights) -> MergeState:
    psi_k = _check_incoming(state, psi_k, weights)
    if state.k == 0:
        return _first(state, psi_k, weights)
    k = state.k + 1
    eta = utility_ratio(weights, k)
    psi = (1.0 - eta) * state.psi + eta * psi_k
    return replace(state, psi=_finite(psi), k=k, W=weights.prefix_sum(k))


def task_arith_step(state: MergeState, psi_k, weights: UtilityWeights,
                    params: MethodParams = MethodParams()) -> MergeState:
    psi_k = _check_incoming(state, psi_k, weights)
    delta = psi_k - state.psi0
    if state.k == 0:
        return _first(state, psi_k, weights, acc_update=delta)
    k = state.k + 1
    eta = utility_ratio(weights, k)
    acc = (1.0 - eta) * state.acc_update + eta * delta
    psi = state.psi0 + params.lambda_ta * acc
    return replace(state, psi=_finite(psi), k=k, W=weights.prefix_sum(k), acc_update=acc)


def _trim(x: np.ndarray, keep_fraction: float) -> np.ndarray:
    n_keep = int(math.ceil(keep_fraction * x.shape[0] - 1e-12))
    if n_keep >= x.shape[0]:
        return x.copy()
    order = np.argsort(-np.abs(x), kind="stable")
    out = np.zeros_like(x)
    keep = order[:n_keep]
    out[keep] = x[keep]
    return out


def ties_merge_pair(a, b, keep_fraction: float = 0.2) -> np.ndarray:
    """TIES merge of two vectors: magnitude trim, sign election, disjoint mean."""
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ArgumentError("keep_fraction must be in (0, 1]")
    stacked = np.stack([_trim(a, keep_fraction), _trim(b, keep_fraction)])
    elected = np.sign(stacked.sum(axis=0))
    match = (np.sign(stacked) == elected) & (elected != 0)
    count = match.sum(axis=0)
    total = np.where(match, stacked, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_step(state: MergeState, psi_k, weights: UtilityWeights,
              params: MethodParams = MethodParams()) -> MergeState:
    psi_k = _check_incoming(state, psi_k, weights)
    if state.k == 0:
        return _first(state, psi_k, weights)
    k = state.k + 1
    eta = utility_ratio(weights, k)
    prev = state.psi - state.psi0
    merged = ties_merge_pair((1.0 - eta) * prev, eta * (psi_k - state.psi0), params.ties_keep_fraction)
    psi = state.psi0 + params.lambda_ties * merged
    return replace(state, psi=_finite(psi), k=k, W=weights.prefix_sum(k), acc_update=merged)


def blockwise_reject(delta, basis, blocks=None) -> np.ndarray:
    """Remove from ``delta`` its component along ``basis``, separately per block.

    Blocks where ``basis`` is zero pass through unchanged.
    """
    delta, basis = as_vector(delta), as_vector(basis)
    if delta.shape != basis.shape:
        raise DimensionError("length mismatch")
    out = delta.copy()
    for sl in blocks or [slice(0, delta.shape[0])]:
        bb = float(np.dot(basis[sl], basis[sl]))
        if bb > 0.0:
            out[sl] = delta[sl] - (float(np.dot(delta[sl], basis[sl])) / bb) * basis[sl]
    return out


def opcm_lite_step(state: MergeState, psi_k, weights: UtilityWeights,
                   params: MethodParams = MethodParams()) -> MergeState:
    psi_k = _check_incoming(state, psi_k, weights)
    delta = psi_k - state.psi0
    if state.k == 0:
        return _first(state, psi_k, weights, acc_update=delta)
    k = state.k + 1
    eta = utility_ratio(weights, k)
    blocks = state.arch.blocks() if state.arch is not None else None
    delta_hat = blockwise_reject(delta, state.acc_update, blocks)
    acc = (1.0 - eta) * state.acc_update + eta * delta_hat
    psi = state.psi0 + acc / params.opcm_lambda(k)
    return replace(state, psi=_finite(psi), k=k, W=weights.prefix_sum(k), acc_update=acc)


def merge_step(state: MergeState, psi_k, weights: UtilityWeights, params: MethodParams = MethodParams(),
               oracle=None, cfg: IntegrationConfig | None = None) -> MergeState:
    """Dispatch on ``state.method``; ODE-M additionally needs a loss oracle."""
    m = state.method
    if m == "odem":
        if oracle is None and state.k > 0:
            raise ArgumentError("ODE-M needs a loss oracle")
        return odem_step(state, psi_k, oracle, weights, cfg, params.gamma_override)
    if m == "swa":
        return swa_step(state, psi_k, weights)
    if m == "ta":
        return task_arith_step(state, psi_k, weights, params)
    if m == "ties":
        return ties_step(state, psi_k, weights, params)
    return opcm_lite_step(state, psi_k, weights, params)


def last_trajectory(state: MergeState) -> Trajectory | None:
    return state.trajectories[-1] if state.trajectories else None
