"""Transport field toward the incoming model and its loss-aware rectification.

The base field ``u = alpha(t) * (theta1 - theta)`` with ``alpha(t) = 1/(1-t)``
moves along the straight segment at constant speed.  The rectified field
splits ``u`` against the loss gradient ``g`` and damps the gradient-aligned
part by ``gamma``:

    v = u_perp + gamma * u_par

where ``gamma = 1`` whenever ``<g, u> <= 0`` and otherwise
``clip(delta_loss / <g, u>, 0, 1)`` with ``delta_loss = L(theta1) - L(theta0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .params import as_vector, check_finite, project_onto
from .tasks import LossOracle


@dataclass(frozen=True)
class StepDiagnostics:
    t: float
    gamma: float
    dot_gu: float
    align_ratio: float
    loss: float


@dataclass(frozen=True)
class FieldContext:
    theta0: np.ndarray
    theta1: np.ndarray
    oracle: LossOracle
    delta_loss: float
    loss0: float
    loss1: float

    @classmethod
    def build(cls, theta0, theta1, oracle: LossOracle) -> "FieldContext":
        """Evaluate both endpoint losses once; they are fixed for the whole merge."""
        theta0, theta1 = as_vector(theta0).copy(), as_vector(theta1).copy()
        if theta0.shape != theta1.shape or theta0.shape[0] != oracle.dim:
            raise DimensionError("endpoints and oracle must share one dimension")
        l0, l1 = oracle.loss(theta0), oracle.loss(theta1)
        return cls(theta0, theta1, oracle, l1 - l0, l0, l1)


def alpha(t: float) -> float:
    if not 0.0 <= t < 1.0:
        raise DomainError(f"alpha(t) requires 0 <= t < 1, got {t}")
    return 1.0 / (1.0 - t)


def base_field(ctx: FieldContext, theta, t: float) -> np.ndarray:
    return alpha(t) * (ctx.theta1 - as_vector(theta))


def gamma_from(delta_loss: float, dot_gu: float) -> float:
    if dot_gu <= 0.0:
        return 1.0
    return float(min(max(delta_loss / dot_gu, 0.0), 1.0))


def gamma(ctx: FieldContext, g, u) -> float:
    """Damping factor in [0, 1] for the gradient-aligned part of ``u``."""
    return gamma_from(ctx.delta_loss, float(np.dot(as_vector(g), as_vector(u))))


def rectified_velocity(ctx: FieldContext, theta, t: float, gamma_override: float | None = None):
    """Return ``(v, StepDiagnostics)`` at ``(theta, t)``.

    ``gamma_override`` pins gamma to a fixed value (1 recovers the base
    field, 0 keeps only the iso-loss component).
    """
    theta = as_vector(theta)
    loss, g = ctx.oracle.loss_and_grad(theta)
    u = base_field(ctx, theta, t)
    u_par, u_perp = project_onto(u, g)
    dot_gu = float(np.dot(g, u))
    gam = gamma_from(ctx.delta_loss, dot_gu) if gamma_override is None else float(gamma_override)
    if gam == 1.0:
        v = u.copy()
    else:
        v = u_perp + gam * u_par
    u_norm = float(np.linalg.norm(u))
    ratio = float(np.linalg.norm(u_par)) / u_norm if u_norm > 0 else 0.0
    check_finite(v, "velocity")
    return v, StepDiagnostics(float(t), gam, dot_gu, ratio, loss)
