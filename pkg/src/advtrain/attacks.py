"""l-infinity gradient-sign attacks: FGSM steps, clipping and BIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .model import Model, loss_and_grads
from .tensor import sign


@dataclass(frozen=True)
class AttackConfig:
    """Total budget ``epsilon``, per-step size ``step_size``, ``iterations`` steps."""

    epsilon: float
    step_size: float
    iterations: int = 1
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValidationError(f"only the linf norm is supported, got {self.norm!r}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.step_size <= self.epsilon + 1e-12:
            raise ValidationError(f"need 0 <= step_size ({self.step_size}) <= epsilon ({self.epsilon})")

    @classmethod
    def fgsm(cls, epsilon: float) -> "AttackConfig":
        return cls(epsilon, epsilon, 1)

    @classmethod
    def bim(cls, epsilon: float, iterations: int) -> "AttackConfig":
        """BIM with the even split ``step_size = epsilon / iterations``."""
        return cls(epsilon, epsilon / iterations, iterations)

    def describe(self) -> str:
        if self.iterations == 1 and self.step_size == self.epsilon:
            return f"fgsm(eps={self.epsilon:g})"
        return f"bim(eps={self.epsilon:g},step={self.step_size:g},n={self.iterations})"


@dataclass
class AdvState:
    """Where one example's adversarial image currently sits."""

    example_id: int
    origin: np.ndarray
    current: np.ndarray
    steps_taken: int = 0

    def linf(self) -> float:
        return float(np.abs(self.current.astype(np.float64) - self.origin).max(initial=0.0))


def input_gradient(model: Model, images: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the input images; parameters are not touched."""
    _, bundle, _ = loss_and_grads(model, images, labels, need_param_grads=False, need_input_grad=True)
    return bundle.input_grad


def fgsm_step(x: np.ndarray, grad: np.ndarray, step_size: float) -> np.ndarray:
    """``x + sign(grad) * step_size`` (no clipping)."""
    if x.shape != grad.shape:
        raise DimensionError(f"fgsm_step: x {x.shape} vs grad {grad.shape}", axes=("x", "grad"))
    return x + sign(grad).astype(x.dtype, copy=False) * x.dtype.type(step_size)


def budget_bounds(origin: np.ndarray, epsilon: float):
    eps = origin.dtype.type(epsilon)
    return np.maximum(origin - eps, 0), np.minimum(origin + eps, 1)


def clip_to_budget(x: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into ``[origin - epsilon, origin + epsilon]`` intersected with ``[0, 1]``."""
    if x.shape != origin.shape:
        raise DimensionError(f"clip_to_budget: x {x.shape} vs origin {origin.shape}", axes=("x", "origin"))
    lo, hi = budget_bounds(origin, epsilon)
    return np.minimum(np.maximum(x, lo), hi)


def bim(model: Model, images: np.ndarray, labels, config: AttackConfig, capture: bool = False):
    """Basic iterative method from ``images``.

    Each of ``config.iterations`` steps recomputes the input gradient at the
    current iterate, takes an FGSM step of ``config.step_size`` and clips to the
    ``config.epsilon`` budget. Returns ``(final, snapshots)``; ``snapshots`` holds
    every iterate (including the final one) when ``capture`` is set, else None.
    """
    origin = images.astype(model.dtype, copy=False)
    lo, hi = budget_bounds(origin, config.epsilon)
    x = origin
    snapshots = [] if capture else None
    for _ in range(config.iterations):
        grad = input_gradient(model, x, labels)
        x = np.minimum(np.maximum(fgsm_step(x, grad, config.step_size), lo), hi)
        if capture:
            snapshots.append(x)
    return x, snapshots


def fgsm(model: Model, images: np.ndarray, labels, epsilon: float) -> np.ndarray:
    return bim(model, images, labels, AttackConfig.fgsm(epsilon))[0]


def linf_distance(x: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Per-example ``max |x - origin|`` in float64."""
    diff = np.abs(x.astype(np.float64) - origin.astype(np.float64))
    return diff.reshape(len(diff), -1).max(axis=1)


def check_budget(x: np.ndarray, origin: np.ndarray, epsilon: float, tol: float = 1e-6) -> None:
    """Raise if any example leaves the epsilon-ball (plus ``tol``) or the [0, 1] box."""
    if x.size == 0:
        return
    worst = float(linf_distance(x, origin).max())
    if worst > epsilon + tol:
        raise AssertionError(f"perturbation {worst} exceeds budget {epsilon}")
    if x.min() < 0 or x.max() > 1:
        raise AssertionError(f"adversarial values outside [0, 1]: [{x.min()}, {x.max()}]")
