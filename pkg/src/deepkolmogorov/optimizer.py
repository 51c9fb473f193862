"""Plain SGD and Adam with a piecewise-constant learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant rates: ``rates[k]`` applies while ``m <= breakpoints[k]``.

    The last rate applies after the last breakpoint, so
    ``len(rates) == len(breakpoints) + 1``.
    """

    breakpoints: tuple[int, ...] = (250_000, 500_000)
    rates: tuple[float, ...] = (1e-3, 1e-4, 1e-5)

    def __post_init__(self):
        if len(self.rates) != len(self.breakpoints) + 1:
            raise ValueError("need exactly one more rate than breakpoints")
        if any(r <= 0 for r in self.rates):
            raise ValueError("rates must be positive")
        if list(self.breakpoints) != sorted(self.breakpoints):
            raise ValueError("breakpoints must be increasing")

    @classmethod
    def constant(cls, rate: float) -> "Schedule":
        return cls((), (rate,))


def lr(schedule: Schedule, m: int) -> float:
    if m < 0:
        raise ValueError("step index must be non-negative")
    for bp, rate in zip(schedule.breakpoints, schedule.rates):
        if m <= bp:
            return rate
    return schedule.rates[-1]


def sgd_step(theta, grad, gamma: float) -> np.ndarray:
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape} vs gradient {grad.shape}")
    return theta - gamma * grad


@dataclass
class AdamState:
    first: np.ndarray
    second: np.ndarray
    step: int = 0
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    schedule: Schedule = field(default_factory=Schedule)

    @classmethod
    def zeros_like(cls, theta, **kwargs) -> "AdamState":
        theta = np.asarray(theta)
        return cls(np.zeros_like(theta), np.zeros_like(theta), **kwargs)

    def copy(self) -> "AdamState":
        return replace(self, first=self.first.copy(), second=self.second.copy())


def adam_step(state: AdamState, theta, grad, schedule: Schedule | None = None):
    """One Adam update; returns ``(new_state, new_theta)`` without mutating inputs.

    The rate is taken at the 0-based index of this update, the bias
    corrections use the 1-based count of applied updates. ``schedule``
    overrides the one stored in ``state``.
    """
    theta = np.asarray(theta)
    grad = np.asarray(grad, dtype=theta.dtype)
    if theta.shape != grad.shape or state.first.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, gradient {grad.shape}, state {state.first.shape}")
    gamma = lr(schedule or state.schedule, state.step)
    m = state.step + 1
    first = state.beta1 * state.first + (1.0 - state.beta1) * grad
    second = state.beta2 * state.second + (1.0 - state.beta2) * np.abs(grad) ** 2
    denom = np.sqrt(np.abs(second) / (1.0 - state.beta2**m)) + state.eps
    update = gamma * first / (1.0 - state.beta1**m) / denom
    return replace(state, first=first, second=second, step=m), theta - update.astype(theta.dtype, copy=False)
