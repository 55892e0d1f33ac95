"""Stretched, clipped Gumbel-sigmoid ("hard concrete") gates.

A gate with logit ``beta``, temperature ``tau`` and stretch bounds
``a < 0 < 1 < b`` is sampled as::

    u     ~ Uniform(0, 1)
    relax = sigmoid((log u - log(1 - u) + beta) / tau)
    strch = a + (b - a) * relax
    gate  = min(1, max(0, strch))

so it is exactly 0 or exactly 1 with positive probability. The chance of a
nonzero gate has the closed form ``sigmoid(beta - tau * log(-a / b))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor, as_tensor, clip, sigmoid

DEFAULT_A = -0.1
DEFAULT_B = 1.1
TAU_START = 10.0
TAU_END = 0.1
BETA_INIT = 0.5


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass(frozen=True)
class GateState:
    beta: float
    tau_g: float = TAU_START
    a: float = DEFAULT_A
    b: float = DEFAULT_B

    def __post_init__(self):
        if not (self.a < 0.0 < 1.0 < self.b):
            raise ValueError(f"stretch bounds must satisfy a < 0 < 1 < b, got a={self.a}, b={self.b}")
        if not self.tau_g > 0.0:
            raise ValueError(f"temperature must be positive, got {self.tau_g}")

    def with_beta(self, beta: float) -> "GateState":
        return replace(self, beta=beta)


@dataclass(frozen=True)
class GateSample:
    uniform_draw: float
    relaxed: float
    stretched: float
    gate: float


def draw_open_uniform(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1); exact endpoints are redrawn."""
    u = rng.random(size)
    if size is None:
        while u <= 0.0 or u >= 1.0:
            u = rng.random()
        return float(u)
    bad = (u <= 0.0) | (u >= 1.0)
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return u


def gate_from_uniform(u: float, state: GateState) -> GateSample:
    relaxed = _logistic((math.log(u) - math.log1p(-u) + state.beta) / state.tau_g)
    stretched = state.a + (state.b - state.a) * relaxed
    return GateSample(u, relaxed, stretched, min(1.0, max(0.0, stretched)))


def sample_gate(state: GateState, rng: np.random.Generator) -> GateSample:
    return gate_from_uniform(draw_open_uniform(rng), state)


def zero_threshold(a: float = DEFAULT_A, b: float = DEFAULT_B) -> float:
    """Largest relaxed value that still yields an exactly-zero gate."""
    return -a / (b - a)


def one_threshold(a: float = DEFAULT_A, b: float = DEFAULT_B) -> float:
    """Smallest relaxed value that yields an exactly-one gate."""
    return (1.0 - a) / (b - a)


def activation_probability(state: GateState) -> float:
    """P(gate != 0) for a single gate."""
    return _logistic(state.beta - state.tau_g * math.log(-state.a / state.b))


def activation_probability_tensor(beta: Tensor, tau_g: float, a: float = DEFAULT_A,
                                  b: float = DEFAULT_B) -> Tensor:
    """Differentiable elementwise P(gate != 0) over an array of logits."""
    return sigmoid(as_tensor(beta) - tau_g * math.log(-a / b))


def sample_gates(
    beta: Tensor,
    tau_g: float,
    rng: np.random.Generator,
    a: float = DEFAULT_A,
    b: float = DEFAULT_B,
    uniform: np.ndarray | None = None,
) -> Tensor:
    """One gate per entry of ``beta``; differentiable in ``beta`` through the relaxation.

    No straight-through estimator: where the stretched value falls outside
    (0, 1) the gradient is exactly zero.
    """
    beta = as_tensor(beta)
    u = draw_open_uniform(rng, beta.shape) if uniform is None else np.asarray(uniform, dtype=np.float64)
    noise = np.log(u) - np.log1p(-u)
    relaxed = sigmoid((beta + noise) * (1.0 / tau_g))
    return clip(relaxed * (b - a) + a, 0.0, 1.0)


def init_beta_for_probability(p: float, tau_g: float = TAU_START, a: float = DEFAULT_A,
                              b: float = DEFAULT_B) -> float:
    """Logit giving activation probability ``p`` at temperature ``tau_g``."""
    return math.log(p / (1.0 - p)) + tau_g * math.log(-a / b)


# -- temperature schedules ----------------------------------------------------
Schedule = Callable[[int, int], float]


def linear_schedule(start: float = TAU_START, end: float = TAU_END) -> Schedule:
    def schedule(step: int, total_steps: int) -> float:
        return start + (end - start) * (step / total_steps)

    return schedule


def anneal_temperature(step: int, total_steps: int, schedule: Schedule | None = None) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    schedule = schedule or linear_schedule()
    return schedule(step, total_steps)
