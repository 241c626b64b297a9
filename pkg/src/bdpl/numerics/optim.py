"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    """Apply one Adam update to ``param`` in place using ``param.grad``."""
    if param.grad is None:
        raise ValueError(f"adam_step: parameter {param.name or ''} has no gradient")
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    param.value -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)
    return param, state


@dataclass
class Adam:
    """Adam over a named parameter collection, one state per tensor."""

    params: dict[str, Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.for_param(
                    p, learning_rate=self.learning_rate, beta1=self.beta1,
                    beta2=self.beta2, epsilon=self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            adam_step(p, self.states[name])
