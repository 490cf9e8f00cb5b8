"""Flat-parameter SGD and Adam steps used by the training loops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(RuntimeError):
    """Training produced a non-finite gradient or loss."""


def sgd_step(params: np.ndarray, gradient: np.ndarray, learning_rate: float) -> np.ndarray:
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(gradient)):
        raise DivergenceError("non-finite gradient")
    return params - learning_rate * gradient


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0)


def adam_step(
    params: np.ndarray,
    gradient: np.ndarray,
    state: AdamState,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """Standard bias-corrected Adam update; mutates ``state`` in place."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(gradient)):
        raise DivergenceError("non-finite gradient")
    state.step += 1
    state.first_moment = beta1 * state.first_moment + (1.0 - beta1) * gradient
    state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * gradient**2
    m_hat = state.first_moment / (1.0 - beta1**state.step)
    v_hat = state.second_moment / (1.0 - beta2**state.step)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
