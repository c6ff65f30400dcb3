"""Adam over named parameter blocks."""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Union

import numpy as np

from core_engine.config import AdamConfig


@dataclass
class AdamState:
    """First/second moments per block plus the shared step count."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], config: AdamConfig = AdamConfig()) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
            v={name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              lr: Union[float, Mapping[str, float]]) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update. `state` is advanced in place.

    Args:
        state: moments for exactly the blocks in `params`
        params: current values
        grads: gradients, same shapes
        lr: one learning rate, or one per block

    Returns:
        Updated copies of the blocks
    """
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != np.shape(value):
            raise ValueError(f"gradient for '{name}' has shape {grad.shape}, parameter {np.shape(value)}")
        if name not in state.m:
            state.m[name] = np.zeros_like(grad)
            state.v[name] = np.zeros_like(grad)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        rate = lr[name] if isinstance(lr, Mapping) else lr
        updated[name] = np.asarray(value, dtype=np.float64) - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated
