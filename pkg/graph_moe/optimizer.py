from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from graph_moe.autodiff.tape import DimensionError, Parameter


@dataclass
class OptimizerState:
    """AdamW moments and step count, keyed by parameter identity."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[int, np.ndarray] = field(default_factory=dict)


def optimizer_step(
        state: OptimizerState,
        params: Sequence[Parameter],
        grads: Sequence[np.ndarray],
        lr: float,
        weight_decay: float,
) -> None:
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    bias_c1 = 1.0 - state.beta1 ** state.step
    bias_c2 = 1.0 - state.beta2 ** state.step
    for param, grad in zip(params, grads):
        if grad.shape != param.shape:
            raise DimensionError(f"Gradient {grad.shape} does not match {param}")
        key = id(param)
        first = state.first_moments.setdefault(key, np.zeros_like(param.value))
        second = state.second_moments.setdefault(key, np.zeros_like(param.value))
        # decoupled decay, applied before the moment update
        if param.decay and weight_decay:
            param.value -= lr * weight_decay * param.value
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad
        param.value -= lr * (first / bias_c1) / (np.sqrt(second / bias_c2) + state.eps)
