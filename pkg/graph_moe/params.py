import math

import numpy as np

from graph_moe.autodiff.tape import Parameter
from graph_moe.rng import RngState

ATTENTION_INIT_RANGE = 0.1


def glorot_parameter(name: str, fan_in: int, fan_out: int, rng: RngState) -> Parameter:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(name, (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit)


def small_uniform_parameter(name: str, rows: int, cols: int, rng: RngState) -> Parameter:
    return Parameter(name, (2.0 * rng.uniform((rows, cols)) - 1.0) * ATTENTION_INIT_RANGE)


def constant_parameter(name: str, rows: int, cols: int, value: float) -> Parameter:
    # Norm gains/biases and residual logits are kept out of weight decay
    return Parameter(name, np.full((rows, cols), value, dtype=np.float64), decay=False)
