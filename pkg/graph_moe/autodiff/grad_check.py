import logging
from typing import Callable, List, Optional, Sequence

import numpy as np

from graph_moe.autodiff.tape import AdNode, DimensionError, Tape, as_matrix, backward

logger = logging.getLogger(__name__)

ScalarBuilder = Callable[[Tape, List[AdNode]], AdNode]


def _evaluate(f: ScalarBuilder, inputs: Sequence[np.ndarray]) -> float:
    tape = Tape()
    out = f(tape, [tape.variable(x) for x in inputs])
    return float(out.value[0, 0])


def grad_check(
        f: ScalarBuilder,
        inputs: Sequence[np.ndarray],
        eps: float = 1e-5,
        max_coords: Optional[int] = None,
        seed: int = 0,
) -> float:
    """
    Compares reverse-mode gradients of f against central differences. f must build a 1x1 node from the given
    variables and must be deterministic. Returns the largest relative error over the checked coordinates.
    """
    inputs = [as_matrix(x) for x in inputs]
    tape = Tape()
    nodes = [tape.variable(x) for x in inputs]
    out = f(tape, nodes)
    if out.shape != (1, 1):
        raise DimensionError(f"grad_check needs a scalar output, got {out.shape}")
    backward(tape, out)
    analytic = [node.grad.copy() for node in nodes]

    picker = np.random.default_rng(seed)
    worst = 0.0
    for input_idx, x in enumerate(inputs):
        coords = list(np.ndindex(*x.shape))
        if max_coords is not None and len(coords) > max_coords:
            chosen = picker.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(chosen)]
        for coord in coords:
            shifted = [v.copy() for v in inputs]
            shifted[input_idx][coord] = x[coord] + eps
            upper = _evaluate(f, shifted)
            shifted[input_idx][coord] = x[coord] - eps
            lower = _evaluate(f, shifted)
            numeric = (upper - lower) / (2 * eps)
            error = abs(analytic[input_idx][coord] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, error)
    logger.debug("Gradient check over %s inputs, max relative error %.3e", len(inputs), worst)
    return worst
