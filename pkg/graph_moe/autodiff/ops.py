import enum
import math
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from graph_moe.autodiff.tape import AdNode, AutodiffException, DimensionError, DomainError, Tape
from graph_moe.rng import RngState

LEAKY_RELU_SLOPE = 0.2
GELU_COEFF = math.sqrt(2.0 / math.pi)
GUMBEL_EPS = 1e-12


class EmptyMaskError(DomainError):
    pass


class ElementwiseKind(enum.Enum):
    ADD = "add"
    SUB = "sub"
    HADAMARD = "hadamard"
    SCALE = "scale"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    SWISH = "swish"
    GELU = "gelu"
    LOG = "log"
    EXP = "exp"

    @property
    def is_binary(self) -> bool:
        return self in (ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.HADAMARD)


def _tape_of(*nodes: AdNode) -> Tape:
    tape = nodes[0].tape
    for node in nodes[1:]:
        if node.tape is not tape:
            raise AutodiffException("Operands belong to different tapes")
    return tape


def _require_same_shape(op_name: str, a: AdNode, b: AdNode) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: AdNode, b: AdNode) -> AdNode:
    tape = _tape_of(a, b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    a_val, b_val = a.value, b.value
    return tape.record(a_val @ b_val, [a, b], lambda g: (g @ b_val.T, a_val.T @ g))


def spmm(s: sp.csr_matrix, d: AdNode) -> AdNode:
    if s.shape[1] != d.rows:
        raise DimensionError(f"spmm: {s.shape} @ {d.shape}")
    s_t = s.T.tocsr()
    value = np.asarray(s @ d.value)
    return d.tape.record(value, [d], lambda g: (np.asarray(s_t @ g),))


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_COEFF * (x + 0.044715 * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = GELU_COEFF * (x + 0.044715 * x ** 3)
    tanh_inner = np.tanh(inner)
    d_inner = GELU_COEFF * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + tanh_inner) + 0.5 * x * (1.0 - tanh_inner ** 2) * d_inner


def _scale(a: AdNode, factor: Union[AdNode, float]) -> AdNode:
    a_val = a.value
    if isinstance(factor, AdNode):
        tape = _tape_of(a, factor)
        if factor.shape != (1, 1):
            raise DimensionError(f"scale: factor must be 1x1, got {factor.shape}")
        f_val = factor.value[0, 0]
        return tape.record(
            a_val * f_val,
            [a, factor],
            lambda g: (g * f_val, np.array([[np.sum(g * a_val)]])),
        )
    f_val = float(factor)
    return a.tape.record(a_val * f_val, [a], lambda g: (g * f_val,))


def elementwise(kind: ElementwiseKind, a: AdNode, b: Optional[Union[AdNode, float]] = None) -> AdNode:
    if kind.is_binary:
        if not isinstance(b, AdNode):
            raise AutodiffException(f"{kind.value} needs a second node operand")
        tape = _tape_of(a, b)
        _require_same_shape(kind.value, a, b)
        a_val, b_val = a.value, b.value
        if kind == ElementwiseKind.ADD:
            return tape.record(a_val + b_val, [a, b], lambda g: (g, g))
        if kind == ElementwiseKind.SUB:
            return tape.record(a_val - b_val, [a, b], lambda g: (g, -g))
        return tape.record(a_val * b_val, [a, b], lambda g: (g * b_val, g * a_val))
    if kind == ElementwiseKind.SCALE:
        if b is None:
            raise AutodiffException("scale needs a factor")
        return _scale(a, b)
    if b is not None:
        raise AutodiffException(f"{kind.value} takes a single operand")
    x = a.value
    tape = a.tape
    if kind == ElementwiseKind.RELU:
        mask = (x > 0).astype(np.float64)
        return tape.record(x * mask, [a], lambda g: (g * mask,))
    if kind == ElementwiseKind.LEAKY_RELU:
        slope = np.where(x > 0, 1.0, LEAKY_RELU_SLOPE)
        return tape.record(x * slope, [a], lambda g: (g * slope,))
    if kind == ElementwiseKind.SIGMOID:
        sig = expit(x)
        return tape.record(sig, [a], lambda g: (g * sig * (1.0 - sig),))
    if kind == ElementwiseKind.SWISH:
        sig = expit(x)
        return tape.record(x * sig, [a], lambda g: (g * (sig + x * sig * (1.0 - sig)),))
    if kind == ElementwiseKind.GELU:
        return tape.record(_gelu(x), [a], lambda g: (g * _gelu_grad(x),))
    if kind == ElementwiseKind.LOG:
        if np.any(x <= 0):
            raise DomainError("log of a non-positive entry")
        return tape.record(np.log(x), [a], lambda g: (g / x,))
    if kind == ElementwiseKind.EXP:
        ex = np.exp(x)
        return tape.record(ex, [a], lambda g: (g * ex,))
    raise AutodiffException(f"Unhandled elementwise kind {kind}")


def relu(a: AdNode) -> AdNode:
    return elementwise(ElementwiseKind.RELU, a)


def sigmoid(a: AdNode) -> AdNode:
    return elementwise(ElementwiseKind.SIGMOID, a)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _softmax_backward(probs: np.ndarray, g: np.ndarray, temperature: float) -> np.ndarray:
    return probs * (g - np.sum(g * probs, axis=1, keepdims=True)) / temperature


def rowwise_softmax(a: AdNode, temperature: float = 1.0) -> AdNode:
    if temperature <= 0:
        raise DomainError(f"Softmax temperature must be positive, got {temperature}")
    probs = _softmax_rows(a.value / temperature)
    return a.tape.record(probs, [a], lambda g: (_softmax_backward(probs, g, temperature),))


def layer_norm(a: AdNode, gain: AdNode, bias: AdNode, eps: float = 1e-5) -> AdNode:
    tape = _tape_of(a, gain, bias)
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} against input {a.shape}")
    x = a.value
    centred = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centred ** 2, axis=1, keepdims=True) + eps)
    x_hat = centred * inv_std
    gain_val = gain.value

    def _backward(g: np.ndarray):
        d_hat = g * gain_val
        d_x = inv_std * (
            d_hat - d_hat.mean(axis=1, keepdims=True) - x_hat * np.mean(d_hat * x_hat, axis=1, keepdims=True)
        )
        return d_x, np.sum(g * x_hat, axis=0, keepdims=True), np.sum(g, axis=0, keepdims=True)

    return tape.record(x_hat * gain_val + bias.value, [a, gain, bias], _backward)


def dropout(a: AdNode, rate: float, rng: RngState, training: bool) -> AdNode:
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.uniform(a.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return a.tape.record(a.value * keep, [a], lambda g: (g * keep,))


def mean_rows(a: AdNode) -> AdNode:
    if a.rows == 0 or a.cols == 0:
        raise DimensionError(f"mean_rows of an empty matrix {a.shape}")
    n = a.rows
    return a.tape.record(
        a.value.mean(axis=0, keepdims=True),
        [a],
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def sum_all(a: AdNode) -> AdNode:
    return a.tape.record(np.array([[a.value.sum()]]), [a], lambda g: (np.full(a.shape, g[0, 0]),))


def clamp_min(a: AdNode, floor: float) -> AdNode:
    passed = (a.value > floor).astype(np.float64)
    return a.tape.record(np.maximum(a.value, floor), [a], lambda g: (g * passed,))


def add_constant(a: AdNode, offset: np.ndarray) -> AdNode:
    offset = np.broadcast_to(offset, a.shape)
    return a.tape.record(a.value + offset, [a], lambda g: (g,))


def column(a: AdNode, j: int) -> AdNode:
    if not 0 <= j < a.cols:
        raise DimensionError(f"column {j} out of range for {a.shape}")

    def _backward(g: np.ndarray):
        grad = np.zeros(a.shape)
        grad[:, j] = g[:, 0]
        return (grad,)

    return a.tape.record(a.value[:, j:j + 1].copy(), [a], _backward)


def entry(a: AdNode, i: int, j: int) -> AdNode:
    def _backward(g: np.ndarray):
        grad = np.zeros(a.shape)
        grad[i, j] = g[0, 0]
        return (grad,)

    return a.tape.record(np.array([[a.value[i, j]]]), [a], _backward)


def row_scale(h: AdNode, weights: AdNode) -> AdNode:
    """Multiplies row i of h by weights[i, 0]."""
    tape = _tape_of(h, weights)
    if weights.shape != (h.rows, 1):
        raise DimensionError(f"row_scale: weights {weights.shape} against {h.shape}")
    h_val, w_val = h.value, weights.value
    return tape.record(
        h_val * w_val,
        [h, weights],
        lambda g: (g * w_val, np.sum(g * h_val, axis=1, keepdims=True)),
    )


def softmax_cross_entropy(logits: AdNode, onehot: np.ndarray, mask: Sequence[int]) -> AdNode:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMaskError("Cross-entropy over an empty mask")
    if onehot.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: labels {onehot.shape} against logits {logits.shape}")
    targets = onehot[mask]
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise DomainError("Masked label rows must be one-hot")
    z = logits.value[mask]
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    count = mask.size
    loss = -np.sum(targets * log_probs) / count
    probs = np.exp(log_probs)

    def _backward(g: np.ndarray):
        grad = np.zeros(logits.shape)
        np.add.at(grad, mask, (probs - targets) / count)
        return (grad * g[0, 0],)

    return logits.tape.record(np.array([[loss]]), [logits], _backward)


def _onehot_argmax(values: np.ndarray) -> np.ndarray:
    selected = np.zeros_like(values)
    selected[np.arange(values.shape[0]), np.argmax(values, axis=1)] = 1.0
    return selected


def gumbel_softmax(
        logits: AdNode,
        temperature: float,
        hard: bool,
        rng: RngState,
        training: bool,
) -> AdNode:
    """
    Gumbel-softmax relaxation of a categorical sample per row. With hard=True the forward value is one-hot and
    the gradient is that of the soft sample (straight-through). In eval mode no noise is drawn and the argmax is
    returned, with ties going to the lowest index.
    """
    if temperature <= 0:
        raise DomainError(f"Gumbel temperature must be positive, got {temperature}")
    x = logits.value
    if training:
        uniform = np.clip(rng.uniform(x.shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
        noise = -np.log(-np.log(uniform))
    else:
        noise = np.zeros_like(x)
    soft = _softmax_rows((x + noise) / temperature)
    if hard or not training:
        value = _onehot_argmax(x + noise)
    else:
        value = soft
    return logits.tape.record(value, [logits], lambda g: (_softmax_backward(soft, g, temperature),))


def gat_aggregate(
        pattern: sp.csr_matrix,
        h: AdNode,
        src_scores: AdNode,
        dst_scores: AdNode,
        slope: float = LEAKY_RELU_SLOPE,
) -> AdNode:
    """
    Attention-weighted neighbourhood sum. For each stored (i, j) of the pattern, e_ij = leaky_relu(s_i + t_j),
    weights are softmax over row i, and output row i is sum_j alpha_ij h_j. Every row of the pattern must be
    non-empty.
    """
    tape = _tape_of(h, src_scores, dst_scores)
    n = h.rows
    if pattern.shape != (n, n) or src_scores.shape != (n, 1) or dst_scores.shape != (n, 1):
        raise DimensionError(
            f"gat_aggregate: pattern {pattern.shape}, h {h.shape}, scores {src_scores.shape}/{dst_scores.shape}"
        )
    indptr, cols = pattern.indptr, pattern.indices
    row_counts = np.diff(indptr)
    if np.any(row_counts == 0):
        raise DomainError("Attention pattern has an empty row")
    rows = np.repeat(np.arange(n), row_counts)
    raw = src_scores.value[rows, 0] + dst_scores.value[cols, 0]
    slopes = np.where(raw > 0, 1.0, slope)
    scores = raw * slopes
    row_max = np.maximum.reduceat(scores, indptr[:-1])
    ex = np.exp(scores - row_max[rows])
    alpha = ex / np.bincount(rows, weights=ex, minlength=n)[rows]
    weighted = sp.csr_matrix((alpha, cols, indptr), shape=(n, n))
    h_val = h.value

    def _backward(g: np.ndarray):
        d_h = np.asarray(weighted.T @ g)
        d_alpha = np.sum(g[rows] * h_val[cols], axis=1)
        row_dot = np.bincount(rows, weights=alpha * d_alpha, minlength=n)
        d_raw = alpha * (d_alpha - row_dot[rows]) * slopes
        d_src = np.bincount(rows, weights=d_raw, minlength=n).reshape(n, 1)
        d_dst = np.bincount(cols, weights=d_raw, minlength=n).reshape(n, 1)
        return d_h, d_src, d_dst

    return tape.record(np.asarray(weighted @ h_val), [h, src_scores, dst_scores], _backward)
