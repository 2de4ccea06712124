import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class AutodiffException(Exception):
    pass


class DimensionError(AutodiffException):
    pass


class DomainError(AutodiffException):
    pass


class NonFiniteError(AutodiffException):
    pass


def as_matrix(value: Union[np.ndarray, Sequence, float]) -> np.ndarray:
    matrix = np.array(value, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    return matrix


@dataclass(eq=False)
class Parameter:
    """A trainable matrix. Decay controls whether weight decay applies to it."""
    name: str
    value: np.ndarray
    decay: bool = True

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(name={self.name!r}, shape={self.value.shape}, decay={self.decay})"


class AdNode:
    __slots__ = ("tape", "node_id", "value", "requires_grad", "_grad")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, requires_grad: bool) -> None:
        self.tape = tape
        self.node_id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.value.shape:
            raise DimensionError(f"Gradient shape {grad.shape} does not match node shape {self.value.shape}")
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64)
        else:
            self._grad += grad

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __add__(self, other: "AdNode") -> "AdNode":
        from graph_moe.autodiff.ops import ElementwiseKind, elementwise
        return elementwise(ElementwiseKind.ADD, self, other)

    def __sub__(self, other: "AdNode") -> "AdNode":
        from graph_moe.autodiff.ops import ElementwiseKind, elementwise
        return elementwise(ElementwiseKind.SUB, self, other)

    def __mul__(self, other: Union["AdNode", float]) -> "AdNode":
        from graph_moe.autodiff.ops import ElementwiseKind, elementwise
        if isinstance(other, AdNode) and other.shape == self.shape:
            return elementwise(ElementwiseKind.HADAMARD, self, other)
        return elementwise(ElementwiseKind.SCALE, self, other)

    def __rmul__(self, other: float) -> "AdNode":
        return self.__mul__(other)

    def __neg__(self) -> "AdNode":
        return self.__mul__(-1.0)

    def __matmul__(self, other: "AdNode") -> "AdNode":
        from graph_moe.autodiff.ops import matmul
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(id={self.node_id}, shape={self.value.shape})"


@dataclass
class TapeEntry:
    inputs: List[AdNode]
    output: AdNode
    backward: BackwardRule


class Tape:
    """Define-by-run record of operations. A fresh tape is built for every forward pass."""

    def __init__(self) -> None:
        self.nodes: List[AdNode] = []
        self.entries: List[TapeEntry] = []
        self._parameter_nodes: Dict[int, Tuple[Parameter, AdNode]] = {}

    def _new_node(self, value: np.ndarray, requires_grad: bool) -> AdNode:
        node = AdNode(self, len(self.nodes), value, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value: Union[np.ndarray, Sequence, float]) -> AdNode:
        return self._new_node(as_matrix(value), False)

    def variable(self, value: Union[np.ndarray, Sequence, float]) -> AdNode:
        return self._new_node(as_matrix(value), True)

    def parameter(self, param: Parameter) -> AdNode:
        cached = self._parameter_nodes.get(id(param))
        if cached is not None:
            return cached[1]
        node = self.variable(param.value)
        self._parameter_nodes[id(param)] = (param, node)
        return node

    def record(self, value: np.ndarray, inputs: List[AdNode], backward: BackwardRule) -> AdNode:
        for node in inputs:
            if node.tape is not self:
                raise AutodiffException(f"{node} belongs to a different tape")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Operation produced non-finite values, shape {value.shape}")
        requires_grad = any(node.requires_grad for node in inputs)
        output = self._new_node(value, requires_grad)
        if requires_grad:
            self.entries.append(TapeEntry(inputs, output, backward))
        return output

    def parameter_grads(self) -> List[Tuple[Parameter, np.ndarray]]:
        return [(param, node.grad) for param, node in self._parameter_nodes.values()]

    def grad_for(self, param: Parameter) -> np.ndarray:
        """Gradient of a parameter, zero if it never entered this tape."""
        cached = self._parameter_nodes.get(id(param))
        if cached is None:
            return np.zeros_like(param.value)
        return cached[1].grad

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(nodes={len(self.nodes)}, entries={len(self.entries)})"


def backward(tape: Tape, loss: AdNode) -> None:
    if loss.shape != (1, 1):
        raise DimensionError(f"Loss must be 1x1, got {loss.shape}")
    for node in tape.nodes:
        node._grad = None
    loss.accumulate(np.ones((1, 1)))
    for entry in reversed(tape.entries):
        if entry.output._grad is None:
            continue
        input_grads = entry.backward(entry.output._grad)
        for node, grad in zip(entry.inputs, input_grads):
            if grad is None or not node.requires_grad:
                continue
            node.accumulate(grad)
