import enum
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from graph_moe.autodiff import ops
from graph_moe.autodiff.ops import ElementwiseKind
from graph_moe.autodiff.tape import AdNode, DimensionError, Parameter
from graph_moe.experts import ExpertParams, apply_expert
from graph_moe.graph_data import GraphDataset
from graph_moe.params import constant_parameter, glorot_parameter
from graph_moe.rng import RngState

logger = logging.getLogger(__name__)

ENTROPY_LOG_FLOOR = 1e-12
TOPK_MASK_OFFSET = -1e9
ROUTING_ROW_TOLERANCE = 1e-6


class RoutingException(Exception):
    pass


class RouterKind(enum.Enum):
    SOFT = "soft"
    MEAN = "mean"
    TOPK = "topk"
    DOT_ATTENTION = "dot-att"


@dataclass
class SoftRouter:
    """Two-layer scoring network over the experts, optionally swapped for one of the simpler routing schemes."""
    w1: Parameter
    w2: Parameter
    keys: Optional[Parameter] = None
    kind: RouterKind = RouterKind.SOFT
    top_k: int = 1
    temperature: float = 1.0

    @property
    def num_experts(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def build(
            cls,
            hidden: int,
            num_experts: int,
            rng: RngState,
            kind: RouterKind = RouterKind.SOFT,
            top_k: int = 1,
            temperature: float = 1.0,
            prefix: str = "",
    ) -> "SoftRouter":
        if not 1 <= top_k <= num_experts:
            raise RoutingException(f"top_k must be in [1, {num_experts}], got {top_k}")
        if temperature <= 0:
            raise RoutingException(f"Routing temperature must be positive, got {temperature}")
        w1 = glorot_parameter(f"{prefix}router.w1", hidden, hidden, rng)
        w2 = glorot_parameter(f"{prefix}router.w2", hidden, num_experts, rng)
        keys = None
        if kind == RouterKind.DOT_ATTENTION:
            keys = glorot_parameter(f"{prefix}router.keys", hidden, num_experts, rng)
        return cls(w1, w2, keys, kind, top_k, temperature)

    def parameters(self) -> List[Parameter]:
        if self.kind == RouterKind.MEAN:
            return []
        if self.kind == RouterKind.DOT_ATTENTION:
            return [self.keys]
        return [self.w1, self.w2]


@dataclass
class MoEBlock:
    index: int
    router: SoftRouter
    experts: List[ExpertParams]
    residual_raw: Parameter
    ln_gain: Parameter
    ln_bias: Parameter
    residual_override: Optional[float] = None
    forced_expert: Optional[int] = None

    @classmethod
    def build(
            cls,
            index: int,
            router: SoftRouter,
            experts: List[ExpertParams],
            hidden: int,
            residual_override: Optional[float] = None,
            forced_expert: Optional[int] = None,
    ) -> "MoEBlock":
        if forced_expert is not None and not 0 <= forced_expert < len(experts):
            raise RoutingException(f"Forced expert {forced_expert} out of range for {len(experts)} experts")
        prefix = f"block{index}."
        return cls(
            index,
            router,
            experts,
            constant_parameter(f"{prefix}residual", 1, 1, 0.0),
            constant_parameter(f"{prefix}ln_gain", 1, hidden, 1.0),
            constant_parameter(f"{prefix}ln_bias", 1, hidden, 0.0),
            residual_override,
            forced_expert,
        )

    def parameters(self) -> List[Parameter]:
        params = [self.ln_gain, self.ln_bias]
        if self.residual_override is None:
            params.append(self.residual_raw)
        if self.forced_expert is not None:
            return params + self.experts[self.forced_expert].parameters()
        params.extend(self.router.parameters())
        for expert in self.experts:
            params.extend(expert.parameters())
        return params


@dataclass
class RoutingRecord:
    block_index: int
    weights: AdNode

    @property
    def values(self) -> np.ndarray:
        return self.weights.value

    def mean_weights(self) -> np.ndarray:
        return self.values.mean(axis=0)


def route_soft(router: SoftRouter, h: AdNode, temperature: float = 1.0) -> AdNode:
    logits = _router_logits(router, h)
    return ops.rowwise_softmax(logits, temperature)


def _router_logits(router: SoftRouter, h: AdNode) -> AdNode:
    if h.cols != router.w1.shape[0]:
        raise DimensionError(f"Router expects {router.w1.shape[0]} columns, got {h.cols}")
    tape = h.tape
    hidden = ops.relu(ops.matmul(h, tape.parameter(router.w1)))
    return ops.matmul(hidden, tape.parameter(router.w2))


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Zero on the k largest entries of each row (ties to the lower index), a large negative offset elsewhere."""
    order = np.argsort(-logits, axis=1, kind="stable")
    offset = np.full(logits.shape, TOPK_MASK_OFFSET)
    np.put_along_axis(offset, order[:, :k], 0.0, axis=1)
    return offset


def route(router: SoftRouter, h: AdNode, forced_expert: Optional[int] = None) -> AdNode:
    tape = h.tape
    m = router.num_experts
    if forced_expert is not None:
        forced = np.zeros((h.rows, m))
        forced[:, forced_expert] = 1.0
        return tape.constant(forced)
    if router.kind == RouterKind.MEAN:
        return tape.constant(np.full((h.rows, m), 1.0 / m))
    if router.kind == RouterKind.DOT_ATTENTION:
        logits = ops.matmul(h, tape.parameter(router.keys))
        return ops.rowwise_softmax(logits, router.temperature)
    if router.kind == RouterKind.TOPK:
        logits = _router_logits(router, h)
        masked = ops.add_constant(logits, topk_mask(logits.value, router.top_k))
        return ops.rowwise_softmax(masked, router.temperature)
    return route_soft(router, h, router.temperature)


def adaptive_residual(h0: AdNode, h: AdNode, raw: Parameter, override: Optional[float]) -> AdNode:
    """weight * h0 + (1 - weight) * h, with weight = sigmoid(raw) unless pinned by override."""
    tape = h.tape
    if override is not None:
        weight = tape.constant([[override]])
    else:
        weight = ops.sigmoid(tape.parameter(raw))
    one = tape.constant([[1.0]])
    return ops.elementwise(ElementwiseKind.SCALE, h0, weight) + ops.elementwise(ElementwiseKind.SCALE, h, one - weight)


def expert_mixture(
        block: MoEBlock,
        g: GraphDataset,
        a_hat: sp.csr_matrix,
        h: AdNode,
        weights: AdNode,
        rng: RngState,
        training: bool,
) -> AdNode:
    if block.forced_expert is not None:
        return apply_expert(block.experts[block.forced_expert].kind, g, a_hat, h,
                            block.experts[block.forced_expert], rng, training)
    mixture = None
    for idx, expert in enumerate(block.experts):
        expert_out = apply_expert(expert.kind, g, a_hat, h, expert, rng, training)
        weighted = ops.row_scale(expert_out, ops.column(weights, idx))
        mixture = weighted if mixture is None else mixture + weighted
    return mixture


def moe_block_forward(
        block: MoEBlock,
        g: GraphDataset,
        a_hat: sp.csr_matrix,
        h: AdNode,
        h0: AdNode,
        rng: RngState,
        training: bool,
) -> Tuple[AdNode, RoutingRecord]:
    if h.shape != h0.shape:
        raise DimensionError(f"Block input {h.shape} does not match initial embedding {h0.shape}")
    weights = route(block.router, h, block.forced_expert)
    mixture = expert_mixture(block, g, a_hat, h, weights, rng, training)
    combined = adaptive_residual(h0, mixture, block.residual_raw, block.residual_override)
    tape = h.tape
    out = ops.layer_norm(combined, tape.parameter(block.ln_gain), tape.parameter(block.ln_bias))
    return out, RoutingRecord(block.index, weights)


def routing_entropy(records: List[RoutingRecord]) -> AdNode:
    """Mean Shannon entropy of the routing rows over every node and block."""
    if not records:
        raise RoutingException("Routing entropy needs at least one routing record")
    total = None
    for record in records:
        probs = record.weights
        log_probs = ops.elementwise(ElementwiseKind.LOG, ops.clamp_min(probs, ENTROPY_LOG_FLOOR))
        term = ops.sum_all(probs * log_probs)
        total = term if total is None else total + term
    count = len(records) * records[0].weights.rows
    return ops.elementwise(ElementwiseKind.SCALE, total, -1.0 / count)


def check_routing_record(record: RoutingRecord, tolerance: float = ROUTING_ROW_TOLERANCE) -> None:
    values = record.values
    if np.any(values < 0):
        raise RoutingException(f"Block {record.block_index} routing has negative weights")
    worst = float(np.max(np.abs(values.sum(axis=1) - 1.0))) if values.size else 0.0
    if worst > tolerance:
        raise RoutingException(f"Block {record.block_index} routing rows miss the simplex by {worst:.3e}")


def check_route_loss(value: float, num_experts: int = 4) -> None:
    upper = math.log(num_experts)
    if not -ROUTING_ROW_TOLERANCE <= value <= upper + ROUTING_ROW_TOLERANCE:
        raise RoutingException(f"Route loss {value} outside [0, {upper:.5f}]")
