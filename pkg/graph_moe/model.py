import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from graph_moe.autodiff import ops
from graph_moe.autodiff.ops import ElementwiseKind, EmptyMaskError
from graph_moe.autodiff.tape import AdNode, DimensionError, DomainError, Parameter, Tape
from graph_moe.effn import EFFN, effn_forward
from graph_moe.experts import ExpertParams, PropagationKind
from graph_moe.graph_data import GraphDataset
from graph_moe.params import glorot_parameter
from graph_moe.rng import RngState
from graph_moe.routing import MoEBlock, RoutingRecord, SoftRouter, moe_block_forward, routing_entropy
from graph_moe.train_config import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class GraphMoEModel:
    w0: Parameter
    blocks: List[MoEBlock]
    effn: Optional[EFFN]
    w6: Parameter
    prop_kind: PropagationKind
    config: TrainConfig

    @classmethod
    def build(cls, cfg: TrainConfig, num_features: int, num_classes: int, rng: RngState) -> "GraphMoEModel":
        hidden = cfg.hidden
        residual_override = None if cfg.adaptive_residual else 0.0
        w0 = glorot_parameter("w0", num_features, hidden, rng)
        blocks = []
        for index in range(cfg.blocks):
            prefix = f"block{index}."
            experts = [
                ExpertParams.build(kind, cfg.prop, hidden, cfg.dropout, rng, prefix=f"{prefix}e{slot}.")
                for slot, kind in enumerate(cfg.experts)
            ]
            router = SoftRouter.build(
                hidden, len(experts), rng, cfg.router, cfg.top_k, cfg.temperature, prefix=prefix,
            )
            blocks.append(MoEBlock.build(index, router, experts, hidden, residual_override, cfg.forced_expert))
        effn = None
        if cfg.use_effn:
            effn = EFFN.build(
                hidden, rng, cfg.gumbel_temperature, cfg.per_node_hr, cfg.forced_activation, residual_override,
            )
        w6 = glorot_parameter("w6", hidden, num_classes, rng)
        model = cls(w0, blocks, effn, w6, cfg.prop, cfg)
        logger.debug("Built model with %s parameter matrices", len(model.parameters()))
        return model

    def parameters(self) -> List[Parameter]:
        params = [self.w0]
        for block in self.blocks:
            params.extend(block.parameters())
        if self.effn is not None:
            params.extend(self.effn.parameters())
        params.append(self.w6)
        return params

    def snapshot(self) -> List[np.ndarray]:
        return [param.value.copy() for param in self.parameters()]

    def restore(self, snapshot: Sequence[np.ndarray]) -> None:
        for param, value in zip(self.parameters(), snapshot):
            param.value[...] = value


@dataclass
class ForwardOutput:
    tape: Tape
    logits: AdNode
    records: List[RoutingRecord]
    hr_selection: Optional[int]


@dataclass
class LossBreakdown:
    task: AdNode
    route: Optional[AdNode]
    total: AdNode

    @property
    def route_value(self) -> float:
        if self.route is None:
            return 0.0
        return float(self.route.value[0, 0])


def model_forward(m: GraphMoEModel, g: GraphDataset, rng: RngState, training: bool) -> ForwardOutput:
    if g.num_features != m.w0.shape[0]:
        raise DimensionError(f"Model expects {m.w0.shape[0]} features, dataset has {g.num_features}")
    tape = Tape()
    x = tape.constant(g.features)
    h0 = ops.relu(ops.matmul(x, tape.parameter(m.w0)))
    h = h0
    records = []
    a_hat = g.normalized_adjacency
    for block in m.blocks:
        h, record = moe_block_forward(block, g, a_hat, h, h0, rng, training)
        records.append(record)
    hr_selection = None
    if m.effn is not None:
        h, hr_selection = effn_forward(m.effn, h, h0, rng, training)
    logits = ops.matmul(h, tape.parameter(m.w6))
    return ForwardOutput(tape, logits, records, hr_selection)


def loss_breakdown(
        logits: AdNode,
        g: GraphDataset,
        mask: Sequence[int],
        records: List[RoutingRecord],
        lambda_route: float,
) -> LossBreakdown:
    if lambda_route < 0:
        raise DomainError(f"Routing entropy weight must be non-negative, got {lambda_route}")
    task = ops.softmax_cross_entropy(logits, g.onehot, mask)
    if not records:
        return LossBreakdown(task, None, task)
    route = routing_entropy(records)
    if lambda_route == 0:
        return LossBreakdown(task, route, task)
    return LossBreakdown(task, route, task + ops.elementwise(ElementwiseKind.SCALE, route, lambda_route))


def total_loss(
        logits: AdNode,
        g: GraphDataset,
        mask: Sequence[int],
        records: List[RoutingRecord],
        lambda_route: float,
) -> AdNode:
    return loss_breakdown(logits, g, mask, records, lambda_route).total


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: Sequence[int]) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMaskError("Accuracy over an empty mask")
    predictions = np.argmax(logits[mask], axis=1)
    return float(np.mean(predictions == labels[mask]))


def evaluate(m: GraphMoEModel, g: GraphDataset, mask: Sequence[int]) -> float:
    # Eval mode draws no random numbers, so any stream will do
    output = model_forward(m, g, RngState(0), training=False)
    return accuracy(output.logits.value, g.labels, mask)
