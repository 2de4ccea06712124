import enum
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import scipy.sparse as sp

from graph_moe.autodiff import ops
from graph_moe.autodiff.tape import AdNode, DimensionError, Parameter
from graph_moe.graph_data import GraphDataset
from graph_moe.params import glorot_parameter, small_uniform_parameter
from graph_moe.rng import RngState

logger = logging.getLogger(__name__)


class PropagationKind(enum.Enum):
    GCN = "gcn"
    SAGE = "sage"
    GAT = "gat"


class Stage(enum.Enum):
    PROPAGATE = "P"
    TRANSFORM = "T"


class ExpertKind(enum.Enum):
    PP = "PP"
    PT = "PT"
    TP = "TP"
    TT = "TT"

    @property
    def stages(self) -> Tuple[Stage, Stage]:
        return Stage(self.value[0]), Stage(self.value[1])

    @property
    def num_transforms(self) -> int:
        return sum(1 for stage in self.stages if stage == Stage.TRANSFORM)

    @property
    def num_propagations(self) -> int:
        return sum(1 for stage in self.stages if stage == Stage.PROPAGATE)


EXPERT_ORDER = [ExpertKind.PP, ExpertKind.PT, ExpertKind.TP, ExpertKind.TT]


@dataclass
class ExpertParams:
    kind: ExpertKind
    prop_kind: PropagationKind
    weights: List[Parameter] = field(default_factory=list)
    attention: List[Tuple[Parameter, Parameter]] = field(default_factory=list)
    dropout: float = 0.0

    @classmethod
    def build(
            cls,
            kind: ExpertKind,
            prop_kind: PropagationKind,
            hidden: int,
            dropout: float,
            rng: RngState,
            prefix: str = "",
    ) -> "ExpertParams":
        name = f"{prefix}{kind.value.lower()}"
        weights = [
            glorot_parameter(f"{name}.w{i}", hidden, hidden, rng) for i in range(kind.num_transforms)
        ]
        attention = []
        if prop_kind == PropagationKind.GAT:
            attention = [
                (
                    small_uniform_parameter(f"{name}.a_src{i}", hidden, 1, rng),
                    small_uniform_parameter(f"{name}.a_dst{i}", hidden, 1, rng),
                )
                for i in range(kind.num_propagations)
            ]
        return cls(kind, prop_kind, weights, attention, dropout)

    def parameters(self) -> List[Parameter]:
        params = list(self.weights)
        for a_src, a_dst in self.attention:
            params.extend([a_src, a_dst])
        return params


def propagate_gcn(a_hat: sp.csr_matrix, h: AdNode) -> AdNode:
    return ops.spmm(a_hat, h)


def propagate_sage(g: GraphDataset, h: AdNode) -> AdNode:
    """Mean over neighbours, self excluded. Isolated nodes get a zero row."""
    return ops.spmm(g.mean_adjacency, h)


def propagate_gat(g: GraphDataset, h: AdNode, params: ExpertParams, stage: int = 0) -> AdNode:
    a_src, a_dst = params.attention[stage]
    tape = h.tape
    src_scores = ops.matmul(h, tape.parameter(a_src))
    dst_scores = ops.matmul(h, tape.parameter(a_dst))
    return ops.gat_aggregate(g.attention_pattern, h, src_scores, dst_scores)


def transform(h: AdNode, params: ExpertParams, rng: RngState, training: bool, stage: int = 0) -> AdNode:
    weight = params.weights[stage]
    if weight.shape != (h.cols, h.cols):
        raise DimensionError(f"Transform weight {weight.shape} against input {h.shape}")
    hidden = ops.relu(ops.matmul(h, h.tape.parameter(weight)))
    return ops.dropout(hidden, params.dropout, rng, training)


def propagate(
        prop_kind: PropagationKind,
        g: GraphDataset,
        a_hat: sp.csr_matrix,
        h: AdNode,
        params: ExpertParams,
        stage: int = 0,
) -> AdNode:
    if prop_kind == PropagationKind.GCN:
        return propagate_gcn(a_hat, h)
    if prop_kind == PropagationKind.SAGE:
        return propagate_sage(g, h)
    return propagate_gat(g, h, params, stage)


def apply_expert(
        kind: ExpertKind,
        g: GraphDataset,
        a_hat: sp.csr_matrix,
        h: AdNode,
        params: ExpertParams,
        rng: RngState,
        training: bool,
) -> AdNode:
    out = h
    transforms_done = 0
    propagations_done = 0
    for stage in kind.stages:
        if stage == Stage.TRANSFORM:
            out = transform(out, params, rng, training, transforms_done)
            transforms_done += 1
        else:
            out = propagate(params.prop_kind, g, a_hat, out, params, propagations_done)
            propagations_done += 1
    return out
