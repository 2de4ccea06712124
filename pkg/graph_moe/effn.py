import enum
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from graph_moe.autodiff import ops
from graph_moe.autodiff.ops import ElementwiseKind
from graph_moe.autodiff.tape import AdNode, DimensionError, Parameter
from graph_moe.params import constant_parameter, glorot_parameter
from graph_moe.rng import RngState
from graph_moe.routing import adaptive_residual

logger = logging.getLogger(__name__)


class ActivationExpertKind(enum.Enum):
    SWISHGLU = "swishglu"
    GEGLU = "geglu"
    REGLU = "reglu"

    @property
    def activation(self) -> ElementwiseKind:
        return {
            ActivationExpertKind.SWISHGLU: ElementwiseKind.SWISH,
            ActivationExpertKind.GEGLU: ElementwiseKind.GELU,
            ActivationExpertKind.REGLU: ElementwiseKind.RELU,
        }[self]


ACTIVATION_ORDER = [ActivationExpertKind.SWISHGLU, ActivationExpertKind.GEGLU, ActivationExpertKind.REGLU]


@dataclass
class EFFN:
    w3: Parameter
    w4: Parameter
    w5: Parameter
    w_hr: Parameter
    residual_raw: Parameter
    ln_gain: Parameter
    ln_bias: Parameter
    gumbel_temperature: float = 1.0
    per_node: bool = False
    forced_activation: Optional[ActivationExpertKind] = None
    residual_override: Optional[float] = None

    @classmethod
    def build(
            cls,
            hidden: int,
            rng: RngState,
            gumbel_temperature: float = 1.0,
            per_node: bool = False,
            forced_activation: Optional[ActivationExpertKind] = None,
            residual_override: Optional[float] = None,
    ) -> "EFFN":
        return cls(
            glorot_parameter("effn.w3", hidden, hidden, rng),
            glorot_parameter("effn.w4", hidden, hidden, rng),
            glorot_parameter("effn.w5", hidden, hidden, rng),
            glorot_parameter("effn.w_hr", hidden, len(ACTIVATION_ORDER), rng),
            constant_parameter("effn.residual", 1, 1, 0.0),
            constant_parameter("effn.ln_gain", 1, hidden, 1.0),
            constant_parameter("effn.ln_bias", 1, hidden, 0.0),
            gumbel_temperature,
            per_node,
            forced_activation,
            residual_override,
        )

    def parameters(self) -> List[Parameter]:
        params = [self.w3, self.w4, self.w5, self.ln_gain, self.ln_bias]
        if self.forced_activation is None:
            params.append(self.w_hr)
        if self.residual_override is None:
            params.append(self.residual_raw)
        return params


def route_hard(effn: EFFN, h: AdNode, rng: RngState, training: bool) -> AdNode:
    """One-hot choice among the activation experts, from the pooled representation unless per-node."""
    tape = h.tape
    pooled = h if effn.per_node else ops.mean_rows(h)
    logits = ops.matmul(pooled, tape.parameter(effn.w_hr))
    return ops.gumbel_softmax(logits, effn.gumbel_temperature, True, rng, training)


def gated_activation(kind: ActivationExpertKind, h: AdNode, effn: EFFN) -> AdNode:
    if h.cols != effn.w3.shape[0]:
        raise DimensionError(f"Gated activation expects {effn.w3.shape[0]} columns, got {h.cols}")
    tape = h.tape
    gate = ops.elementwise(kind.activation, ops.matmul(h, tape.parameter(effn.w3)))
    value = ops.matmul(h, tape.parameter(effn.w4))
    return ops.matmul(gate * value, tape.parameter(effn.w5))


def effn_forward(effn: EFFN, h: AdNode, h0: AdNode, rng: RngState, training: bool) -> Tuple[AdNode, int]:
    """Returns the block output and the index of the selected activation expert (modal choice when per-node)."""
    tape = h.tape
    if effn.forced_activation is not None:
        selected = ACTIVATION_ORDER.index(effn.forced_activation)
        mixed = gated_activation(effn.forced_activation, h, effn)
    elif effn.per_node:
        selection = route_hard(effn, h, rng, training)
        mixed = None
        for idx, kind in enumerate(ACTIVATION_ORDER):
            branch = ops.row_scale(gated_activation(kind, h, effn), ops.column(selection, idx))
            mixed = branch if mixed is None else mixed + branch
        choices = np.argmax(selection.value, axis=1)
        selected = int(np.argmax(np.bincount(choices, minlength=len(ACTIVATION_ORDER))))
    else:
        selection = route_hard(effn, h, rng, training)
        selected = int(np.argmax(selection.value[0]))
        # Only the chosen branch is built; its weight is 1 forward and carries the soft gradient backward
        weight = ops.entry(selection, 0, selected)
        mixed = ops.elementwise(
            ElementwiseKind.SCALE, gated_activation(ACTIVATION_ORDER[selected], h, effn), weight
        )
    combined = adaptive_residual(h0, mixed, effn.residual_raw, effn.residual_override)
    out = ops.layer_norm(combined, tape.parameter(effn.ln_gain), tape.parameter(effn.ln_bias))
    return out, selected
