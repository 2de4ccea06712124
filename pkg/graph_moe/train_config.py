import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from graph_moe.effn import ActivationExpertKind
from graph_moe.experts import EXPERT_ORDER, ExpertKind, PropagationKind
from graph_moe.routing import RouterKind

ROUTE_LAMBDA_GRID = [0.001, 0.01, 0.1, 1.0]
LEARNING_RATE_GRID = [0.005, 0.01, 0.05, 0.1]
WEIGHT_DECAY_GRID = [5e-5, 1e-4, 5e-4, 1e-3, 5e-3]
DROPOUT_GRID = [0.1, 0.3, 0.5, 0.7, 0.9]


class ConfigException(Exception):
    pass


def _parse_enum(enum_cls, value: Any, field_name: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError as e:
        valid = ", ".join(member.value for member in enum_cls)
        raise ConfigException(f"Invalid {field_name}, \"{value}\" (expected one of {valid}): {e}")


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    lambda_route: float = 0.01
    blocks: int = 2
    hidden: int = 64
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0
    prop: PropagationKind = PropagationKind.GCN
    router: RouterKind = RouterKind.SOFT
    top_k: int = 1
    temperature: float = 1.0
    gumbel_temperature: float = 1.0
    per_node_hr: bool = False
    use_effn: bool = True
    forced_activation: Optional[ActivationExpertKind] = None
    adaptive_residual: bool = True
    experts: List[ExpertKind] = field(default_factory=lambda: list(EXPERT_ORDER))
    forced_expert: Optional[int] = None
    variant: str = "full"

    def __post_init__(self) -> None:
        self.prop = _parse_enum(PropagationKind, self.prop, "propagation")
        self.router = _parse_enum(RouterKind, self.router, "router")
        if self.forced_activation is not None:
            self.forced_activation = _parse_enum(ActivationExpertKind, self.forced_activation, "activation")
        self.experts = [_parse_enum(ExpertKind, e, "expert") for e in self.experts]
        if self.lambda_route < 0:
            raise ConfigException(f"Routing entropy weight must be non-negative, got {self.lambda_route}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigException(f"Learning rate and weight decay must be non-negative, got {self.lr}, {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigException(f"Dropout must be in [0, 1), got {self.dropout}")
        if self.blocks < 0 or self.hidden < 1:
            raise ConfigException(f"Need blocks >= 0 and hidden >= 1, got {self.blocks}, {self.hidden}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigException(f"Need max_epochs and patience >= 1, got {self.max_epochs}, {self.patience}")
        if self.temperature <= 0 or self.gumbel_temperature <= 0:
            raise ConfigException("Temperatures must be positive")
        if not self.experts:
            raise ConfigException("At least one expert is needed")
        if not 1 <= self.top_k <= len(self.experts):
            raise ConfigException(f"top_k must be in [1, {len(self.experts)}], got {self.top_k}")
        if self.forced_expert is not None and not 0 <= self.forced_expert < len(self.experts):
            raise ConfigException(f"Forced expert {self.forced_expert} out of range")

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_json(cls, json_dict: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(json_dict) - known
        if unknown:
            raise ConfigException(f"Unknown training config keys: {sorted(unknown)}")
        return cls(**json_dict)

    def to_json(self) -> Dict[str, Any]:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "lambda_route": self.lambda_route,
            "blocks": self.blocks,
            "hidden": self.hidden,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "prop": self.prop.value,
            "router": self.router.value,
            "top_k": self.top_k,
            "temperature": self.temperature,
            "gumbel_temperature": self.gumbel_temperature,
            "per_node_hr": self.per_node_hr,
            "use_effn": self.use_effn,
            "forced_activation": self.forced_activation.value if self.forced_activation else None,
            "adaptive_residual": self.adaptive_residual,
            "experts": [e.value for e in self.experts],
            "forced_expert": self.forced_expert,
            "variant": self.variant,
        }

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}(variant={self.variant!r}, prop={self.prop.value}, blocks={self.blocks}, "
            f"hidden={self.hidden}, lr={self.lr}, wd={self.weight_decay}, dropout={self.dropout}, "
            f"lambda={self.lambda_route})"
        )
