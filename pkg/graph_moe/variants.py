from typing import Callable, Dict, List, Optional

from graph_moe.effn import ActivationExpertKind
from graph_moe.experts import EXPERT_ORDER, ExpertKind
from graph_moe.routing import RouterKind
from graph_moe.train_config import ConfigException, TrainConfig

DEFAULT_DELTA_TAU = 0.5

ABLATIONS = ["no-sr", "no-effn", "no-hr", "no-ares", "no-route-loss", "delta-tau"]
ROUTING_VARIANTS = ["entropy-soft", "mean", "topk-1", "topk-2", "topk-3", "dot-att"]


class VariantException(ConfigException):
    pass


def _expert_from_suffix(name: str, prefix: str) -> ExpertKind:
    suffix = name[len(prefix):].upper()
    try:
        return ExpertKind(suffix)
    except ValueError:
        raise VariantException(f"Unknown expert in variant \"{name}\"")


def _fixed_variants(temperature: Optional[float]) -> Dict[str, Callable[[TrainConfig], TrainConfig]]:
    return {
        "full": lambda cfg: cfg,
        "entropy-soft": lambda cfg: cfg.replace(router=RouterKind.SOFT),
        "no-sr": lambda cfg: cfg.replace(router=RouterKind.MEAN),
        "mean": lambda cfg: cfg.replace(router=RouterKind.MEAN),
        "dot-att": lambda cfg: cfg.replace(router=RouterKind.DOT_ATTENTION),
        "no-effn": lambda cfg: cfg.replace(use_effn=False),
        "no-hr": lambda cfg: cfg.replace(forced_activation=ActivationExpertKind.SWISHGLU),
        "no-ares": lambda cfg: cfg.replace(adaptive_residual=False),
        "no-route-loss": lambda cfg: cfg.replace(lambda_route=0.0),
        "delta-tau": lambda cfg: cfg.replace(
            lambda_route=0.0, temperature=temperature if temperature is not None else DEFAULT_DELTA_TAU
        ),
    }


def apply_variant(cfg: TrainConfig, name: str, temperature: Optional[float] = None) -> TrainConfig:
    """
    Maps a variant name onto a training config. Besides the ablations and routing schemes, accepts
    single-<expert> (forced one-hot routing), drop-<expert> (that expert removed) and identical-<expert>
    (four copies of one expert).
    """
    fixed = _fixed_variants(temperature)
    if name in fixed:
        return fixed[name](cfg).replace(variant=name)
    if name.startswith("topk-"):
        try:
            k = int(name[len("topk-"):])
        except ValueError:
            raise VariantException(f"Bad top-k variant \"{name}\"")
        return cfg.replace(router=RouterKind.TOPK, top_k=k, variant=name)
    if name.startswith("single-"):
        expert = _expert_from_suffix(name, "single-")
        return cfg.replace(experts=list(EXPERT_ORDER), forced_expert=EXPERT_ORDER.index(expert), variant=name)
    if name.startswith("drop-"):
        expert = _expert_from_suffix(name, "drop-")
        kept = [e for e in EXPERT_ORDER if e != expert]
        return cfg.replace(experts=kept, top_k=min(cfg.top_k, len(kept)), variant=name)
    if name.startswith("identical-"):
        expert = _expert_from_suffix(name, "identical-")
        return cfg.replace(experts=[expert] * len(EXPERT_ORDER), variant=name)
    raise VariantException(f"Unknown variant \"{name}\"")


def expand_variants(names: List[str]) -> List[str]:
    expanded = []
    for name in names:
        if name == "all":
            expanded.extend(ABLATIONS)
        else:
            expanded.append(name)
    return expanded
