import pytest

from graph_moe.effn import ActivationExpertKind
from graph_moe.experts import EXPERT_ORDER, ExpertKind
from graph_moe.routing import RouterKind
from graph_moe.train_config import ConfigException, TrainConfig
from graph_moe.variants import (
    ABLATIONS,
    DEFAULT_DELTA_TAU,
    ROUTING_VARIANTS,
    VariantException,
    apply_variant,
    expand_variants,
)


@pytest.fixture
def base_cfg():
    return TrainConfig(hidden=8, lambda_route=0.1)


class TestAblations:

    def test_full_is_unchanged(self, base_cfg):
        cfg = apply_variant(base_cfg, "full")
        assert cfg.to_json() == base_cfg.to_json()

    @pytest.mark.parametrize("name, field, expected", [
        ("no-sr", "router", RouterKind.MEAN),
        ("no-effn", "use_effn", False),
        ("no-hr", "forced_activation", ActivationExpertKind.SWISHGLU),
        ("no-ares", "adaptive_residual", False),
        ("no-route-loss", "lambda_route", 0.0),
    ])
    def test_mapping(self, base_cfg, name, field, expected):
        cfg = apply_variant(base_cfg, name)
        assert getattr(cfg, field) == expected
        assert cfg.variant == name

    def test_delta_tau_default(self, base_cfg):
        cfg = apply_variant(base_cfg, "delta-tau")
        assert cfg.lambda_route == 0.0
        assert cfg.temperature == DEFAULT_DELTA_TAU

    def test_delta_tau_explicit(self, base_cfg):
        assert apply_variant(base_cfg, "delta-tau", temperature=0.25).temperature == 0.25

    def test_base_left_alone(self, base_cfg):
        apply_variant(base_cfg, "no-route-loss")
        assert base_cfg.lambda_route == 0.1
        assert base_cfg.variant == "full"


class TestRoutingVariants:

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_topk(self, base_cfg, k):
        cfg = apply_variant(base_cfg, f"topk-{k}")
        assert cfg.router == RouterKind.TOPK
        assert cfg.top_k == k

    def test_topk_out_of_range(self, base_cfg):
        with pytest.raises(ConfigException):
            apply_variant(base_cfg, "topk-5")

    def test_topk_not_a_number(self, base_cfg):
        with pytest.raises(VariantException):
            apply_variant(base_cfg, "topk-many")

    def test_routing_names_resolve(self, base_cfg):
        for name in ROUTING_VARIANTS:
            assert apply_variant(base_cfg, name).variant == name

    def test_dot_attention(self, base_cfg):
        assert apply_variant(base_cfg, "dot-att").router == RouterKind.DOT_ATTENTION


class TestExpertVariants:

    def test_single(self, base_cfg):
        cfg = apply_variant(base_cfg, "single-tp")
        assert cfg.forced_expert == EXPERT_ORDER.index(ExpertKind.TP)
        assert cfg.experts == EXPERT_ORDER

    def test_drop(self, base_cfg):
        cfg = apply_variant(base_cfg, "drop-PP")
        assert cfg.experts == [ExpertKind.PT, ExpertKind.TP, ExpertKind.TT]

    def test_identical(self, base_cfg):
        assert apply_variant(base_cfg, "identical-TT").experts == [ExpertKind.TT] * 4

    def test_unknown_expert(self, base_cfg):
        with pytest.raises(VariantException):
            apply_variant(base_cfg, "single-XY")

    def test_unknown_name(self, base_cfg):
        with pytest.raises(VariantException):
            apply_variant(base_cfg, "no-such-variant")


class TestExpand:

    def test_all(self):
        assert expand_variants(["all"]) == ABLATIONS

    def test_mixed(self):
        assert expand_variants(["full", "all"]) == ["full"] + ABLATIONS
