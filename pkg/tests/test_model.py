import pytest
import torch

from conftest import tiny_model_config
from fusionscope.fusion import FusionStrategy, GateNorm
from fusionscope.model import DualBranchNet, ModelConfig


@pytest.mark.parametrize("strategy", list(FusionStrategy))
def test_forward_outputs(strategy):
    model = DualBranchNet(tiny_model_config(strategy=strategy.value)).eval()
    out = model(torch.randn(3, 3, 64, 64))
    for head in ("global", "local", "fusion"):
        assert out[head].shape == (3, 2)
    assert out["global_map"].shape == (3, 64, 2, 2)
    assert out["local_map"].shape == (3, 64, 4, 4)
    assert out["aligned_global"].shape == (3, 64, 4, 4)
    assert out["projected"].shape == (3, 4, 4, 4)
    assert model.fusion_head.in_features == 64 + 64 + 4 * 4 * 4
    if strategy is FusionStrategy.GATE:
        assert out["alpha"].shape == (3, 1, 4, 4)


def test_predict_proba_restores_mode():
    model = DualBranchNet(tiny_model_config()).train()
    p = model.predict_proba(torch.randn(2, 3, 64, 64), "local")
    torch.testing.assert_close(p.sum(-1), torch.ones(2))
    assert model.training


def test_wrong_input_size():
    model = DualBranchNet(tiny_model_config(input_size=64))
    with pytest.raises(ValueError, match="input_size"):
        model(torch.randn(1, 3, 96, 96))


def test_config_dict_round_trip():
    cfg = tiny_model_config(strategy="product", gate_norm="SOFTMAX")
    again = ModelConfig(**cfg.to_dict())
    assert again == cfg
    assert again.gate_norm is GateNorm.SOFTMAX and again.strategy is FusionStrategy.PRODUCT


def test_parameter_groups_partition():
    model = DualBranchNet(tiny_model_config())
    groups = model.parameter_groups()
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids)) == len(list(model.parameters()))
    gate_ids = {id(p) for p in model.fusion.gate.parameters()}
    assert gate_ids <= {id(p) for p in groups["fusion"]}
