"""The three-headed dual-branch classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .backbones import BackboneConfig, BackboneKind, build_global_extractor, build_local_extractor, output_hw
from .fusion import (
    FusionModule,
    FusionStrategy,
    GateNorm,
    assemble_decision_vector,
    decision_vector_length,
    pool_global,
    pool_local,
)

BRANCHES = ("global", "local", "fusion")


@dataclass
class ModelConfig:
    global_backbone: BackboneConfig
    local_backbone: BackboneConfig
    strategy: FusionStrategy = FusionStrategy.GATE
    fuse_channels: int = 64
    inter_channels: Optional[int] = None
    gate_norm: GateNorm = GateNorm.SIGMOID
    dropout: float = 0.25
    input_size: int = 224
    num_classes: int = 2

    def __post_init__(self):
        if isinstance(self.global_backbone, dict):
            self.global_backbone = BackboneConfig(**self.global_backbone)
        if isinstance(self.local_backbone, dict):
            self.local_backbone = BackboneConfig(**self.local_backbone)
        self.strategy = FusionStrategy(self.strategy)
        self.gate_norm = GateNorm(self.gate_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("global_backbone", "local_backbone"):
            d[key]["kind"] = d[key]["kind"].value
        d["strategy"] = self.strategy.value
        d["gate_norm"] = self.gate_norm.value
        return d


class DualBranchNet(nn.Module):
    """Global extractor, local extractor, fusion module and three linear heads.

    ``forward`` returns a dict of logits (``global``, ``local``, ``fusion``) plus
    the intermediate maps needed for saliency (``global_map``, ``local_map``,
    ``fused``, ``projected`` and ``alpha`` for the gate strategy).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.global_backbone.kind is not BackboneKind.GLOBAL_RESNET_STYLE:
            raise ValueError("global_backbone must be GLOBAL_RESNET_STYLE")
        self.config = config
        self.global_net = build_global_extractor(config.global_backbone)
        self.local_net = build_local_extractor(config.local_backbone)
        f_g = config.global_backbone.out_channels
        f_l = config.local_backbone.out_channels
        self.fusion = FusionModule(config.strategy, f_l, f_g, config.fuse_channels, config.dropout,
                                   config.inter_channels, config.gate_norm)
        h_l, w_l = output_hw(config.local_backbone, config.input_size, config.input_size)
        self.local_hw = (h_l, w_l)
        self.global_head = nn.Linear(f_g, config.num_classes)
        self.local_head = nn.Linear(f_l, config.num_classes)
        self.fusion_head = nn.Linear(
            decision_vector_length(f_g, f_l, config.fuse_channels, h_l, w_l), config.num_classes
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters per optimiser: global backbone+head, local backbone+head, fusion+final head."""
        return {
            "global": list(self.global_net.parameters()) + list(self.global_head.parameters()),
            "local": list(self.local_net.parameters()) + list(self.local_head.parameters()),
            "fusion": list(self.fusion.parameters()) + list(self.fusion_head.parameters()),
        }

    def forward(self, x: torch.Tensor) -> dict:
        g = self.global_net(x)
        l = self.local_net(x)
        if tuple(l.shape[-2:]) != self.local_hw:
            raise ValueError(f"input of size {tuple(x.shape[-2:])} does not match configured "
                             f"input_size {self.config.input_size}")
        fused = self.fusion(l, g)
        v_g = pool_global(g)
        v_l = pool_local(l)
        z = assemble_decision_vector(v_g, v_l, fused["projected"])
        out = {
            "global": self.global_head(v_g),
            "local": self.local_head(v_l),
            "fusion": self.fusion_head(z),
            "global_map": g,
            "local_map": l,
        }
        out.update(fused)
        return out

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor, branch: str = "fusion") -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            return torch.softmax(self(x)[branch], dim=-1)
        finally:
            self.train(was_training)
