"""Fusion of global and local feature maps.

Three strategies share one interface: the global map is bilinearly resized to
the local grid, merged with the local map (attention gating, channel
concatenation or Hadamard product), projected by a 1x1 convolution + batch
norm, and finally concatenated with the pooled branch vectors into the
decision vector fed to the fusion classifier.
"""
from __future__ import annotations

import enum
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class GateNorm(str, enum.Enum):
    SIGMOID = "SIGMOID"
    SOFTMAX = "SOFTMAX"


class FusionStrategy(str, enum.Enum):
    GATE = "gate"
    CONCAT = "concat"
    PRODUCT = "product"


def align_spatial(global_map: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (B, F, H, W) map to ``target`` using half-pixel centres."""
    squeeze = global_map.dim() == 3
    if squeeze:
        global_map = global_map.unsqueeze(0)
    h, w = global_map.shape[-2:]
    if target[0] < h or target[1] < w:
        raise ValueError(f"target {target} is smaller than the source grid {(h, w)}")
    out = F.interpolate(global_map, size=tuple(target), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


class AttentionGate(nn.Module):
    """Additive attention gate.

    For every local position ``i`` with local feature ``x_i`` and aligned global
    feature ``g_i``::

        q_i = psi . relu(W_x x_i + W_g g_i + b_xg) + b_psi
        alpha = sigmoid(q)            (per position), or
        alpha = softmax(q)            (over all positions of a sample)

    and the gated map is ``alpha_i * x_i``. ``forward`` returns
    ``(gated, alpha)`` with ``alpha`` of shape (B, 1, H, W).
    """

    def __init__(self, local_channels: int, global_channels: int, inter_channels: Optional[int] = None,
                 norm: GateNorm | str = GateNorm.SIGMOID):
        super().__init__()
        if inter_channels is None:
            inter_channels = max(local_channels // 2, 1)
        if inter_channels < 1:
            raise ValueError("inter_channels must be >= 1")
        self.norm = GateNorm(norm)
        self.W_x = nn.Conv2d(local_channels, inter_channels, 1, bias=False)
        # the single additive bias b_xg lives on the gating projection
        self.W_g = nn.Conv2d(global_channels, inter_channels, 1, bias=True)
        self.psi = nn.Conv2d(inter_channels, 1, 1, bias=True)

    def logits(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != g.shape[-2:]:
            raise ValueError(f"local grid {tuple(x.shape[-2:])} != global grid {tuple(g.shape[-2:])}")
        return self.psi(F.relu(self.W_x(x) + self.W_g(g)))

    def forward(self, x: torch.Tensor, g: torch.Tensor):
        q = self.logits(x, g)
        if self.norm is GateNorm.SIGMOID:
            alpha = torch.sigmoid(q)
        else:
            b, _, h, w = q.shape
            alpha = torch.softmax(q.reshape(b, -1), dim=1).reshape(b, 1, h, w)
        return alpha * x, alpha


def attention_gate(local: torch.Tensor, aligned_global: torch.Tensor, gate: AttentionGate):
    """Functional alias for ``gate(local, aligned_global)``."""
    return gate(local, aligned_global)


class FusionBlock(nn.Module):
    """1x1 conv -> ReLU -> dropout (inverted scaling, identity in eval mode)."""

    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, z):
        return self.dropout(F.relu(self.proj(z)))


def _check_same_grid(local, aligned_global):
    if local.shape[-2:] != aligned_global.shape[-2:] or local.shape[0] != aligned_global.shape[0]:
        raise ValueError(
            f"feature maps disagree: local {tuple(local.shape)} vs global {tuple(aligned_global.shape)}"
        )


def fuse_concat(local: torch.Tensor, aligned_global: torch.Tensor, block: FusionBlock) -> torch.Tensor:
    _check_same_grid(local, aligned_global)
    z = torch.cat([local, aligned_global], dim=1)
    if z.shape[1] != block.proj.in_channels:
        raise ValueError(f"concatenated map has {z.shape[1]} channels, block expects {block.proj.in_channels}")
    return block(z)


def fuse_product(local: torch.Tensor, aligned_global: torch.Tensor, block: FusionBlock) -> torch.Tensor:
    if local.shape != aligned_global.shape:
        raise ValueError(f"product fusion needs identical shapes, got {tuple(local.shape)} and "
                         f"{tuple(aligned_global.shape)}")
    return block(local * aligned_global)


class FusedProjection(nn.Module):
    """``Y = BN(W_fuse * z + b_fuse)`` with a 1x1 convolution."""

    def __init__(self, in_channels: int, fuse_channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, fuse_channels, 1)
        self.bn = nn.BatchNorm2d(fuse_channels)

    def forward(self, z):
        if z.shape[1] != self.conv.in_channels:
            raise ValueError(f"projection expects {self.conv.in_channels} channels, got {z.shape[1]}")
        return self.bn(self.conv(z))


def project_fused(z: torch.Tensor, projection: FusedProjection) -> torch.Tensor:
    return projection(z)


def pool_global(feature_map: torch.Tensor) -> torch.Tensor:
    """Global average pooling: (B, F, H, W) -> (B, F)."""
    return feature_map.mean(dim=(-2, -1))


def pool_local(feature_map: torch.Tensor) -> torch.Tensor:
    """Adaptive average pooling to 1x1, flattened: (B, F, H, W) -> (B, F)."""
    return torch.flatten(F.adaptive_avg_pool2d(feature_map, 1), 1)


def assemble_decision_vector(v_global: torch.Tensor, v_local: torch.Tensor, projected: torch.Tensor) -> torch.Tensor:
    """``[v_g ; v_l ; flatten(Y)]`` along the feature axis."""
    if not (v_global.shape[0] == v_local.shape[0] == projected.shape[0]):
        raise ValueError("batch sizes of the decision-vector parts disagree")
    return torch.cat([v_global, v_local, torch.flatten(projected, 1)], dim=1)


def decision_vector_length(global_channels: int, local_channels: int, fuse_channels: int,
                           height: int, width: int) -> int:
    return global_channels + local_channels + fuse_channels * height * width


def classify(vector: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Affine head followed by softmax; returns class probabilities."""
    if vector.shape[-1] != head.in_features:
        raise ValueError(f"head expects {head.in_features} features, got {vector.shape[-1]}")
    return torch.softmax(head(vector), dim=-1)


class FusionModule(nn.Module):
    """Alignment + one fusion strategy + projection.

    ``forward(local, global_map)`` returns a dict with ``fused`` (the map fed to
    the projection), ``projected`` (Y) and, for the gate strategy, ``alpha``.
    """

    def __init__(self, strategy: FusionStrategy | str, local_channels: int, global_channels: int,
                 fuse_channels: int = 64, dropout: float = 0.25, inter_channels: Optional[int] = None,
                 gate_norm: GateNorm | str = GateNorm.SIGMOID):
        super().__init__()
        self.strategy = FusionStrategy(strategy)
        self.gate = None
        self.block = None
        if self.strategy is FusionStrategy.GATE:
            self.gate = AttentionGate(local_channels, global_channels, inter_channels, gate_norm)
            self.dropout = nn.Dropout(dropout)
        elif self.strategy is FusionStrategy.CONCAT:
            self.block = FusionBlock(local_channels + global_channels, local_channels, dropout)
        else:
            if local_channels != global_channels:
                raise ValueError("product fusion needs equal local and global channel counts")
            self.block = FusionBlock(local_channels, local_channels, dropout)
        self.projection = FusedProjection(local_channels, fuse_channels)

    def forward(self, local: torch.Tensor, global_map: torch.Tensor) -> dict:
        aligned = align_spatial(global_map, tuple(local.shape[-2:]))
        out = {"aligned_global": aligned}
        if self.strategy is FusionStrategy.GATE:
            gated, alpha = self.gate(local, aligned)
            out["alpha"] = alpha
            fused = self.dropout(gated)
        elif self.strategy is FusionStrategy.CONCAT:
            fused = fuse_concat(local, aligned, self.block)
        else:
            fused = fuse_product(local, aligned, self.block)
        out["fused"] = fused
        out["projected"] = self.projection(fused)
        return out
