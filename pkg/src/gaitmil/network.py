"""The forward computation: per-frame residual backbone, frame-level attention
pooling inside each bag, bag-level attention aggregation, horizontal pooling
into 16 body parts, per-part projection, and per-part BNNeck heads.

Attention is the ungated tanh form, score = w^T tanh(V u), where u is the
spatial global average of a feature map. A frame's weight is a scalar applied
to its whole map, and likewise for bags, so pooled features stay convex
combinations of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .clustering import BagPartition
from .errors import ArgumentError, ConfigurationError, NumericError
from .sampling import SampledClip

N_PARTS = 16
N_CLASSES = 3
INPUT_HEIGHT = 64
INPUT_WIDTH = 44


@dataclass
class ModelConfig:
    n_bags: int = 3
    frames_per_clip: int = 30
    backbone_widths: tuple[int, int, int] = (32, 64, 128)
    embed_dim: int = 128
    attention_dim: int = 128
    mil_enabled: bool = True

    def __post_init__(self) -> None:
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.n_bags < 1:
            raise ArgumentError("n_bags must be >= 1")
        if self.frames_per_clip < 1:
            raise ArgumentError("frames_per_clip must be >= 1")
        if len(self.backbone_widths) != 3 or any(w < 1 for w in self.backbone_widths):
            raise ArgumentError("backbone_widths must be three positive channel counts")
        if self.embed_dim < 1 or self.attention_dim < 1:
            raise ArgumentError("embed_dim and attention_dim must be >= 1")


class PartEmbeddingSet(NamedTuple):
    metric: torch.Tensor  # [N, 16, d], pre-BN, feeds the triplet loss
    logits: torch.Tensor  # [N, 16, 3], post-BN bias-free classifier outputs


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class FrameBackbone(nn.Module):
    """Shared-weight residual CNN applied to every frame independently.

    64x44 input -> stride-2 stages at 2 and 3 -> 16x11 maps, so the 16
    horizontal strips downstream are single rows.
    """

    def __init__(self, widths: tuple[int, int, int]):
        super().__init__()
        w1, w2, w3 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(1, w1, 3, padding=1, bias=False), nn.BatchNorm2d(w1), nn.ReLU(inplace=True)
        )
        self.stage1 = ResidualBlock(w1, w1, stride=1)
        self.stage2 = ResidualBlock(w1, w2, stride=2)
        self.stage3 = ResidualBlock(w2, w3, stride=2)
        self.out_channels = w3

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: [N, 1, S, H, W] -> feature volume [N, c, S, H/4, W/4]
        if frames.ndim != 5 or frames.shape[1] != 1:
            raise ArgumentError(f"expected [N, 1, S, H, W] frames, got {tuple(frames.shape)}")
        if not torch.isfinite(frames).all():
            raise NumericError("backbone input contains non-finite values")
        n, _, s, h, w = frames.shape
        x = frames.transpose(1, 2).reshape(n * s, 1, h, w)
        x = self.stage3(self.stage2(self.stage1(self.stem(x))))
        x = x.reshape(n, s, self.out_channels, x.shape[-2], x.shape[-1])
        return x.transpose(1, 2).contiguous()


class AttentionScorer(nn.Module):
    """Ungated tanh attention: score(u) = w^T tanh(V u)."""

    def __init__(self, in_dim: int, attention_dim: int):
        super().__init__()
        self.V = nn.Linear(in_dim, attention_dim, bias=False)
        self.w = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, descriptors: torch.Tensor) -> torch.Tensor:
        return self.w(torch.tanh(self.V(descriptors))).squeeze(-1)


def attention_pool_frames(
    features: torch.Tensor,
    scorer: AttentionScorer,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool a bag's frames into one map by attention over the frame axis.

    features: [N, c, S_k, H', W']; mask: [N, S_k] bool, True marks real frames.
    Returns (pooled [N, c, H', W'], weights [N, S_k]). Masked slots get weight
    exactly 0 because their scores are -inf before the softmax.
    """
    if features.ndim != 5:
        raise ArgumentError(f"expected [N, c, S, H, W] features, got {tuple(features.shape)}")
    if mask is not None:
        if mask.shape != (features.shape[0], features.shape[2]):
            raise ArgumentError("mask must be [N, S] matching the frame axis")
        if (~mask).all(dim=1).any():
            raise ArgumentError("a bag with every frame masked violates the nonempty-bag contract")
    descriptors = features.mean(dim=(3, 4)).transpose(1, 2)  # [N, S, c]
    scores = scorer(descriptors)  # [N, S]
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=1)
    pooled = torch.einsum("ns,ncshw->nchw", weights, features)
    return pooled, weights


def attention_aggregate_bags(
    bag_features: torch.Tensor,
    scorer: AttentionScorer,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Combine per-bag maps into the clip representation H = sum_k alpha_k h_k.

    bag_features: [N, K, c, H', W']; mask: [N, K] bool, True marks bags the
    sample actually has (K_eff can vary per sample).
    """
    if bag_features.ndim != 5:
        raise ArgumentError(f"expected [N, K, c, H, W] bags, got {tuple(bag_features.shape)}")
    if mask is not None:
        if mask.shape != bag_features.shape[:2]:
            raise ArgumentError("mask must be [N, K] matching the bag axis")
        if (~mask).all(dim=1).any():
            raise ArgumentError("every sample needs at least one bag")
    descriptors = bag_features.mean(dim=(3, 4))  # [N, K, c], spatial-only average
    scores = scorer(descriptors)  # [N, K]
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=1)
    aggregated = torch.einsum("nk,nkchw->nchw", weights, bag_features)
    return aggregated, weights


def horizontal_pool(features: torch.Tensor, n_parts: int = N_PARTS) -> torch.Tensor:
    """Split rows into n_parts strips; per strip and channel return max + mean."""
    if features.ndim != 4:
        raise ArgumentError(f"expected [N, c, H, W] features, got {tuple(features.shape)}")
    n, c, h, w = features.shape
    if h % n_parts != 0:
        raise ConfigurationError(f"feature height {h} is not divisible into {n_parts} strips")
    strips = features.reshape(n, c, n_parts, h // n_parts, w)
    pooled = strips.amax(dim=(3, 4)) + strips.mean(dim=(3, 4))  # [N, c, parts]
    return pooled.transpose(1, 2).contiguous()


class PartProjection(nn.Module):
    """16 independent bias-free linear maps, one per horizontal part."""

    def __init__(self, n_parts: int, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_parts, in_dim, out_dim))
        for p in range(n_parts):
            nn.init.xavier_uniform_(self.weight[p])

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        if parts.ndim != 3 or parts.shape[1] != self.weight.shape[0]:
            raise ArgumentError(f"expected [N, {self.weight.shape[0]}, c] parts, got {tuple(parts.shape)}")
        return torch.einsum("npc,pcd->npd", parts, self.weight)


class PartBNNeck(nn.Module):
    """Per-part BNNeck: BN without learnable shift, then a bias-free classifier.

    The metric embedding (triplet input) is the pre-BN tensor; logits come from
    the normalized tensor. Before any training step the running statistics are
    the BN defaults (mean 0, var 1), which is valid, just untrained.
    """

    def __init__(self, n_parts: int, dim: int, n_classes: int):
        super().__init__()
        self.norms = nn.ModuleList([nn.BatchNorm1d(dim) for _ in range(n_parts)])
        for bn in self.norms:
            bn.bias.requires_grad_(False)  # shift stays frozen at 0
        self.classifier = nn.Parameter(torch.empty(n_parts, dim, n_classes))
        nn.init.normal_(self.classifier, std=0.001)

    def forward(self, embeddings: torch.Tensor) -> PartEmbeddingSet:
        if embeddings.ndim != 3 or embeddings.shape[1] != len(self.norms):
            raise ArgumentError(f"expected [N, {len(self.norms)}, d] embeddings, got {tuple(embeddings.shape)}")
        normalized = torch.stack(
            [bn(embeddings[:, p]) for p, bn in enumerate(self.norms)], dim=1
        )
        logits = torch.einsum("npd,pdk->npk", normalized, self.classifier)
        return PartEmbeddingSet(metric=embeddings, logits=logits)


def assemble_batch(
    clips: list[SampledClip], partitions: list[BagPartition] | None
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Stack clips into [N, S, H, W] frames and [N, S] bag assignments."""
    if not clips:
        raise ArgumentError("empty clip list")
    frames = torch.from_numpy(np.stack([c.frames for c in clips])).float()
    if partitions is None:
        return frames, None
    if len(partitions) != len(clips):
        raise ArgumentError(f"{len(clips)} clips but {len(partitions)} partitions")
    bag_ids = torch.from_numpy(np.stack([p.assignment for p in partitions])).long()
    return frames, bag_ids


class GaitMILNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = FrameBackbone(config.backbone_widths)
        channels = self.backbone.out_channels
        self.frame_attention = AttentionScorer(channels, config.attention_dim)
        self.bag_attention = AttentionScorer(channels, config.attention_dim)
        self.projection = PartProjection(N_PARTS, channels, config.embed_dim)
        self.neck = PartBNNeck(N_PARTS, config.embed_dim, N_CLASSES)
        self.apply(_init_module)

    def forward(
        self, frames: torch.Tensor, bag_assignments: torch.Tensor | None = None
    ) -> tuple[PartEmbeddingSet, dict[str, torch.Tensor]]:
        """frames: [N, S, 64, 44] in [0, 1]; bag_assignments: [N, S] ints or None.

        With MIL disabled (or no assignments given) every frame lands in one
        bag, which is exactly the K=1 path. Returns the part embeddings plus
        attention diagnostics {frame_weights [N, K, S], bag_weights [N, K]}.
        """
        if frames.ndim != 4:
            raise ArgumentError(f"expected [N, S, H, W] frames, got {tuple(frames.shape)}")
        if frames.shape[2:] != (INPUT_HEIGHT, INPUT_WIDTH):
            raise ArgumentError(
                f"frames must be {INPUT_HEIGHT}x{INPUT_WIDTH}, got {tuple(frames.shape[2:])}"
            )
        n, s = frames.shape[:2]
        if not self.config.mil_enabled or bag_assignments is None:
            bag_assignments = torch.zeros(n, s, dtype=torch.long, device=frames.device)
        if bag_assignments.shape != (n, s):
            raise ArgumentError("bag_assignments must be [N, S]")
        if int(bag_assignments.min()) < 0:
            raise ArgumentError("bag assignments must be non-negative")

        volume = self.backbone(frames.unsqueeze(1))  # [N, c, S, 16, 11]
        n_bags = int(bag_assignments.max()) + 1
        c, fh, fw = volume.shape[1], volume.shape[3], volume.shape[4]
        bag_maps = volume.new_zeros(n, n_bags, c, fh, fw)
        frame_weights = volume.new_zeros(n, n_bags, s)
        bag_mask = torch.zeros(n, n_bags, dtype=torch.bool, device=frames.device)
        for k in range(n_bags):
            in_bag = bag_assignments == k  # [N, S]
            has_bag = in_bag.any(dim=1)
            if not bool(has_bag.any()):
                continue
            pooled, weights = attention_pool_frames(
                volume[has_bag], self.frame_attention, in_bag[has_bag]
            )
            bag_maps[has_bag, k] = pooled
            frame_weights[has_bag, k] = weights
            bag_mask[has_bag, k] = True

        aggregated, bag_weights = attention_aggregate_bags(bag_maps, self.bag_attention, bag_mask)
        parts = horizontal_pool(aggregated)
        embeddings = self.projection(parts)
        output = self.neck(embeddings)
        diagnostics = {
            "frame_weights": frame_weights,
            "bag_weights": bag_weights,
            "aggregated": aggregated,
        }
        return output, diagnostics

    def forward_clips(
        self, clips: list[SampledClip], partitions: list[BagPartition] | None
    ) -> tuple[PartEmbeddingSet, dict[str, torch.Tensor]]:
        frames, bag_ids = assemble_batch(clips, partitions)
        return self.forward(frames, bag_ids)


def _init_module(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
    elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
