"""Fine-grained feature focuser: attention-masked, gate-filtered part embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

POOL_EPS = 1e-6


@dataclass
class PartEmbeddings:
    """Batched embeddings. ``parts`` is ``(N, X, D)``; ``visibility`` is ``(N, X)`` bool."""

    foreground: torch.Tensor
    parts: torch.Tensor
    visibility: torch.Tensor
    attention: Optional[torch.Tensor] = None
    foreground_logits: Optional[torch.Tensor] = None
    part_logits: Optional[torch.Tensor] = None

    def __len__(self):
        return self.foreground.shape[0]

    @property
    def num_parts(self) -> int:
        return self.parts.shape[1]

    def __getitem__(self, idx) -> "PartEmbeddings":
        def pick(t):
            return None if t is None else t[idx]
        return PartEmbeddings(pick(self.foreground), pick(self.parts), pick(self.visibility),
                              pick(self.attention), pick(self.foreground_logits), pick(self.part_logits))

    def detach(self) -> "PartEmbeddings":
        def d(t):
            return None if t is None else t.detach()
        return PartEmbeddings(d(self.foreground), d(self.parts), d(self.visibility),
                              d(self.attention), d(self.foreground_logits), d(self.part_logits))


def foreground_map(attention: torch.Tensor) -> torch.Tensor:
    """Sum of the part channels, i.e. one minus background. Keeps a singleton channel dim."""
    return attention[..., 1:, :, :].sum(dim=-3, keepdim=True)


def apply_attention(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Broadcast a single-channel mask over every feature channel."""
    if features.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"spatial mismatch: {tuple(features.shape[-2:])} vs {tuple(mask.shape[-2:])}")
    return features * mask


class GatedConv2d(nn.Module):
    """``conv_feat(x) * sigmoid(conv_gate(x))``."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.feature_conv = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.gate_conv = nn.Conv2d(channels, channels, kernel_size, padding=pad)

    def forward(self, x):
        return self.feature_conv(x) * torch.sigmoid(self.gate_conv(x))


def pool_parts(filtered: torch.Tensor, masks: torch.Tensor, eps: float = POOL_EPS) -> torch.Tensor:
    """Attention-weighted average pooling.

    filtered: ``(N, M, D, H, W)`` gated features per mask; masks: ``(N, M, H, W)``.
    Returns ``(N, M, D)``.
    """
    weights = masks.unsqueeze(2)
    total = (filtered * weights).sum(dim=(-2, -1))
    mass = masks.sum(dim=(-2, -1)).clamp_min(eps).unsqueeze(-1)
    return total / mass


class FeatureFocuser(nn.Module):
    """Masks one shared 1x1 embedding ``K1`` with the foreground map and each part map.

    Masked maps go through a single shared gated convolution and are pooled
    with their own mask as weights. ``bypass=True`` skips masking and gating
    and returns plain global average pooling of ``K1`` for every output (the
    "w/o focuser" ablation).
    """

    def __init__(self, in_channels: int = 256, embed_dim: int = 128, gate_kernel: int = 3,
                 bypass: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.embed_conv = nn.Conv2d(in_channels, embed_dim, 1)
        self.gate = GatedConv2d(embed_dim, gate_kernel)
        self.bypass = bypass

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {features.shape[-3]}")
        return self.embed_conv(features)

    def forward(self, features: torch.Tensor, attention: torch.Tensor):
        """Returns ``(foreground (N, D), parts (N, X, D))``."""
        k1 = self.embed(features)
        n, d, h, w = k1.shape
        if self.bypass:
            pooled = k1.mean(dim=(-2, -1))
            return pooled, pooled.unsqueeze(1).expand(n, attention.shape[1] - 1, d)
        masks = torch.cat([foreground_map(attention), attention[:, 1:]], dim=1)  # (N, 1+X, H, W)
        m = masks.shape[1]
        masked = apply_attention(k1.unsqueeze(1), masks.unsqueeze(2))  # (N, M, D, H, W)
        filtered = self.gate(masked.reshape(n * m, d, h, w)).reshape(n, m, d, h, w)
        pooled = pool_parts(filtered, masks)
        return pooled[:, 0], pooled[:, 1:]
