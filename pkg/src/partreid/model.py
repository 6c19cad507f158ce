"""Backbone encoder and the assembled part-attention re-identification network."""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import PixelAttentionPredictor, conv_bn_relu, uniform_attention, visibility_scores
from .focuser import FeatureFocuser, PartEmbeddings
from .losses import IdentityClassifier


class Encoder(nn.Module):
    """Four conv-BN-ReLU stages; stages 2 and 3 halve the resolution (64x32 -> 16x8)."""

    def __init__(self, out_channels: int = 256, widths=(32, 64, 128)):
        super().__init__()
        w1, w2, w3 = widths
        self.stages = nn.Sequential(
            conv_bn_relu(3, w1),
            conv_bn_relu(w1, w2, stride=2),
            conv_bn_relu(w2, w3, stride=2),
            conv_bn_relu(w3, out_channels),
        )
        self.out_channels = out_channels

    def forward(self, images):
        return self.stages(images)


class PartReIDNet(nn.Module):
    def __init__(self, num_identities: int, num_parts: int = 6, feat_channels: int = 256,
                 mid_channels: int = 128, embed_dim: int = 128, gate_kernel: int = 3,
                 encoder_widths=(32, 64, 128), use_part_attention: bool = True,
                 use_focuser: bool = True, single_stage_predictor: bool = False):
        super().__init__()
        self.num_parts = num_parts
        self.use_part_attention = use_part_attention
        self.encoder = Encoder(feat_channels, encoder_widths)
        self.predictor = PixelAttentionPredictor(feat_channels, mid_channels, num_parts,
                                                 single_stage=single_stage_predictor)
        self.focuser = FeatureFocuser(feat_channels, embed_dim, gate_kernel, bypass=not use_focuser)
        self.classifier = IdentityClassifier(embed_dim, num_identities)

    def attend(self, features):
        if self.use_part_attention:
            return self.predictor(features)
        return uniform_attention(features, self.num_parts)

    def forward_features(self, features: torch.Tensor, threshold: float = 0.5) -> PartEmbeddings:
        attention = self.attend(features)
        foreground, parts = self.focuser(features, attention)
        fg_logits, part_logits = self.classifier(foreground, parts)
        return PartEmbeddings(foreground, parts, visibility_scores(attention.detach(), threshold),
                              attention, fg_logits, part_logits)

    def forward(self, images: torch.Tensor, threshold: float = 0.5) -> PartEmbeddings:
        return self.forward_features(self.encoder(images), threshold)
