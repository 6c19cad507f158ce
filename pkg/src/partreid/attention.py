"""Part attention block: pixel-level part predictor, parsing-supervised loss, visibility."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_CLAMP = 1e-12


class BatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that falls back to running statistics on tiny training batches.

    Batch statistics over fewer than ``min_batch`` samples are too noisy to be
    useful (and undefined for a single sample with 1x1 maps).
    """

    def __init__(self, num_features, min_batch: int = 4, **kwargs):
        super().__init__(num_features, **kwargs)
        self.min_batch = min_batch

    def forward(self, x):
        if self.training and x.shape[0] < self.min_batch:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=False, eps=self.eps)
        return super().forward(x)


def conv_bn_relu(c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
        BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class PixelAttentionPredictor(nn.Module):
    """Two conv-BN-ReLU stages then a softmax over ``num_parts + 1`` channels.

    Channel 0 is background; channels ``1..num_parts`` are the body parts.
    ``single_stage=True`` drops the hidden stage (the "w/o pixel-level
    predictor" ablation).
    """

    def __init__(self, in_channels: int = 256, mid_channels: int = 128, num_parts: int = 6,
                 single_stage: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.num_parts = num_parts
        if single_stage:
            self.stage1 = nn.Identity()
            self.stage2 = conv_bn_relu(in_channels, num_parts + 1)
        else:
            self.stage1 = conv_bn_relu(in_channels, mid_channels)
            self.stage2 = conv_bn_relu(mid_channels, num_parts + 1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 4 or features.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) features, got {tuple(features.shape)}")
        return self.stage2(self.stage1(features))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(features), dim=1)


def smoothed_targets(
    labels: torch.Tensor, num_classes: int, smoothing: float, dtype: torch.dtype | None = None
) -> torch.Tensor:
    """Per-pixel target distribution, shape ``(N, K, H, W)``.

    Labelled class gets ``1 - smoothing + smoothing / K``, all others ``smoothing / K``.
    """
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label values must lie in [0, {num_classes - 1}]")
    one_hot = F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(dtype or torch.get_default_dtype())
    return one_hot * (1.0 - smoothing) + smoothing / num_classes


def part_attention_loss(attention: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """Label-smoothed pixel-wise cross-entropy, averaged over pixels and samples.

    attention: ``(N, K, H, W)`` probabilities (or ``(K, H, W)``); labels: ``(N, H, W)`` ints.
    """
    if attention.dim() == 3:
        attention, labels = attention.unsqueeze(0), labels.unsqueeze(0)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    if attention.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"attention grid {tuple(attention.shape[-2:])} != label grid {tuple(labels.shape[-2:])}")
    k = attention.shape[1]
    target = smoothed_targets(labels, k, smoothing, attention.dtype)
    log_p = torch.log(attention.clamp_min(LOG_CLAMP))
    return -(target * log_p).sum(dim=1).mean()


def visibility_scores(attention: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary per-part visibility: peak part probability strictly above ``threshold``.

    Returns a bool tensor ``(N, num_parts)`` (or ``(num_parts,)`` for a single map);
    the background channel is not scored.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    parts = attention[..., 1:, :, :]
    return parts.amax(dim=(-2, -1)) > threshold


def uniform_attention(like: torch.Tensor, num_parts: int) -> torch.Tensor:
    n, _, h, w = like.shape
    return like.new_full((n, num_parts + 1, h, w), 1.0 / (num_parts + 1))
