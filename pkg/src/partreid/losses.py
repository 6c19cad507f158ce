"""Training objective: part triplet loss, identity cross-entropy, weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .focuser import PartEmbeddings


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    num_parts: int = 6

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


class IdentityClassifier(nn.Module):
    """One linear head on the foreground vector plus one head shared by all parts."""

    def __init__(self, embed_dim: int, num_identities: int):
        super().__init__()
        self.num_identities = num_identities
        self.foreground_head = nn.Linear(embed_dim, num_identities)
        self.part_head = nn.Linear(embed_dim, num_identities)

    def forward(self, foreground, parts):
        return self.foreground_head(foreground), self.part_head(parts)


def per_part_distances(parts_a: torch.Tensor, parts_b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance per part for every pair: ``(n, X, D), (m, X, D) -> (n, m, X)``."""
    return torch.linalg.vector_norm(parts_a.unsqueeze(1) - parts_b.unsqueeze(0), dim=-1)


def pairwise_part_distance(parts_a: torch.Tensor, parts_b: torch.Tensor) -> torch.Tensor:
    """Mean over parts of the per-part Euclidean distance, ``(n, m)``."""
    return per_part_distances(parts_a, parts_b).mean(dim=-1)


def visibility_aware_distance(a: PartEmbeddings, b: PartEmbeddings):
    """Inference distance between two batches.

    Averages part distances over parts visible in both samples; pairs with no
    commonly visible part fall back to the foreground-vector distance.
    Returns ``(distances (n, m), parts_used (n, m))``.
    """
    per_part = per_part_distances(a.parts, b.parts)
    common = a.visibility.unsqueeze(1) & b.visibility.unsqueeze(0)
    used = common.sum(dim=-1)
    summed = (per_part * common).sum(dim=-1)
    part_mean = summed / used.clamp_min(1)
    fallback = torch.linalg.vector_norm(a.foreground.unsqueeze(1) - b.foreground.unsqueeze(0), dim=-1)
    return torch.where(used > 0, part_mean, fallback), used


def part_distance(a: PartEmbeddings, b: PartEmbeddings, use_visibility: bool = False) -> torch.Tensor:
    """Distance between two single samples (unbatched ``PartEmbeddings``)."""
    a1, b1 = a[None], b[None]
    if use_visibility:
        return visibility_aware_distance(a1, b1)[0][0, 0]
    return pairwise_part_distance(a1.parts, b1.parts)[0, 0]


def batch_hard_mining(dist: torch.Tensor, identities: torch.Tensor):
    """Hardest positive and hardest negative per anchor.

    Ties go to the lowest sample index (``argmax`` returns the first maximum).
    Returns ``(d_ap, d_an, pos_idx, neg_idx)``.
    """
    identities = identities.view(-1)
    same = identities.unsqueeze(0) == identities.unsqueeze(1)
    if same.all():
        raise ValueError("triplet mining needs at least two identities in the batch")
    eye = torch.eye(len(identities), dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    if not pos_mask.any(dim=1).any():
        raise ValueError("triplet mining needs at least one identity with two samples")
    neg_mask = ~same
    inf = torch.finfo(dist.dtype).max
    pos_idx = torch.where(pos_mask, dist, torch.full_like(dist, -inf)).argmax(dim=1)
    neg_idx = torch.where(neg_mask, dist, torch.full_like(dist, inf)).argmin(dim=1)
    rows = torch.arange(len(identities), device=dist.device)
    return dist[rows, pos_idx], dist[rows, neg_idx], pos_idx, neg_idx


def _hinge_mean(d_ap, d_an, valid, margin):
    losses = F.relu(d_ap - d_an + margin)
    return losses[valid].mean()


def part_triplet_loss(parts: torch.Tensor, identities: torch.Tensor, cfg: TripletConfig = TripletConfig(),
                      mining: str = "anchor") -> torch.Tensor:
    """Batch-hard triplet loss on the mean-of-parts distance.

    parts: ``(N, X, D)``. Anchors without any positive in the batch are skipped.
    ``mining="per_part"`` mines hardest positive/negative separately for each
    part and then averages the mined distances.
    """
    identities = torch.as_tensor(identities, device=parts.device).view(-1)
    same = identities.unsqueeze(0) == identities.unsqueeze(1)
    valid = (same.sum(dim=1) > 1)
    if mining == "anchor":
        d_ap, d_an, _, _ = batch_hard_mining(pairwise_part_distance(parts, parts), identities)
    elif mining == "per_part":
        per_part = per_part_distances(parts, parts)
        mined = [batch_hard_mining(per_part[..., x], identities)[:2] for x in range(parts.shape[1])]
        d_ap = torch.stack([m[0] for m in mined]).mean(dim=0)
        d_an = torch.stack([m[1] for m in mined]).mean(dim=0)
    else:
        raise ValueError(f"unknown mining mode {mining!r}")
    return _hinge_mean(d_ap, d_an, valid, cfg.margin)


def global_triplet_loss(vectors: torch.Tensor, identities: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Ordinary batch-hard triplet loss on one vector per sample."""
    return part_triplet_loss(vectors.unsqueeze(1), identities, TripletConfig(margin, 1))


def id_loss(foreground_logits: torch.Tensor, identities: torch.Tensor,
            part_logits: Optional[torch.Tensor] = None, part_mask: Optional[torch.Tensor] = None,
            smoothing: float = 0.1) -> torch.Tensor:
    """Label-smoothed softmax cross-entropy over identity heads.

    The foreground head and the shared part head each contribute their mean
    loss (parts restricted to ``part_mask``); the two are then averaged.
    """
    identities = torch.as_tensor(identities, device=foreground_logits.device).long().view(-1)
    n_classes = foreground_logits.shape[-1]
    if identities.min() < 0 or identities.max() >= n_classes:
        raise ValueError(f"identity labels must lie in [0, {n_classes - 1}]")
    loss = F.cross_entropy(foreground_logits, identities, label_smoothing=smoothing)
    if part_logits is None:
        return loss
    n, x, _ = part_logits.shape
    if part_mask is None:
        part_mask = torch.ones(n, x, dtype=torch.bool, device=part_logits.device)
    if not part_mask.any():
        return loss
    part_targets = identities.unsqueeze(1).expand(n, x)
    part_loss = F.cross_entropy(part_logits[part_mask], part_targets[part_mask], label_smoothing=smoothing)
    return 0.5 * (loss + part_loss)


def total_loss(triplet, identity, part, gamma_part: float = 0.35):
    return triplet + identity + gamma_part * part
