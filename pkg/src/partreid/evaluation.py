"""Visibility-aware retrieval evaluation (CMC / mAP) and attention quality metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .focuser import PartEmbeddings
from .losses import visibility_aware_distance

RANKS = (1, 5, 10)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray
    gallery_cams: np.ndarray
    parts_used: np.ndarray | None = None

    def __post_init__(self):
        nq, ng = self.values.shape
        if (len(self.query_ids), len(self.query_cams)) != (nq, nq):
            raise ValueError("query ids/cams do not match the distance matrix rows")
        if (len(self.gallery_ids), len(self.gallery_cams)) != (ng, ng):
            raise ValueError("gallery ids/cams do not match the distance matrix columns")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distance matrix contains non-finite entries")


@dataclass
class EvalReport:
    rank_k: dict
    mAP: float
    num_queries: int
    num_excluded: int = 0
    visibility_rates: list = field(default_factory=list)
    attention_accuracy: float | None = None

    def to_dict(self) -> dict:
        out = {f"rank{k}": round(float(v), 4) for k, v in self.rank_k.items()}
        out["mAP"] = round(float(self.mAP), 4)
        out["num_queries"] = self.num_queries
        out["num_excluded"] = self.num_excluded
        for i, rate in enumerate(self.visibility_rates, start=1):
            out[f"visibility_part{i}"] = round(float(rate), 4)
        if self.attention_accuracy is not None:
            out["attention_pixel_accuracy"] = round(float(self.attention_accuracy), 4)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def distance_matrix(queries: PartEmbeddings, gallery: PartEmbeddings, query_ids, gallery_ids,
                    query_cams, gallery_cams) -> DistanceMatrix:
    if len(queries) == 0 or len(gallery) == 0:
        raise ValueError("query and gallery must be non-empty")
    with torch.no_grad():
        dist, used = visibility_aware_distance(queries, gallery)
    return DistanceMatrix(dist.double().cpu().numpy(), np.asarray(query_ids), np.asarray(gallery_ids),
                          np.asarray(query_cams), np.asarray(gallery_cams), used.cpu().numpy())


def _ranked_relevance(dm: DistanceMatrix, q: int) -> np.ndarray:
    keep = ~((dm.gallery_ids == dm.query_ids[q]) & (dm.gallery_cams == dm.query_cams[q]))
    order = np.argsort(dm.values[q], kind="stable")
    order = order[keep[order]]
    return dm.gallery_ids[order] == dm.query_ids[q]


def cmc_map(dm: DistanceMatrix, ranks: Sequence[int] = RANKS) -> EvalReport:
    """CMC and mAP with same-identity same-camera gallery entries removed.

    Ties in distance resolve by gallery index. Queries without any valid
    match are left out of both averages and counted in ``num_excluded``.
    """
    hits = {k: 0 for k in ranks}
    aps = []
    excluded = 0
    for q in range(len(dm.query_ids)):
        relevant = _ranked_relevance(dm, q)
        positions = np.flatnonzero(relevant) + 1
        if positions.size == 0:
            excluded += 1
            continue
        for k in ranks:
            hits[k] += positions[0] <= k
        aps.append(np.mean(np.arange(1, positions.size + 1) / positions))
    n = len(aps)
    if n == 0:
        return EvalReport({k: 0.0 for k in ranks}, 0.0, 0, excluded)
    return EvalReport({k: hits[k] / n for k in ranks}, float(np.mean(aps)), n, excluded)


def query_average_precisions(dm: DistanceMatrix) -> list:
    """AP per query in row order (``None`` for queries without valid matches)."""
    out = []
    for q in range(len(dm.query_ids)):
        positions = np.flatnonzero(_ranked_relevance(dm, q)) + 1
        out.append(float(np.mean(np.arange(1, positions.size + 1) / positions)) if positions.size else None)
    return out


def brute_force_ap(ranked_relevance: Sequence[bool]) -> float:
    """Average precision straight from the definition, for cross-checking."""
    total, found = 0.0, 0
    for rank, rel in enumerate(ranked_relevance, start=1):
        if rel:
            found += 1
            total += found / rank
    return total / found if found else 0.0


def attention_pixel_accuracy(attention: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction of pixels whose argmax channel equals the parsing label (ties -> lowest channel)."""
    if attention.shape[-2:] != labels.shape[-2:]:
        raise ValueError("attention and label grids differ")
    pred = attention.argmax(dim=-3)
    return float((pred == labels.to(pred.device)).double().mean())


@torch.no_grad()
def extract(model, images: torch.Tensor, threshold: float = 0.5, batch_size: int = 64) -> PartEmbeddings:
    was_training = model.training
    model.eval()
    chunks = [model(images[i:i + batch_size], threshold) for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return PartEmbeddings(*(torch.cat([getattr(c, f) for c in chunks]) for f in
                            ("foreground", "parts", "visibility", "attention", "foreground_logits", "part_logits")))


def evaluate(model, query: dict, gallery: dict, threshold: float = 0.5) -> tuple[EvalReport, DistanceMatrix]:
    """Evaluate a model on stacked query/gallery arrays (see ``synthetic.stack_split``)."""
    q_emb = extract(model, torch.as_tensor(query["images"]), threshold)
    g_emb = extract(model, torch.as_tensor(gallery["images"]), threshold)
    dm = distance_matrix(q_emb, g_emb, query["identities"], gallery["identities"],
                         query["cameras"], gallery["cameras"])
    report = cmc_map(dm)
    report.visibility_rates = q_emb.visibility.double().mean(dim=0).tolist()
    attention = torch.cat([q_emb.attention, g_emb.attention])
    labels = torch.cat([torch.as_tensor(query["labels"]), torch.as_tensor(gallery["labels"])])
    report.attention_accuracy = attention_pixel_accuracy(attention, labels)
    return report, dm
