"""Relation, Euclidean and cosine metric classifiers.

Each metric turns a (query, prototype) pair into a distance ``d`` where
smaller means closer, and class probabilities are ``softmax(-d)`` over the
episode's prototypes.  Everything is batched: queries ``(n_q, c, h, w)``
against prototypes ``(N, c, h, w)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch
import torch.nn as nn

from .autograd import log_softmax
from .errors import ContractViolation

COSINE_SCALE = 10.0
_NORM_FLOOR = 1e-8


class MetricId(str, Enum):
    RELATION = "relation"
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"

    @property
    def short(self) -> str:
        return self.value[0]


METRICS = (MetricId.RELATION, MetricId.EUCLIDEAN, MetricId.COSINE)


@dataclass
class MetricPrediction:
    """Per-query class distribution of one metric, kept in log space.

    ``log_probs`` is ``(n_q, N)`` for the global path and ``(n_q, h*w, N)``
    for the patch-wise path.
    """

    metric: MetricId
    log_probs: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    @property
    def n_way(self) -> int:
        return self.log_probs.shape[-1]


class RelationHead(nn.Module):
    """Learned similarity: two conv blocks over concat(P, Q), GAP, linear -> score."""

    def __init__(self, feature_channels: int = 64, hidden: int = 64):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(2 * feature_channels, hidden, 3, padding=1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU()
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, padding=1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU()
        )
        self.fc = nn.Linear(hidden, 1)

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        out = self.block2(self.block1(pairs))
        return self.fc(out.mean(dim=(-2, -1))).squeeze(-1)


def _check_pair(name: str, q: torch.Tensor, p: torch.Tensor) -> None:
    if q.shape[1:] != p.shape[1:]:
        raise ContractViolation(f"{name}: shape mismatch {tuple(q.shape)} vs {tuple(p.shape)}")


def _gap(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(-2, -1)) if x.dim() == 4 else x


# --- batched distances over c-vectors: (n, c) x (N, c) -> (n, N) -------------

def euclidean_from_vectors(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    diff = q.unsqueeze(1) - p.unsqueeze(0)
    return (diff * diff).sum(-1) / q.shape[-1]


def cosine_from_vectors(q: torch.Tensor, p: torch.Tensor, scale: float = COSINE_SCALE) -> torch.Tensor:
    qn = q.norm(dim=-1)
    pn = p.norm(dim=-1)
    if bool((qn < _NORM_FLOOR).any()) or bool((pn < _NORM_FLOOR).any()):
        raise ContractViolation("cosine_distance: degenerate feature with near-zero norm")
    cos = (q @ p.t()) / (qn.unsqueeze(1) * pn.unsqueeze(0))
    return -scale * cos


def relation_from_maps(q: torch.Tensor, p: torch.Tensor, head: RelationHead) -> torch.Tensor:
    """q (n, c, h, w), p (N, c, h, w) -> negated relation scores (n, N)."""
    n, N = q.shape[0], p.shape[0]
    qq = q.unsqueeze(1).expand(n, N, *q.shape[1:])
    pp = p.unsqueeze(0).expand(n, N, *p.shape[1:])
    pairs = torch.cat([pp, qq], dim=2).reshape(n * N, 2 * q.shape[1], *q.shape[2:])
    return -head(pairs).reshape(n, N)


# --- single-pair forms (FeatureMap x FeatureMap -> scalar) ------------------

def euclidean_distance(Q: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    _check_pair("euclidean_distance", Q[None], P[None])
    return euclidean_from_vectors(_gap(Q[None]), _gap(P[None]))[0, 0]


def cosine_distance(Q: torch.Tensor, P: torch.Tensor, scale: float = COSINE_SCALE) -> torch.Tensor:
    _check_pair("cosine_distance", Q[None], P[None])
    return cosine_from_vectors(_gap(Q[None]), _gap(P[None]), scale)[0, 0]


def relation_distance(Q: torch.Tensor, P: torch.Tensor, head: RelationHead) -> torch.Tensor:
    _check_pair("relation_distance", Q[None], P[None])
    return relation_from_maps(Q[None], P[None], head)[0, 0]


# --- predictions and losses ---------------------------------------------------

def distances(metric: MetricId, queries: torch.Tensor, prototypes: torch.Tensor,
              head: Optional[RelationHead] = None) -> torch.Tensor:
    """Global-path distances, (n_q, N)."""
    metric = MetricId(metric)
    _check_pair(f"{metric.value}_distance", queries, prototypes)
    if metric is MetricId.EUCLIDEAN:
        return euclidean_from_vectors(_gap(queries), _gap(prototypes))
    if metric is MetricId.COSINE:
        return cosine_from_vectors(_gap(queries), _gap(prototypes))
    if head is None:
        raise ContractViolation("relation metric requires a RelationHead")
    return relation_from_maps(queries, prototypes, head)


def predict_from_distances(metric: MetricId, d: torch.Tensor) -> MetricPrediction:
    if d.shape[-1] < 2:
        raise ContractViolation(f"metric_predict needs N >= 2 classes, got {d.shape[-1]}")
    return MetricPrediction(MetricId(metric), log_softmax(-d, axis=-1))


def metric_predict(metric: MetricId, queries: torch.Tensor, prototypes: torch.Tensor,
                   head: Optional[RelationHead] = None) -> MetricPrediction:
    return predict_from_distances(metric, distances(metric, queries, prototypes, head))


def _check_labels(labels: torch.Tensor, n_way: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_way):
        raise ContractViolation(f"labels must lie in [0, {n_way})")
    return labels


def cross_entropy(log_probs: torch.Tensor, labels, reduction: str = "sum") -> torch.Tensor:
    """-sum log p(label); for (n, P, N) inputs every patch p shares its query's label."""
    labels = _check_labels(labels, log_probs.shape[-1])
    if log_probs.dim() == 3:
        labels = labels[:, None].expand(log_probs.shape[:2])
    picked = log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if reduction == "sum":
        return -picked.sum()
    if reduction == "mean":
        return -picked.mean()
    raise ContractViolation(f"unknown reduction {reduction!r}")


def metric_loss(pred: MetricPrediction, labels, reduction: str = "sum") -> torch.Tensor:
    return cross_entropy(pred.log_probs, labels, reduction)


def patchwise_predict(metric: MetricId, queries: torch.Tensor, prototypes: torch.Tensor,
                      head: Optional[RelationHead] = None) -> MetricPrediction:
    """Classify every spatial position of every query against GAP'd prototypes.

    Returns log-probs of shape (n_q, h*w, N).
    """
    metric = MetricId(metric)
    _check_pair(f"{metric.value}_distance", queries, prototypes)
    n, c, h, w = queries.shape
    patches = queries.permute(0, 2, 3, 1).reshape(n * h * w, c)
    pvec = _gap(prototypes)
    if metric is MetricId.EUCLIDEAN:
        d = euclidean_from_vectors(patches, pvec)
    elif metric is MetricId.COSINE:
        d = cosine_from_vectors(patches, pvec)
    else:
        if head is None:
            raise ContractViolation("relation metric requires a RelationHead")
        d = relation_from_maps(patches[:, :, None, None], pvec[:, :, None, None], head)
    return predict_from_distances(metric, d.reshape(n, h * w, -1))


def patchwise_metric_loss(pred: MetricPrediction, labels, reduction: str = "sum") -> torch.Tensor:
    return cross_entropy(pred.log_probs, labels, reduction)
