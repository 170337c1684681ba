"""Rotation / global-class auxiliary tasks, the global adaptive loss, and distillation."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .autograd import log_softmax
from .errors import ContractViolation
from .fusion import _reduce, kl_divergence
from .heads import MetricPrediction, cross_entropy

W_METRIC = 0.5
N_ROTATIONS = 4


def rotate_queries(images: torch.Tensor, *label_sets: torch.Tensor):
    """Expand queries to every 90-degree rotation.

    Returns ``(rotated, rotation_labels, *expanded_label_sets)``; the output
    is angle-major: rows ``[k*n:(k+1)*n]`` hold the originals turned by
    ``k * 90`` degrees, and every label set is tiled to match.
    """
    if images.shape[-1] != images.shape[-2]:
        raise ContractViolation(f"rotate_queries: non-square images {tuple(images.shape)}")
    n = images.shape[0]
    rotated = torch.cat([torch.rot90(images, k, dims=(-2, -1)) for k in range(N_ROTATIONS)])
    rot_labels = torch.arange(N_ROTATIONS).repeat_interleave(n)
    tiled = tuple(torch.as_tensor(l).repeat(N_ROTATIONS) for l in label_sets)
    return (rotated, rot_labels) + tiled


class ClassifierHead(nn.Module):
    """Linear classifier applied independently at every spatial position."""

    def __init__(self, feature_channels: int, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.linear = nn.Linear(feature_channels, n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(n, c, h, w) -> log-probabilities (n, h*w, n_classes)."""
        n, c, h, w = features.shape
        patches = features.permute(0, 2, 3, 1).reshape(n, h * w, c)
        return log_softmax(self.linear(patches), axis=-1)


def global_loss(features, global_labels, head: ClassifierHead, reduction: str = "sum"):
    return cross_entropy(head(features), global_labels, reduction)


def rotation_loss(features, rotation_labels, head: ClassifierHead, reduction: str = "sum"):
    if head.n_classes != N_ROTATIONS:
        raise ContractViolation(f"rotation head must have 4 outputs, has {head.n_classes}")
    return cross_entropy(head(features), rotation_labels, reduction)


class GalParams(nn.Module):
    """Learnable auxiliary log-temperatures plus the base bias ``lam``."""

    def __init__(self, lam: float = 0.5, use_global: bool = True, use_rotation: bool = True):
        super().__init__()
        if lam < 0:
            raise ContractViolation(f"lambda must be nonnegative, got {lam}")
        self.log_theta_sq = nn.Parameter(torch.zeros(2))  # (G, R)
        self.lam = float(lam)
        self.use_global = use_global
        self.use_rotation = use_rotation

    @property
    def theta_sq(self) -> torch.Tensor:
        return self.log_theta_sq.exp()

    def weights(self) -> torch.Tensor:
        return torch.exp(-self.log_theta_sq) + self.lam


def gal_loss(L_M: torch.Tensor, L_G: Optional[torch.Tensor], L_R: Optional[torch.Tensor],
             params: GalParams) -> torch.Tensor:
    """``L_M / 2 + sum_z (w_z L_z + log(1 / w_z))`` with ``w_z = 1/theta_z^2 + lambda``.

    Disabled tasks (``None`` losses) drop out entirely.
    """
    total = W_METRIC * L_M
    w = params.weights()
    for i, L in enumerate((L_G, L_R)):
        if L is not None:
            total = total + w[i] * L - torch.log(w[i])
    return total


def distribution_kl(student_log_probs: torch.Tensor, teacher_probs: torch.Tensor,
                    reduction: str = "sum") -> torch.Tensor:
    return _reduce(kl_divergence(student_log_probs.exp(), teacher_probs.detach()), reduction)


def kd_loss(student_metric_preds: Sequence[MetricPrediction], teacher_fused: torch.Tensor,
            student_aux: Sequence[torch.Tensor], teacher_aux: Sequence[torch.Tensor],
            beta: float, reduction: str = "sum") -> torch.Tensor:
    """``beta * [sum_j KL(Y_j || Y^t) + sum_z KL(Y_z || Y^t_z)]``.

    Student auxiliary outputs are log-probabilities, teacher outputs are
    probabilities; all teacher tensors are treated as constants.
    """
    if beta < 0:
        raise ContractViolation(f"beta must be nonnegative, got {beta}")
    terms = []
    for p in student_metric_preds:
        if p.log_probs.shape != teacher_fused.shape:
            raise ContractViolation(
                f"kd_loss: student {p.metric.value} prediction {tuple(p.log_probs.shape)} "
                f"vs teacher {tuple(teacher_fused.shape)}"
            )
        terms.append(distribution_kl(p.log_probs, teacher_fused, reduction))
    for s, t in zip(student_aux, teacher_aux):
        if s.shape != t.shape:
            raise ContractViolation(
                f"kd_loss: auxiliary class-count mismatch {tuple(s.shape)} vs {tuple(t.shape)}"
            )
        terms.append(distribution_kl(s, t, reduction))
    return beta * sum(terms)


def auxiliary_dominates(theta_sq: float, lam: float) -> bool:
    return 1.0 / theta_sq + lam > W_METRIC


def uniform_loss(n_terms: int, n_classes: int) -> float:
    return n_terms * math.log(n_classes)
