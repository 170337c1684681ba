"""Fusion of the three metric classifiers.

Two halves: prediction fusion (naive sum, or the residual-weighted sum with
learnable ``u``) and loss fusion (plain sum, or uncertainty weighting with a
learnable temperature per metric plus an optional KL consistency term that
pulls each metric toward the fused prediction).
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ContractViolation
from .heads import METRICS, MetricId, MetricPrediction, cross_entropy

KL_CLAMP = 1e-12
_DEGENERATE = 1e-8


class FusionVariant(str, Enum):
    RELATION = "relation"
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    COUPLED = "coupled"
    NMM = "nmm"
    AMM_V1 = "amm-v1"
    AMM_V2 = "amm-v2"
    AMM = "amm"

    @classmethod
    def parse(cls, name: str) -> "FusionVariant":
        try:
            return cls(name.lower().replace("_", "-"))
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ContractViolation(f"unknown fusion variant {name!r} (expected one of {valid})") from None

    @property
    def is_individual(self) -> bool:
        return self.value in ("relation", "euclidean", "cosine")

    @property
    def metrics(self) -> Tuple[MetricId, ...]:
        return (MetricId(self.value),) if self.is_individual else METRICS

    @property
    def learns_u(self) -> bool:
        return self in (FusionVariant.AMM_V2, FusionVariant.AMM)

    @property
    def learns_theta(self) -> bool:
        return self in (FusionVariant.AMM_V1, FusionVariant.AMM_V2, FusionVariant.AMM)

    @property
    def uses_kl(self) -> bool:
        return self is FusionVariant.AMM


class FusionParams(nn.Module):
    """Prediction weights ``u`` and log-temperatures ``log(theta^2)``, indexed
    in ``METRICS`` order (relation, euclidean, cosine)."""

    def __init__(self, alpha: float = 0.1):
        super().__init__()
        if alpha < 0:
            raise ContractViolation(f"alpha must be nonnegative, got {alpha}")
        self.u = nn.Parameter(torch.zeros(len(METRICS)))
        self.log_theta_sq = nn.Parameter(torch.zeros(len(METRICS)))
        self.alpha = float(alpha)

    @property
    def theta_sq(self) -> torch.Tensor:
        return self.log_theta_sq.exp()

    def u_of(self, metric: MetricId) -> torch.Tensor:
        return self.u[METRICS.index(MetricId(metric))]

    def log_theta_sq_of(self, metric: MetricId) -> torch.Tensor:
        return self.log_theta_sq[METRICS.index(MetricId(metric))]


@dataclass
class LossBundle:
    """Named scalar losses of one forward pass; absent terms stay ``None``."""

    L_r: Optional[torch.Tensor] = None
    L_e: Optional[torch.Tensor] = None
    L_c: Optional[torch.Tensor] = None
    L_y: Optional[torch.Tensor] = None
    L_KL: Optional[torch.Tensor] = None
    L_M: Optional[torch.Tensor] = None
    L_G: Optional[torch.Tensor] = None
    L_R: Optional[torch.Tensor] = None
    L_KD: Optional[torch.Tensor] = None
    L_total: Optional[torch.Tensor] = None

    def metric_loss(self, metric: MetricId) -> Optional[torch.Tensor]:
        return getattr(self, f"L_{MetricId(metric).short}")

    def set_metric_loss(self, metric: MetricId, value: torch.Tensor) -> None:
        setattr(self, f"L_{MetricId(metric).short}", value)

    def scalars(self) -> Dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float("nan") if v is None else float(v.detach())
        return out

    def check_finite(self) -> None:
        from .errors import NonFiniteLoss

        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not bool(torch.isfinite(v).all()):
                raise NonFiniteLoss(f.name, float(v.detach()))


def _check_same_layout(preds: Sequence[MetricPrediction]) -> None:
    shape = preds[0].log_probs.shape
    for p in preds[1:]:
        if p.log_probs.shape != shape:
            raise ContractViolation(
                f"fusion: mismatched predictions {tuple(shape)} vs {tuple(p.log_probs.shape)}"
            )


def nmm_fuse(preds: Sequence[MetricPrediction]) -> torch.Tensor:
    """Sum of the metric distributions, renormalised per query."""
    _check_same_layout(preds)
    total = sum(p.probs for p in preds)
    return total / total.sum(dim=-1, keepdim=True)


def weighted_fuse(preds: Sequence[MetricPrediction], weights: torch.Tensor) -> torch.Tensor:
    _check_same_layout(preds)
    total = sum(w * p.probs for w, p in zip(weights, preds))
    norm = total.sum(dim=-1, keepdim=True)
    if bool((norm <= _DEGENERATE).any()):
        raise ContractViolation("amm_fuse: degenerate fusion weights (sum of 1+u_j <= 1e-8)")
    return total / norm


def amm_fuse(preds: Sequence[MetricPrediction], params: FusionParams) -> torch.Tensor:
    """Residual-weighted sum ``sum_j (1 + u_j) * Y_j``, renormalised per query."""
    weights = [1.0 + params.u_of(p.metric) for p in preds]
    return weighted_fuse(preds, weights)


def fused_ce(fused: torch.Tensor, labels, reduction: str = "sum") -> torch.Tensor:
    return cross_entropy(torch.log(fused.clamp_min(KL_CLAMP)), labels, reduction)


def nmm_loss(L_r, L_e, L_c):
    return L_r + L_e + L_c


def uncertainty_term(loss: torch.Tensor, log_theta_sq: torch.Tensor) -> torch.Tensor:
    return loss * torch.exp(-log_theta_sq) + log_theta_sq


def uncertainty_fusion(losses: Mapping[MetricId, torch.Tensor], params: FusionParams) -> torch.Tensor:
    """``sum_j L_j / theta_j^2 + log theta_j^2``."""
    return sum(uncertainty_term(L, params.log_theta_sq_of(m)) for m, L in losses.items())


def exact_scaled_likelihood_loss(d: torch.Tensor, labels, theta_sq) -> torch.Tensor:
    """Cross-entropy of the temperature-scaled softmax ``softmax(-d / theta^2)``.

    ``d`` is ``(N,)`` with an integer label or ``(n, N)`` with n labels; the
    losses are summed over queries.
    """
    d = torch.as_tensor(d)
    if d.dim() == 1:
        d = d[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    theta_sq = torch.as_tensor(theta_sq, dtype=d.dtype)
    return cross_entropy(torch.log_softmax(-d / theta_sq, dim=-1), labels, "sum")


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise ``KL(p || q)`` over the last axis, ``q`` clamped at 1e-12."""
    q = q.clamp_min(KL_CLAMP)
    # 0 * log 0 := 0
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(KL_CLAMP)), torch.zeros_like(p))
    return (plogp - p * torch.log(q)).sum(dim=-1)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return x.sum()
    if reduction == "mean":
        return x.mean()
    raise ContractViolation(f"unknown reduction {reduction!r}")


def kl_regularizer(preds: Sequence[MetricPrediction], fused: torch.Tensor, alpha: float,
                   reduction: str = "sum") -> torch.Tensor:
    """``alpha * sum_j KL(Y_j || stopgrad(Y_fused))``; the fused prediction is a teacher."""
    teacher = fused.detach()
    return alpha * sum(_reduce(kl_divergence(p.probs, teacher), reduction) for p in preds)


def fuse(variant: FusionVariant, preds: Mapping[MetricId, MetricPrediction],
         params: Optional[FusionParams]) -> torch.Tensor:
    variant = FusionVariant(variant)
    if variant.is_individual:
        return preds[variant.metrics[0]].probs
    ordered = [preds[m] for m in METRICS]
    if variant.learns_u:
        return amm_fuse(ordered, params)
    return nmm_fuse(ordered)


def metric_module_loss(variant: FusionVariant, preds: Mapping[MetricId, MetricPrediction],
                       labels, params: Optional[FusionParams] = None,
                       reduction: str = "sum",
                       kl_teacher: Optional[torch.Tensor] = None) -> Tuple[LossBundle, torch.Tensor]:
    """Per-metric losses, fused prediction, ``L_y`` and the variant's ``L_M``.

    ``L_y`` is reported but only enters ``L_M`` for the coupled variant; for
    the others it is optimised separately (second training phase).
    ``kl_teacher`` replaces the fused prediction as the KL target.
    """
    variant = FusionVariant(variant)
    for m in variant.metrics:
        if m not in preds:
            raise ContractViolation(f"variant {variant.value} needs a {m.value} prediction")
    if (variant.learns_u or variant.learns_theta) and params is None:
        raise ContractViolation(f"variant {variant.value} needs FusionParams")

    bundle = LossBundle()
    for m in variant.metrics:
        bundle.set_metric_loss(m, cross_entropy(preds[m].log_probs, labels, reduction))
    fused = fuse(variant, preds, params)
    bundle.L_y = fused_ce(fused, labels, reduction)

    losses = {m: bundle.metric_loss(m) for m in variant.metrics}
    if variant.is_individual:
        bundle.L_M = losses[variant.metrics[0]]
    elif variant is FusionVariant.COUPLED:
        bundle.L_M = bundle.L_y
    elif variant is FusionVariant.NMM:
        bundle.L_M = nmm_loss(*(losses[m] for m in METRICS))
    else:
        bundle.L_M = uncertainty_fusion(losses, params)
        if variant.uses_kl:
            teacher = fused if kl_teacher is None else kl_teacher
            bundle.L_KL = kl_regularizer([preds[m] for m in METRICS], teacher, params.alpha, reduction)
            bundle.L_M = bundle.L_M + bundle.L_KL
    return bundle, fused
