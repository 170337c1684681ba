"""The full few-shot network: backbone, metric heads, fusion, auxiliary heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .autograd import dtype_for, load_checkpoint, save_checkpoint
from .auxiliary import ClassifierHead, GalParams, N_ROTATIONS
from .backbone import Conv4, build_prototypes
from .errors import ContractViolation
from .fusion import FusionParams, FusionVariant, fuse
from .heads import MetricId, MetricPrediction, RelationHead, metric_predict, patchwise_predict


@dataclass
class ModelConfig:
    variant: str = "amm"
    in_channels: int = 3
    image_size: int = 32
    width: int = 64
    n_global_classes: int = 20
    use_global: bool = False
    use_rotation: bool = False
    alpha: float = 0.1
    lam: float = 0.5
    precision: int = 32

    def __post_init__(self):
        self.variant = FusionVariant.parse(str(getattr(self.variant, "value", self.variant))).value


class AMTNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.variant = FusionVariant(cfg.variant)
        self.backbone = Conv4(cfg.in_channels, cfg.width, cfg.image_size)
        self.relation = RelationHead(cfg.width) if MetricId.RELATION in self.variant.metrics else None
        self.fusion = FusionParams(cfg.alpha)
        self.gal = GalParams(cfg.lam, cfg.use_global, cfg.use_rotation)
        self.global_head = ClassifierHead(cfg.width, cfg.n_global_classes) if cfg.use_global else None
        self.rotation_head = ClassifierHead(cfg.width, N_ROTATIONS) if cfg.use_rotation else None
        self.to(dtype_for(cfg.precision))

    @property
    def dtype(self) -> torch.dtype:
        return dtype_for(self.cfg.precision)

    @property
    def metrics(self) -> Tuple[MetricId, ...]:
        return self.variant.metrics

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images.to(self.dtype))

    def metric_predictions(self, queries: torch.Tensor, prototypes: torch.Tensor,
                           patchwise: bool = False) -> Dict[MetricId, MetricPrediction]:
        predict = patchwise_predict if patchwise else metric_predict
        return {m: predict(m, queries, prototypes, self.relation) for m in self.metrics}

    def fuse(self, preds: Dict[MetricId, MetricPrediction]) -> torch.Tensor:
        return fuse(self.variant, preds, self.fusion)

    def episode_predictions(self, support_feats, support_labels, query_feats, n_way) -> Dict[str, torch.Tensor]:
        """Merged and per-metric class probabilities for one episode (global path)."""
        protos = build_prototypes(support_feats, support_labels, n_way)
        preds = self.metric_predictions(query_feats, protos)
        out = {"merged": self.fuse(preds)}
        out.update({m.value: p.probs for m, p in preds.items()})
        return out

    # --- parameter groups for the two optimisation phases -------------------

    def network_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        """Everything optimised in the first phase (all but ``u``)."""
        out = []
        for name, p in self.named_parameters():
            if name == "fusion.u":
                continue
            if name == "fusion.log_theta_sq" and not self.variant.learns_theta:
                continue
            if name == "gal.log_theta_sq" and not (self.cfg.use_global or self.cfg.use_rotation):
                continue
            out.append((name, p))
        return out

    def u_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [("fusion.u", self.fusion.u)] if self.variant.learns_u else []

    @staticmethod
    def no_decay_names() -> Tuple[str, ...]:
        return ("fusion.u", "fusion.log_theta_sq", "gal.log_theta_sq")

    # --- persistence -------------------------------------------------------

    def save(self, path, extra_meta: Optional[dict] = None) -> Path:
        meta = {"model": asdict(self.cfg)}
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "AMTNet":
        tensors, meta = load_checkpoint(path)
        if "model" not in meta:
            raise ContractViolation(f"{path}: checkpoint lacks model configuration")
        known = {f.name for f in fields(ModelConfig)}
        model = cls(ModelConfig(**{k: v for k, v in meta["model"].items() if k in known}))
        model.load_state_dict(tensors)
        return model
