"""Two-phase episodic training, knowledge distillation, and the metrics log.

Each step first optimises the network (backbone, metric heads, temperatures,
auxiliary heads) on the global adaptive loss with the fusion weights ``u``
frozen, then freezes everything except ``u`` and optimises the fused
prediction's cross-entropy on a fresh forward pass.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .autograd import Sgd, SgdConfig, seed_everything
from .auxiliary import gal_loss, global_loss, kd_loss, rotate_queries, rotation_loss
from .backbone import build_prototypes
from .data import FewShotDataset, augment
from .episodes import Episode, EpisodeSpec, sample_episode
from .errors import ContractViolation
from .fusion import FusionVariant, LossBundle, metric_module_loss
from .heads import METRICS
from .model import AMTNet, ModelConfig

log = logging.getLogger(__name__)

METRICS_LOG_HEADER = [
    "epoch", "L_r", "L_e", "L_c", "L_M", "L_y", "L_G", "L_R", "L_total",
    "u_r", "u_e", "u_c", "theta_r2", "theta_e2", "theta_c2", "theta_G2", "theta_R2",
]


@dataclass
class TrainConfig:
    epochs: int = 10
    episodes_per_epoch: int = 50
    ways: int = 5
    shots: int = 1
    queries: int = 15
    variant: str = "amm"
    alpha: float = 0.1
    lam: float = 0.5
    use_global: bool = False
    use_rotation: bool = False
    beta: float = 0.0
    teacher: Optional[str] = None
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    u_lr: float = 0.001
    u_momentum: float = 0.9
    u_cadence: int = 1
    lr_decay_epochs: int = 0      # 0 disables step decay
    lr_decay_gamma: float = 0.5
    reduction: str = "mean"
    patchwise: bool = False
    augment: bool = False
    width: int = 64
    precision: int = 32
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.variant = FusionVariant.parse(str(getattr(self.variant, "value", self.variant))).value
        for name in ("epochs", "episodes_per_epoch", "u_cadence"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ContractViolation(f"{name} must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ContractViolation(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    @property
    def episode(self) -> EpisodeSpec:
        return EpisodeSpec(self.ways, self.shots, self.queries)

    @property
    def network_sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.weight_decay, self.momentum)

    @property
    def u_sgd(self) -> SgdConfig:
        return SgdConfig(self.u_lr, 0.0, self.u_momentum)

    def model_config(self, dataset: FewShotDataset) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, in_channels=dataset.images.shape[1],
            image_size=dataset.images.shape[-1], width=self.width,
            n_global_classes=dataset.n_classes, use_global=self.use_global,
            use_rotation=self.use_rotation, alpha=self.alpha, lam=self.lam,
            precision=self.precision,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_model(cfg: TrainConfig, dataset: FewShotDataset) -> AMTNet:
    seed_everything(cfg.seed, cfg.deterministic)
    return AMTNet(cfg.model_config(dataset))


@dataclass
class EpisodeForward:
    bundle: LossBundle
    preds: dict
    fused: torch.Tensor
    aux: List[torch.Tensor] = field(default_factory=list)


def _episode_batch(model: AMTNet, episode: Episode, rng: Optional[np.random.Generator],
                   do_augment: bool):
    support = episode.support_images
    query = episode.query_images
    q_labels, q_global = episode.query_labels, episode.query_global
    rot_labels = None
    if model.cfg.use_rotation:
        query, rot_labels, q_labels, q_global = rotate_queries(query, q_labels, q_global)
    images = torch.cat([support, query])
    if do_augment and rng is not None:
        images = augment(images, rng)
    return images, q_labels, q_global, rot_labels


def forward_episode(model: AMTNet, episode: Episode, reduction: str = "mean", patchwise: bool = False,
                    rng: Optional[np.random.Generator] = None, do_augment: bool = False,
                    batch=None) -> EpisodeForward:
    """Embed support + (rotated) queries in one batch and compute every loss.

    ``batch`` reuses an already prepared (possibly augmented) input batch, so
    a teacher sees exactly the images its student saw.
    """
    if batch is None:
        batch = _episode_batch(model, episode, rng, do_augment)
    images, q_labels, q_global, rot_labels = batch
    feats = model.embed(images)
    n_s = len(episode.support_idx)
    n_way = len(episode.classes)
    protos = build_prototypes(feats[:n_s], episode.support_labels, n_way)
    q_feats = feats[n_s:]
    preds = model.metric_predictions(q_feats, protos, patchwise)
    bundle, fused = metric_module_loss(model.variant, preds, q_labels, model.fusion, reduction)
    aux = []
    if model.global_head is not None:
        bundle.L_G = global_loss(q_feats, q_global, model.global_head, reduction)
        aux.append(model.global_head(q_feats))
    if model.rotation_head is not None:
        bundle.L_R = rotation_loss(q_feats, rot_labels, model.rotation_head, reduction)
        aux.append(model.rotation_head(q_feats))
    bundle.L_total = gal_loss(bundle.L_M, bundle.L_G, bundle.L_R, model.gal)
    return EpisodeForward(bundle, preds, fused, aux)


def _set_trainable(model: AMTNet, names) -> Dict[str, bool]:
    previous = {}
    for name, p in model.named_parameters():
        previous[name] = p.requires_grad
        p.requires_grad_(name in names)
    return previous


def _restore_trainable(model: AMTNet, previous: Dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(previous[name])


class Trainer:
    """Holds the model, both optimisers and the episode stream of one run."""

    def __init__(self, model: AMTNet, dataset: FewShotDataset, cfg: TrainConfig,
                 teacher: Optional[AMTNet] = None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.teacher = teacher
        if teacher is not None:
            check_teacher_compatible(teacher, model)
            teacher.eval()
            teacher.requires_grad_(False)
        cfg.episode.check_dataset(dataset)
        no_decay = AMTNet.no_decay_names()
        self.net_opt = Sgd(model.network_parameters(), cfg.network_sgd, no_decay)
        self.u_opt = Sgd(model.u_parameters(), cfg.u_sgd, no_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.steps = 0

    def set_lr_scale(self, factor: float) -> None:
        self.net_opt.cfg = SgdConfig(self.cfg.lr * factor, self.cfg.weight_decay, self.cfg.momentum)

    def step(self, episode: Optional[Episode] = None) -> LossBundle:
        """Both phases on one episode; returns the phase-one loss bundle."""
        model, cfg = self.model, self.cfg
        if episode is None:
            episode = sample_episode(self.dataset, cfg.episode, self.rng)
        model.train()

        # phase 1: network (u frozen)
        previous = _set_trainable(model, {n for n, _ in model.network_parameters()})
        try:
            batch = _episode_batch(model, episode, self.rng, cfg.augment)
            fwd = forward_episode(model, episode, cfg.reduction, cfg.patchwise, batch=batch)
            bundle = fwd.bundle
            if self.teacher is not None:
                bundle.L_KD = self._kd_term(episode, fwd, batch)
                bundle.L_total = bundle.L_total + bundle.L_KD
            bundle.check_finite()
            bundle.L_total.backward()
            self.net_opt.step()
        finally:
            _restore_trainable(model, previous)

        # phase 2: only u, on a fresh forward pass through the updated network
        if model.variant.learns_u and self.steps % cfg.u_cadence == 0:
            self._u_phase(episode)
        self.steps += 1
        return bundle

    def _kd_term(self, episode: Episode, fwd: EpisodeForward, batch) -> torch.Tensor:
        cfg = self.cfg
        with torch.no_grad():
            t = forward_episode(self.teacher, episode, cfg.reduction, cfg.patchwise, batch=batch)
        # auxiliary heads emit log-probabilities; the teacher side must be probabilities
        return kd_loss([fwd.preds[m] for m in self.model.metrics], t.fused,
                       fwd.aux, [a.exp() for a in t.aux], cfg.beta, cfg.reduction)

    def _u_phase(self, episode: Episode) -> None:
        model, cfg = self.model, self.cfg
        buffers = {k: v.clone() for k, v in model.named_buffers()}
        previous = _set_trainable(model, {"fusion.u"})
        try:
            fwd = forward_episode(model, episode, cfg.reduction, cfg.patchwise)
            L_y = fwd.bundle.L_y
            if not bool(torch.isfinite(L_y)):
                from .errors import NonFiniteLoss
                raise NonFiniteLoss("L_y", float(L_y.detach()))
            L_y.backward()
            self.u_opt.step()
        finally:
            _restore_trainable(model, previous)
            with torch.no_grad():
                for k, v in model.named_buffers():
                    v.copy_(buffers[k])


def train_step(trainer: Trainer, episode: Optional[Episode] = None) -> LossBundle:
    return trainer.step(episode)


def check_teacher_compatible(teacher: AMTNet, student: AMTNet) -> None:
    t, s = teacher.cfg, student.cfg
    if (t.use_global, t.use_rotation) != (s.use_global, s.use_rotation):
        raise ContractViolation("teacher and student must enable the same auxiliary tasks")
    if s.use_global and t.n_global_classes != s.n_global_classes:
        raise ContractViolation(
            f"teacher has {t.n_global_classes} global classes, student has {s.n_global_classes}"
        )
    if (t.in_channels, t.image_size) != (s.in_channels, s.image_size):
        raise ContractViolation("teacher and student must consume the same image shape")


def _log_row(epoch: int, model: AMTNet, losses: List[Dict[str, float]]) -> Dict[str, float]:
    row: Dict[str, float] = {"epoch": epoch}
    for key in ("L_r", "L_e", "L_c", "L_M", "L_y", "L_G", "L_R", "L_total"):
        vals = [l[key] for l in losses if not np.isnan(l[key])]
        row[key] = float(np.mean(vals)) if vals else float("nan")
    u = model.fusion.u.detach().double().numpy()
    th = model.fusion.theta_sq.detach().double().numpy()
    tg = model.gal.theta_sq.detach().double().numpy()
    for i, m in enumerate(METRICS):
        row[f"u_{m.short}"] = float(u[i])
        row[f"theta_{m.short}2"] = float(th[i])
    row["theta_G2"], row["theta_R2"] = float(tg[0]), float(tg[1])
    return row


def write_metrics_log(rows: List[Dict[str, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_LOG_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_LOG_HEADER})
    return path


def train(model: AMTNet, dataset: FewShotDataset, cfg: TrainConfig, out_dir=None,
          teacher: Optional[AMTNet] = None):
    """Run ``cfg.epochs`` epochs of episodes; returns ``(model, metrics_rows)``.

    With ``out_dir`` the checkpoint (``model.amt``) and ``metrics.csv`` are written there.
    """
    seed_everything(cfg.seed, cfg.deterministic)
    trainer = Trainer(model, dataset, cfg, teacher)
    rows = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_epochs:
            trainer.set_lr_scale(cfg.lr_decay_gamma ** (epoch // cfg.lr_decay_epochs))
        losses = [trainer.step().scalars() for _ in range(cfg.episodes_per_epoch)]
        rows.append(_log_row(epoch + 1, model, losses))
        log.info("epoch %d: L_total=%.4f L_y=%.4f", epoch + 1, rows[-1]["L_total"], rows[-1]["L_y"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model.amt", {"train": cfg.to_dict()})
        write_metrics_log(rows, out / "metrics.csv")
    return model, rows


def distill(teacher, dataset: FewShotDataset, cfg: TrainConfig, out_dir=None,
            student: Optional[AMTNet] = None):
    """Train a student against a frozen teacher (model or checkpoint path)."""
    if not isinstance(teacher, AMTNet):
        teacher = AMTNet.load(teacher)
    if student is None:
        student = build_model(cfg, dataset)
    return train(student, dataset, cfg, out_dir, teacher=teacher)


def save_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
