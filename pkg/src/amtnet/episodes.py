"""N-way K-shot episode sampling and the evaluation protocol."""
from __future__ import annotations

import csv
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import FewShotDataset, embed_dataset
from .errors import ContractViolation


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = 15

    def __post_init__(self):
        if self.ways < 2 or self.shots < 1 or self.queries < 1:
            raise ContractViolation(f"invalid episode spec {self} (need N>=2, K>=1, T>=1)")

    @property
    def n_support(self) -> int:
        return self.ways * self.shots

    @property
    def n_query(self) -> int:
        return self.ways * self.queries

    def check_dataset(self, dataset: FewShotDataset) -> None:
        if dataset.n_classes < self.ways:
            raise ContractViolation(
                f"dataset split {dataset.split!r} has {dataset.n_classes} classes, "
                f"episode needs {self.ways}"
            )
        need = self.shots + self.queries
        for c in range(dataset.n_classes):
            have = len(dataset.indices_of(c))
            if have < need:
                raise ContractViolation(
                    f"class {dataset.class_names[c]!r} has {have} samples, episode needs {need}"
                )


@dataclass
class Episode:
    """Indices into a dataset plus the way assignment.

    Support rows are grouped by way (K each), query rows likewise (T each).
    ``classes[k]`` is the dataset class playing way ``k``.
    """

    classes: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_labels: torch.Tensor
    query_labels: torch.Tensor
    dataset: Optional[FewShotDataset] = field(default=None, repr=False)

    @property
    def support_global(self) -> torch.Tensor:
        return torch.as_tensor(self.classes[self.support_labels.numpy()])

    @property
    def query_global(self) -> torch.Tensor:
        return torch.as_tensor(self.classes[self.query_labels.numpy()])

    @property
    def support_images(self) -> torch.Tensor:
        return self.dataset.images[torch.as_tensor(self.support_idx)]

    @property
    def query_images(self) -> torch.Tensor:
        return self.dataset.images[torch.as_tensor(self.query_idx)]


def sample_episode(dataset: FewShotDataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    spec.check_dataset(dataset)
    classes = rng.choice(dataset.n_classes, size=spec.ways, replace=False)
    support, query = [], []
    for c in classes:
        picked = rng.choice(dataset.indices_of(int(c)), size=spec.shots + spec.queries, replace=False)
        support.append(picked[:spec.shots])
        query.append(picked[spec.shots:])
    return Episode(
        classes=np.asarray(classes, dtype=np.int64),
        support_idx=np.concatenate(support),
        query_idx=np.concatenate(query),
        support_labels=torch.arange(spec.ways).repeat_interleave(spec.shots),
        query_labels=torch.arange(spec.ways).repeat_interleave(spec.queries),
        dataset=dataset,
    )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per evaluation episode, so episodes can run in any order."""
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def confidence_interval(accuracies: Sequence[float]) -> float:
    """95% half-width ``1.96 * std / sqrt(n)`` (population std; 0 for n == 1)."""
    a = [float(x) for x in accuracies]
    if len(a) <= 1:
        return 0.0
    # pstdev is correctly rounded, so constant vectors give exactly 0
    return 1.96 * statistics.pstdev(a) / math.sqrt(len(a))


@dataclass
class EvalReport:
    """Accuracies in percent; ``per_metric`` holds the individual-metric view."""

    mean_accuracy: float
    ci95: float
    n_episodes: int
    per_metric: Dict[str, tuple] = field(default_factory=dict)
    episode_accuracies: List[float] = field(default_factory=list, repr=False)

    @classmethod
    def from_accuracies(cls, fused: Sequence[float], per_metric: Optional[Dict[str, Sequence[float]]] = None):
        per = {name: (100 * float(np.mean(v)), 100 * confidence_interval(v))
               for name, v in (per_metric or {}).items()}
        return cls(100 * float(np.mean(fused)), 100 * confidence_interval(fused), len(fused), per,
                   [float(a) for a in fused])

    def format(self) -> str:
        return f"{self.mean_accuracy:.2f} ± {self.ci95:.2f}"

    def to_text(self) -> str:
        lines = [f"merge acc: {self.format()}  ({self.n_episodes} episodes)"]
        for name, (m, ci) in self.per_metric.items():
            lines.append(f"  {name:<10s} {m:.2f} ± {ci:.2f}")
        return "\n".join(lines)

    def rows(self) -> List[List]:
        rows = [["merged", f"{self.mean_accuracy:.4f}", f"{self.ci95:.4f}", self.n_episodes]]
        for name, (m, ci) in self.per_metric.items():
            rows.append([name, f"{m:.4f}", f"{ci:.4f}", self.n_episodes])
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prediction", "accuracy", "ci95", "episodes"])
            w.writerows(self.rows())
        return path


def _episode_accuracy(model, feats, dataset, spec, seed, index):
    ep = sample_episode(dataset, spec, episode_rng(seed, index))
    with torch.no_grad():
        preds = model.episode_predictions(
            feats[torch.as_tensor(ep.support_idx)], ep.support_labels,
            feats[torch.as_tensor(ep.query_idx)], spec.ways,
        )
    return {name: float((p.argmax(dim=-1) == ep.query_labels).double().mean())
            for name, p in preds.items()}


def evaluate(model, dataset: FewShotDataset, spec: EpisodeSpec, n_episodes: int = 1000,
             seed: int = 0, workers: int = 1, features: Optional[torch.Tensor] = None) -> EvalReport:
    """Inductive evaluation on unrotated queries.

    The split is embedded once in eval mode and episodes index into those
    features.  ``model.episode_predictions`` must return a dict with a
    ``"merged"`` entry plus one entry per individual metric.
    """
    if n_episodes < 1:
        raise ContractViolation("n_episodes must be positive")
    spec.check_dataset(dataset)
    was_training = model.training
    model.eval()
    try:
        feats = embed_dataset(model, dataset) if features is None else features
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda i: _episode_accuracy(model, feats, dataset, spec, seed, i), range(n_episodes)))
        else:
            results = [_episode_accuracy(model, feats, dataset, spec, seed, i) for i in range(n_episodes)]
    finally:
        model.train(was_training)
    fused = [r["merged"] for r in results]
    names = [k for k in results[0] if k != "merged"]
    return EvalReport.from_accuracies(fused, {k: [r[k] for r in results] for k in names})
