"""Synthetic oriented-texture datasets, on-disk ingestion, augmentation, embedding export.

On disk a dataset is a directory holding ``manifest.json`` plus one raw file
per sample (little-endian float32, C-order channel/row/col).  The manifest
lists both splits (``base`` for meta-training, ``novel`` for evaluation), the
per-split normalisation statistics, and a SHA-256 per sample file.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from .errors import ContractViolation

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DatasetError(ContractViolation):
    """Manifest or sample file is missing, corrupt, or inconsistent."""


@dataclass
class SyntheticSpec:
    n_classes: int = 30
    samples_per_class: int = 60
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    n_novel: int = 10          # the last n_novel classes form the novel split
    noise: float = 0.6         # per-pixel Gaussian noise std
    orientation_jitter: float = 0.25   # radians
    frequency_jitter: float = 0.15     # relative
    blob_jitter: float = 0.12          # fraction of the image side
    family: str = "oriented-texture"

    def __post_init__(self):
        if self.family != "oriented-texture":
            raise ContractViolation(f"unknown generator family {self.family!r}")
        if self.n_classes < 2 or self.samples_per_class < 1 or self.image_size < 4:
            raise ContractViolation(f"invalid synthetic spec: {self}")
        if not 0 <= self.n_novel < self.n_classes:
            raise ContractViolation("n_novel must leave at least one base class")


@dataclass
class FewShotDataset:
    """One split held in memory; ``labels`` index into ``class_names``."""

    images: torch.Tensor
    labels: np.ndarray
    class_names: List[str]
    split: str = "base"
    sample_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.images.shape[0]:
            raise ContractViolation("image / label count mismatch")
        if not self.sample_ids:
            self.sample_ids = [f"{self.split}-{i:06d}" for i in range(len(self.labels))]
        self._by_class = [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def indices_of(self, cls: int) -> np.ndarray:
        return self._by_class[cls]

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _class_params(spec: SyntheticSpec, rng: np.random.Generator) -> List[dict]:
    params = []
    for _ in range(spec.n_classes):
        color = rng.normal(size=spec.channels)
        color = color / (np.linalg.norm(color) + 1e-9) * np.sqrt(spec.channels)
        params.append({
            "orientation": rng.uniform(0, 2 * np.pi),
            "frequency": rng.uniform(1.5, 4.0),
            "color": color,
            "harmonic": rng.uniform(0.3, 0.9),
            "blob_center": rng.uniform(0.2, 0.8, size=2),
            "blob_sign": rng.choice([-1.0, 1.0]),
        })
    return params


def render_sample(p: dict, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.meshgrid(np.linspace(0, 1, s, endpoint=False), np.linspace(0, 1, s, endpoint=False),
                         indexing="ij")
    theta = p["orientation"] + rng.normal(0, spec.orientation_jitter)
    freq = p["frequency"] * (1 + rng.normal(0, spec.frequency_jitter))
    phase = rng.uniform(0, 1)
    t = 2 * np.pi * (freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    # second harmonic with a quarter-period shift makes the waveform asymmetric,
    # so a half-turn of the image is distinguishable from the original
    wave = np.sin(t) + p["harmonic"] * np.cos(2 * t)
    centre = p["blob_center"] + rng.normal(0, spec.blob_jitter, size=2)
    blob = p["blob_sign"] * 1.5 * np.exp(-((yy - centre[0]) ** 2 + (xx - centre[1]) ** 2) / 0.02)
    # shared top-bright illumination ramp: the canonical "up" used by rotation prediction
    ramp = 0.8 * (0.5 - yy) * rng.uniform(0.6, 1.4)
    base = wave + blob
    img = p["color"][:, None, None] * base[None] + ramp[None]
    img = img + rng.normal(0, spec.noise, size=img.shape)
    return img.astype("<f4")


def generate_synthetic(spec: SyntheticSpec, root) -> Path:
    """Render every sample to ``root`` and write the manifest; returns its path."""
    root = Path(root)
    sample_dir = root / "samples"
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {sample_dir}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    params = _class_params(spec, rng)
    names = [f"class{c:03d}" for c in range(spec.n_classes)]
    n_base = spec.n_classes - spec.n_novel
    splits: Dict[str, dict] = {
        "base": {"classes": names[:n_base], "samples": []},
        "novel": {"classes": names[n_base:], "samples": []},
    }
    sums = {k: [] for k in splits}
    class_means = []
    for c, p in enumerate(params):
        split = "base" if c < n_base else "novel"
        acc = np.zeros((spec.channels, spec.image_size, spec.image_size))
        for i in range(spec.samples_per_class):
            img = render_sample(p, spec, rng)
            acc += img
            rel = f"samples/{names[c]}_{i:04d}.f32"
            raw = img.tobytes()
            path = root / rel
            try:
                path.write_bytes(raw)
            except OSError as exc:
                raise DatasetError(f"cannot write {path}: {exc}") from exc
            splits[split]["samples"].append({
                "file": rel, "class": names[c], "sha256": hashlib.sha256(raw).hexdigest(),
            })
            sums[split].append(img.reshape(spec.channels, -1))
        class_means.append(acc / spec.samples_per_class)

    for split, entry in splits.items():
        if sums[split]:
            stacked = np.concatenate(sums[split], axis=1).astype(np.float64)
            entry["normalization"] = {"mean": stacked.mean(axis=1).tolist(),
                                      "std": stacked.std(axis=1).tolist()}
        else:
            entry["normalization"] = {"mean": [0.0] * spec.channels, "std": [1.0] * spec.channels}

    means = np.stack(class_means).reshape(spec.n_classes, -1)
    gaps = [float(np.linalg.norm(means[a] - means[b]))
            for a in range(spec.n_classes) for b in range(a + 1, spec.n_classes)]
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": spec.image_size,
        "channels": spec.channels,
        "generator": asdict(spec),
        "min_class_mean_gap": min(gaps) if gaps else 0.0,
        "splits": splits,
    }
    out = root / MANIFEST_NAME
    out.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    validate_manifest(manifest, path)
    manifest["_root"] = str(path.parent)
    return manifest


def validate_manifest(manifest: dict, path="manifest") -> None:
    for key in ("image_size", "channels", "splits"):
        if key not in manifest:
            raise DatasetError(f"{path}: missing key {key!r}")
    splits = manifest["splits"]
    seen: Dict[str, str] = {}
    for name, entry in splits.items():
        for cls in entry["classes"]:
            if cls in seen:
                raise DatasetError(
                    f"{path}: class {cls!r} appears in both {seen[cls]!r} and {name!r} splits"
                )
            seen[cls] = name


def load_dataset(manifest_path, split: str = "base", normalize: bool = True,
                 verify: bool = True) -> FewShotDataset:
    manifest = read_manifest(manifest_path)
    root = Path(manifest["_root"])
    if split not in manifest["splits"]:
        raise DatasetError(f"split {split!r} not in manifest (have {sorted(manifest['splits'])})")
    entry = manifest["splits"][split]
    c, s = manifest["channels"], manifest["image_size"]
    shape = (c, s, s)
    class_index = {name: i for i, name in enumerate(entry["classes"])}
    images = np.empty((len(entry["samples"]),) + shape, dtype=np.float32)
    labels = np.empty(len(entry["samples"]), dtype=np.int64)
    ids = []
    for i, sample in enumerate(entry["samples"]):
        path = root / sample["file"]
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise DatasetError(f"missing sample file {path}") from None
        if verify and "sha256" in sample and hashlib.sha256(raw).hexdigest() != sample["sha256"]:
            raise DatasetError(f"checksum mismatch for {path}")
        arr = np.frombuffer(raw, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise DatasetError(f"shape mismatch for {path}: {arr.size} values, expected {shape}")
        images[i] = arr.reshape(shape)
        labels[i] = class_index[sample["class"]]
        ids.append(Path(sample["file"]).stem)
    if normalize:
        stats = entry["normalization"]
        mean = np.asarray(stats["mean"], dtype=np.float32)[:, None, None]
        std = np.asarray(stats["std"], dtype=np.float32)[:, None, None]
        images = (images - mean) / std
    return FewShotDataset(torch.from_numpy(images), labels, list(entry["classes"]), split, ids)


def synthetic_split(spec: SyntheticSpec, split: str = "base") -> FewShotDataset:
    """In-memory equivalent of generate + load (no files); used by tests and the engine."""
    rng = np.random.default_rng(spec.seed)
    params = _class_params(spec, rng)
    n_base = spec.n_classes - spec.n_novel
    imgs, labels = [], []
    for c, p in enumerate(params):
        for _ in range(spec.samples_per_class):
            img = render_sample(p, spec, rng)
            if (c < n_base) == (split == "base"):
                imgs.append(img)
                labels.append(c if split == "base" else c - n_base)
    x = np.stack(imgs).astype(np.float32)
    flat = x.transpose(1, 0, 2, 3).reshape(spec.channels, -1).astype(np.float64)
    mean = flat.mean(axis=1).astype(np.float32)[:, None, None]
    std = flat.std(axis=1).astype(np.float32)[:, None, None]
    x = (x - mean) / std
    names = [f"class{c:03d}" for c in range(spec.n_classes)]
    names = names[:n_base] if split == "base" else names[n_base:]
    return FewShotDataset(torch.from_numpy(x), np.asarray(labels), names, split)


# ---------------------------------------------------------------------------
# training-time augmentation
# ---------------------------------------------------------------------------

def augment(images: torch.Tensor, rng: np.random.Generator, flip: bool = True, crop_pad: int = 4,
            erase_prob: float = 0.5, jitter: float = 0.2) -> torch.Tensor:
    """Horizontal flip, padded random crop, random erasing, per-channel colour jitter."""
    out = images.clone()
    n, c, h, w = out.shape
    for i in range(n):
        img = out[i]
        if flip and rng.random() < 0.5:
            img = torch.flip(img, dims=(-1,))
        if crop_pad:
            padded = torch.nn.functional.pad(img, (crop_pad,) * 4)
            y, x = rng.integers(0, 2 * crop_pad + 1, size=2)
            img = padded[:, y:y + h, x:x + w]
        if erase_prob and rng.random() < erase_prob:
            eh, ew = rng.integers(h // 8, h // 3 + 1), rng.integers(w // 8, w // 3 + 1)
            y, x = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
            img = img.clone()
            img[:, y:y + eh, x:x + ew] = 0.0
        if jitter and c == 3:
            scale_ = torch.from_numpy(rng.uniform(1 - jitter, 1 + jitter, size=(c, 1, 1)).astype(np.float32))
            shift = torch.from_numpy(rng.uniform(-jitter, jitter, size=(c, 1, 1)).astype(np.float32))
            img = img * scale_.to(img.dtype) + shift.to(img.dtype)
        out[i] = img
    return out


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

@torch.no_grad()
def embed_dataset(model, dataset: FewShotDataset, batch_size: int = 256) -> torch.Tensor:
    """Eval-mode feature maps for every sample, (n, c, h, w)."""
    was_training = model.training
    model.eval()
    try:
        chunks = [model.embed(dataset.images[i:i + batch_size].to(model.dtype))
                  for i in range(0, len(dataset), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(chunks)


def export_embeddings(model, dataset: FewShotDataset, path) -> Path:
    """CSV rows ``sample_id, class_id, f0..f{c-1}`` of GAP'd eval-mode features."""
    feats = embed_dataset(model, dataset).mean(dim=(-2, -1)).double().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, label, row in zip(dataset.sample_ids, dataset.labels, feats):
            writer.writerow([sid, int(label)] + [repr(float(v)) for v in row])
    return path
