"""Dense tensor primitives, SGD with freeze semantics, and checkpoint I/O.

Tensors are plain ``torch.Tensor`` objects and gradients come from torch's
reverse-mode engine.  The wrappers here add the shape contracts the rest of
the package relies on, and give the finite-difference checker a registry of
every primitive the models are built from.
"""
from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation

DTYPES = {32: torch.float32, 64: torch.float64}

CHECKPOINT_MAGIC = b"AMT1"
_PRECISION_TAGS = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
}
_TAG_TO_DTYPE = {v: k for k, v in _PRECISION_TAGS.items()}
_NUMPY_LE = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def dtype_for(precision: int) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ContractViolation(f"precision must be 32 or 64, got {precision}") from None


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _check_broadcast(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape == b.shape:
        return
    # broadcasting is allowed over the leading (batch) extent only
    if a.dim() == b.dim() + 1 and a.shape[1:] == b.shape:
        return
    if b.dim() == a.dim() + 1 and b.shape[1:] == a.shape:
        return
    raise ContractViolation(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    _check_broadcast("add", a, b)
    return a + b


def sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def scale(a, s: float):
    return a * s


def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(
            f"conv2d: shape mismatch input {tuple(x.shape)} vs kernel {tuple(weight.shape)}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batch_norm(x, weight, bias, running_mean=None, running_var=None, training=True,
               momentum: float = 0.1, eps: float = 1e-5):
    if x.dim() < 2 or x.shape[1] != weight.shape[0]:
        raise ContractViolation(
            f"batch_norm: shape mismatch input {tuple(x.shape)} vs affine {tuple(weight.shape)}"
        )
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def relu(x):
    return torch.relu(x)


def max_pool(x, size: int = 2):
    return F.max_pool2d(x, size)


def global_avg_pool(x):
    """(..., c, h, w) -> (..., c)"""
    if x.dim() < 3:
        raise ContractViolation(f"global_avg_pool expects (..., c, h, w), got {tuple(x.shape)}")
    return x.mean(dim=(-2, -1))


def reduce_sum(x, axis=None):
    return x.sum() if axis is None else x.sum(dim=axis)


def reduce_mean(x, axis=None):
    return x.mean() if axis is None else x.mean(dim=axis)


def exp(x):
    return torch.exp(x)


def log(x):
    return torch.log(x)


def square(x):
    return x * x


def sqrt(x):
    return torch.sqrt(x)


def concat_channels(tensors):
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ContractViolation(
                f"concat_channels: shape mismatch {tuple(ref.shape)} vs {tuple(t.shape)}"
            )
    return torch.cat(tensors, dim=1)


def rot90(x, k: int):
    """Rotate the last two (spatial) axes counter-clockwise by k quarter turns.

    Pure index permutation, so values are reproduced bit for bit.
    """
    if x.shape[-1] != x.shape[-2]:
        raise ContractViolation(f"rot90 needs square spatial extent, got {tuple(x.shape)}")
    return torch.rot90(x, k % 4, dims=(-2, -1))


def softmax(logits, axis: int = -1):
    shifted = logits - logits.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(logits, axis: int = -1):
    shifted = logits - logits.max(dim=axis, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


# name -> (function, builder of random 64-bit inputs); the checker projects
# the output onto a fixed random tensor so every primitive yields a scalar.
def _rand(gen, *shape, positive=False):
    t = torch.randn(*shape, generator=gen, dtype=torch.float64)
    return t.abs() + 0.5 if positive else t


def primitive_registry() -> Dict[str, Tuple[Callable, Callable]]:
    """Map primitive name -> (fn(*inputs), make_inputs(generator))."""

    def bn_train(x, w, b):
        return batch_norm(x, w, b, training=True)

    def bn_eval(x, w, b):
        rm = torch.linspace(-0.3, 0.3, x.shape[1], dtype=x.dtype)
        rv = torch.linspace(0.5, 1.5, x.shape[1], dtype=x.dtype)
        return batch_norm(x, w, b, rm, rv, training=False)

    return {
        "add": (add, lambda g: (_rand(g, 3, 4), _rand(g, 3, 4))),
        "sub": (sub, lambda g: (_rand(g, 2, 3, 4), _rand(g, 3, 4))),
        "mul": (mul, lambda g: (_rand(g, 3, 4), _rand(g, 3, 4))),
        "scale": (lambda a: scale(a, -2.5), lambda g: (_rand(g, 5),)),
        "matmul": (matmul, lambda g: (_rand(g, 3, 4), _rand(g, 4, 2))),
        "conv2d": (lambda x, w, b: conv2d(x, w, b, stride=1, padding=1),
                   lambda g: (_rand(g, 2, 2, 4, 4), _rand(g, 3, 2, 3, 3), _rand(g, 3))),
        "conv2d_stride2": (lambda x, w: conv2d(x, w, stride=2, padding=0),
                           lambda g: (_rand(g, 1, 2, 5, 5), _rand(g, 2, 2, 3, 3))),
        "batch_norm_train": (bn_train, lambda g: (_rand(g, 4, 3, 2, 2), _rand(g, 3), _rand(g, 3))),
        "batch_norm_eval": (bn_eval, lambda g: (_rand(g, 4, 3, 2, 2), _rand(g, 3), _rand(g, 3))),
        "relu": (relu, lambda g: (_rand(g, 3, 5),)),
        "max_pool": (max_pool, lambda g: (_rand(g, 1, 2, 4, 4),)),
        "global_avg_pool": (global_avg_pool, lambda g: (_rand(g, 2, 3, 3, 3),)),
        "reduce_sum": (lambda x: reduce_sum(x, axis=1), lambda g: (_rand(g, 3, 4),)),
        "reduce_mean": (lambda x: reduce_mean(x, axis=0), lambda g: (_rand(g, 3, 4),)),
        "exp": (exp, lambda g: (_rand(g, 6),)),
        "log": (log, lambda g: (_rand(g, 6, positive=True),)),
        "square": (square, lambda g: (_rand(g, 6),)),
        "sqrt": (sqrt, lambda g: (_rand(g, 6, positive=True),)),
        "concat_channels": (lambda a, b: concat_channels([a, b]),
                            lambda g: (_rand(g, 2, 2, 3, 3), _rand(g, 2, 1, 3, 3))),
        "rot90": (lambda x: rot90(x, 1), lambda g: (_rand(g, 1, 2, 3, 3),)),
        "softmax": (softmax, lambda g: (_rand(g, 4, 5),)),
        "log_softmax": (log_softmax, lambda g: (_rand(g, 4, 5),)),
    }


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9

    def __post_init__(self):
        vals = (self.learning_rate, self.weight_decay, self.momentum)
        if not all(np.isfinite(v) for v in vals):
            raise ContractViolation(f"SgdConfig fields must be finite: {self}")
        if self.learning_rate <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ContractViolation(f"SgdConfig out of range: {self}")


class Sgd:
    """SGD with momentum and decoupled per-parameter weight-decay opt-out.

    ``v <- momentum * v + (grad + wd * p)``; ``p <- p - lr * v``.
    Parameters with ``requires_grad == False`` are treated as frozen and
    left untouched. Gradients are zeroed (set to ``None``) after each step.
    """

    def __init__(self, named_params: Iterable[Tuple[str, torch.Tensor]], cfg: SgdConfig,
                 no_decay: Iterable[str] = ()):
        self.params = list(named_params)
        self.cfg = cfg
        self.no_decay = set(no_decay)
        self.velocity: Dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def step(self) -> None:
        cfg = self.cfg
        for name, p in self.params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractViolation(f"sgd_step: parameter {name!r} has no gradient")
            d_p = p.grad
            wd = 0.0 if name in self.no_decay else cfg.weight_decay
            if wd:
                d_p = d_p + wd * p
            if cfg.momentum:
                buf = self.velocity.get(name)
                if buf is None:
                    buf = d_p.clone()
                else:
                    buf.mul_(cfg.momentum).add_(d_p)
                self.velocity[name] = buf
                d_p = buf
            p.sub_(cfg.learning_rate * d_p)
        self.zero_grad()

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(named_params, cfg: SgdConfig, no_decay=()) -> None:
    """One stateless step (zero initial velocity)."""
    Sgd(named_params, cfg, no_decay).step()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> Path:
    """Write ``AMT1`` magic, a JSON manifest, then raw little-endian data."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        tag = _PRECISION_TAGS.get(t.dtype)
        if tag is None:
            raise ContractViolation(f"cannot checkpoint {name!r} with dtype {t.dtype}")
        raw = t.numpy().astype(_NUMPY_LE[tag], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "precision": tag,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": "AMT1", "tensors": entries, "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"{path}: not an AMT1 checkpoint (magic {magic!r})")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()
    out = {}
    for e in manifest["tensors"]:
        buf = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContractViolation(f"{path}: truncated data for {e['name']!r}")
        arr = np.frombuffer(buf, dtype=_NUMPY_LE[e["precision"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy()).to(_TAG_TO_DTYPE[e["precision"]])
    return out, manifest.get("meta", {})
