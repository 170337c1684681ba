"""Conv4 embedding network and prototype construction."""
from __future__ import annotations

from typing import Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ContractViolation


def conv_block(in_ch: int, out_ch: int, pool: bool = True) -> nn.Sequential:
    # conv bias is redundant ahead of batch-norm
    layers = [nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def conv4_output_size(image_size: int, blocks: int = 4) -> int:
    size = image_size
    for _ in range(blocks):
        size //= 2
    return size


class Conv4(nn.Module):
    """Four [conv3x3 -> BN -> ReLU -> maxpool2] blocks; 32x32 -> 2x2, 84x84 -> 5x5."""

    def __init__(self, in_channels: int = 3, width: int = 64, image_size: int = 32):
        super().__init__()
        if conv4_output_size(image_size) < 1:
            raise ContractViolation(f"image size {image_size} too small for Conv4")
        self.in_channels = in_channels
        self.width = width
        self.image_size = image_size
        self.blocks = nn.Sequential(
            conv_block(in_channels, width),
            conv_block(width, width),
            conv_block(width, width),
            conv_block(width, width),
        )

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        s = conv4_output_size(self.image_size)
        return (self.width, s, s)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        expected = (self.in_channels, self.image_size, self.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ContractViolation(
                f"embed: expected images of shape (n, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(images.shape)}"
            )
        return self.blocks(images)


def build_prototypes(features: torch.Tensor, labels: Sequence[int] | torch.Tensor,
                     n_way: int) -> torch.Tensor:
    """Mean support feature per class.

    features: (n_s, c, h, w); labels in [0, n_way). Returns (n_way, c, h, w),
    row k being the prototype of class k.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    protos = []
    for k in range(n_way):
        mask = labels == k
        if not bool(mask.any()):
            raise ContractViolation(f"build_prototypes: class {k} has no support samples")
        protos.append(features[mask].mean(dim=0))
    return torch.stack(protos)
