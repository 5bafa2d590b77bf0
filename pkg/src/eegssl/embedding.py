"""Convolutional input embedding: raw C x L signals to patch sequences.

Three stages: a depthwise temporal convolution per channel, a pointwise
spatial filter mixing channels into feature maps, and temporal max pooling.
A learned positional embedding is added to each pooled patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EmbedConfig:
    num_filters: int = 16
    temporal_kernel: int = 8
    pool_size: int = 4
    activation: str = "gelu"  # "gelu" or "none"

    def __post_init__(self):
        if self.num_filters < 1 or self.temporal_kernel < 1 or self.pool_size < 1:
            raise ValueError("num_filters, temporal_kernel, and pool_size must be >= 1")
        if self.activation not in ("gelu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def patch_dim(self) -> int:
        return self.num_filters

    def num_patches(self, length: int) -> int:
        return math.ceil(length / self.pool_size)


class PatchEmbedding(nn.Module):
    """Maps (B, C, L) signals to (B, l, d_x) patch sequences."""

    def __init__(self, cfg: EmbedConfig, in_channels: int, length: int):
        super().__init__()
        if in_channels < 1 or length < 1:
            raise ValueError("in_channels and length must be >= 1")
        self.cfg = cfg
        self.in_channels = in_channels
        self.length = length
        self.num_patches = cfg.num_patches(length)

        # explicit asymmetric same-padding: torch warns on padding="same"
        # with even kernels
        self._pad = ((cfg.temporal_kernel - 1) // 2, cfg.temporal_kernel // 2)
        self.depthwise = nn.Conv1d(
            in_channels, in_channels, cfg.temporal_kernel, groups=in_channels
        )
        self.spatial = nn.Conv1d(in_channels, cfg.num_filters, kernel_size=1)
        self.pool = nn.MaxPool1d(cfg.pool_size, ceil_mode=True)
        self.positional = nn.Parameter(torch.empty(self.num_patches, cfg.num_filters))

    def reset_parameters(self, generator: torch.Generator | None = None):
        """Fan-in-scaled uniform weights, zero biases, small random positions."""
        for conv in (self.depthwise, self.spatial):
            # weight shape (out, in/groups, k): fan-in per output map
            fan_in = conv.weight.shape[1] * conv.weight.shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            conv.weight.data.uniform_(-bound, bound, generator=generator)
            conv.bias.data.zero_()
        self.positional.data.normal_(0.0, 0.02, generator=generator)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Patch features before the positional embedding is added."""
        h = self.depthwise(F.pad(x, self._pad))
        h = self.spatial(h)
        if self.cfg.activation == "gelu":
            h = F.gelu(h)
        h = self.pool(h)
        return h.transpose(1, 2)  # (B, l, d_x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels or x.shape[2] != self.length:
            raise ValueError(
                f"expected input of shape (B, {self.in_channels}, {self.length}), "
                f"got {tuple(x.shape)}"
            )
        return self.features(x) + self.positional


def build_embedding(cfg: EmbedConfig, in_channels: int, length: int, seed: int) -> PatchEmbedding:
    """Deterministically initialized embedding for the given input shape."""
    module = PatchEmbedding(cfg, in_channels, length)
    generator = torch.Generator().manual_seed(seed)
    module.reset_parameters(generator)
    return module


def embed_window(module: PatchEmbedding, samples) -> torch.Tensor:
    """Embed a single (C, L) window to its (l, d_x) patch sequence."""
    x = torch.as_tensor(samples, dtype=module.positional.dtype).unsqueeze(0)
    with torch.no_grad():
        return module(x).squeeze(0)
