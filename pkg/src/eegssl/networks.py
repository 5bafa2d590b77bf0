"""Encoders and predictor.

Two transformer encoders share one architecture: the context encoder is
gradient-trained on visible patches only, the target encoder sees the full
sequence and is updated solely by EMA (its parameters never receive
gradients). The predictor is a cross-attention stack whose queries are
position-tagged mask tokens and whose keys/values come from the context
encoder output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import EmbedConfig, PatchEmbedding, build_embedding


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 16  # d_e
    heads: int = 8
    layers: int = 4
    ffn_multiplier: int = 4
    predictor_layers: int = 4

    def __post_init__(self):
        for name in ("embed_dim", "heads", "layers", "ffn_multiplier", "predictor_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )


def standardize_rows(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Zero-mean, unit-variance over the last dimension of each row.

    Invariant under v -> a * v + b for a > 0, which keeps high-amplitude
    rows from dominating regression targets.
    """
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention over an explicit key/value set.

    Set ``store_attention`` to stash the last softmax weights
    (B, heads, queries, keys) for inspection.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.store_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        b, tq, d = query.shape
        tk = key.shape[1]
        q = self.q_proj(query).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        if self.store_attention:
            self.last_attention = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: self-attention then gelu FFN."""

    def __init__(self, dim: int, heads: int, ffn_multiplier: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_multiplier * dim),
            nn.GELU(),
            nn.Linear(ffn_multiplier * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        return x + self.ffn(self.norm_ffn(x))


class TransformerEncoder(nn.Module):
    """Patch-sequence encoder; input positions are already baked into patches."""

    def __init__(self, patch_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(patch_dim, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.embed_dim, cfg.heads, cfg.ffn_multiplier)
            for _ in range(cfg.layers)
        )

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.input_proj(patches)
        for block in self.blocks:
            x = block(x)
        return x


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual block: queries cross-attend to a fixed key/value set."""

    def __init__(self, dim: int, heads: int, ffn_multiplier: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_multiplier * dim),
            nn.GELU(),
            nn.Linear(ffn_multiplier * dim, dim),
        )

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        normed_kv = self.norm_kv(kv)
        q = q + self.attn(self.norm_q(q), normed_kv, normed_kv)
        return q + self.ffn(self.norm_ffn(q))


class CrossAttentionPredictor(nn.Module):
    """Regresses target-patch representations from context representations.

    Each query is the shared mask token plus the positional embedding of the
    patch to predict; queries never see target content and do not attend to
    each other, so predictions per position depend only on the context set
    and the query position.
    """

    def __init__(self, num_positions: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_token = nn.Parameter(torch.empty(cfg.embed_dim))
        self.positional = nn.Parameter(torch.empty(num_positions, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.embed_dim, cfg.heads, cfg.ffn_multiplier)
            for _ in range(cfg.predictor_layers)
        )
        self.out_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def reset_parameters(self, generator: torch.Generator | None = None):
        self.mask_token.data.normal_(0.0, 0.02, generator=generator)
        self.positional.data.normal_(0.0, 0.02, generator=generator)

    def forward(self, context: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """context: (B, P, d_e); positions: (B, T) int64 -> (B, T, d_e)."""
        q = self.mask_token + self.positional[positions]
        for block in self.blocks:
            q = block(q, context)
        return self.out_proj(q)


class Model(nn.Module):
    """Embedding, context/target encoders, and predictor as one unit."""

    def __init__(self, embed: PatchEmbedding, enc_cfg: EncoderConfig):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.embed = embed
        self.context_encoder = TransformerEncoder(embed.cfg.patch_dim, enc_cfg)
        self.target_encoder = TransformerEncoder(embed.cfg.patch_dim, enc_cfg)
        self.predictor = CrossAttentionPredictor(embed.num_patches, enc_cfg)
        self.sync_target()
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)

    @property
    def num_patches(self) -> int:
        return self.embed.num_patches

    def sync_target(self):
        """Copy context-encoder weights into the target encoder."""
        self.target_encoder.load_state_dict(self.context_encoder.state_dict())

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(x)

    def target_representations(self, patches: torch.Tensor) -> torch.Tensor:
        """Standardized full-sequence representations; never part of the graph."""
        with torch.no_grad():
            return standardize_rows(self.target_encoder(patches.detach()))

    def context_representations(self, patches: torch.Tensor, preserved: torch.Tensor) -> torch.Tensor:
        """Encode only the preserved patches; rows stay unnormalized.

        preserved: (B, P) int64 indices into the patch axis.
        """
        if preserved.numel() == 0:
            raise ValueError("context encoder needs at least one visible patch")
        d = patches.shape[-1]
        visible = patches.gather(1, preserved.unsqueeze(-1).expand(-1, -1, d))
        return self.context_encoder(visible)

    def predict(self, context: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return self.predictor(context, positions)

    def trainable_parameters(self):
        """Everything optimized by gradients: embedding, context encoder, predictor."""
        yield from self.embed.parameters()
        yield from self.context_encoder.parameters()
        yield from self.predictor.parameters()


def _reset_linears(module: nn.Module, generator: torch.Generator | None):
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            bound = 1.0 / math.sqrt(sub.in_features)
            sub.weight.data.uniform_(-bound, bound, generator=generator)
            sub.bias.data.uniform_(-bound, bound, generator=generator)
        elif isinstance(sub, nn.LayerNorm):
            sub.weight.data.fill_(1.0)
            sub.bias.data.zero_()


def build_model(
    embed_cfg: EmbedConfig, enc_cfg: EncoderConfig, in_channels: int, length: int, seed: int
) -> Model:
    """Deterministically initialized model; the target encoder starts as a
    copy of the context encoder."""
    embed = build_embedding(embed_cfg, in_channels, length, seed)
    model = Model(embed, enc_cfg)
    generator = torch.Generator().manual_seed(seed + 1)
    _reset_linears(model.context_encoder, generator)
    _reset_linears(model.predictor, generator)
    model.predictor.reset_parameters(generator)
    model.sync_target()
    return model


def count_params(
    embed_cfg: EmbedConfig, enc_cfg: EncoderConfig, in_channels: int, length: int
) -> dict[str, int]:
    """Closed-form parameter counts per sub-network."""
    d = enc_cfg.embed_dim
    f = enc_cfg.ffn_multiplier
    d_x = embed_cfg.patch_dim
    l = embed_cfg.num_patches(length)
    c = in_channels

    embedding = c * embed_cfg.temporal_kernel + c + embed_cfg.num_filters * c + embed_cfg.num_filters
    embedding += l * embed_cfg.patch_dim  # positional table

    linear = lambda d_in, d_out: d_in * d_out + d_out
    attention = 4 * linear(d, d)
    ffn = linear(d, f * d) + linear(f * d, d)
    self_block = 2 * (2 * d) + attention + ffn
    encoder = linear(d_x, d) + enc_cfg.layers * self_block

    cross_block = 3 * (2 * d) + attention + ffn
    predictor = d + l * d + enc_cfg.predictor_layers * cross_block + linear(d, d)

    return {
        "embedding": embedding,
        "context_encoder": encoder,
        "target_encoder": encoder,
        "predictor": predictor,
        "total": embedding + 2 * encoder + predictor,
    }
