"""Content encoder: prenet, self-attention blocks, weighted layer aggregation.

Every block emits a per-layer summary (conv over time, mean pool over
valid frames); the summaries are fused by attention with the last layer's
summary as the query, yielding one sentential vector alongside the
frame-level content matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from ..config import ModelConfig
from .layers import (
    FeedForward,
    MultiHeadAttention,
    length_mask,
    seeded_dropout,
    sinusoidal_positions,
)


@dataclass
class EncoderOutput:
    content: Tensor  # [B, T, d_model] final block output
    sentential: Tensor  # [B, d_model] aggregated vector
    layer_summaries: Tensor  # [B, N, d_model]


class EncoderPrenet(nn.Module):
    """Two FC+ReLU+dropout layers followed by a projection to d_model."""

    def __init__(self, d_in: int, cfg: ModelConfig, dropout: float = 0.5):
        super().__init__()
        self.dropout = dropout
        self.fc1 = nn.Linear(d_in, cfg.d_model)
        self.fc2 = nn.Linear(cfg.d_model, cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x: Tensor, train: bool = False,
                gen: torch.Generator | None = None) -> Tensor:
        h = torch.relu(self.fc1(x))
        if train:
            h = seeded_dropout(h, self.dropout, gen)
        h = torch.relu(self.fc2(h))
        if train:
            h = seeded_dropout(h, self.dropout, gen)
        return self.proj(h)


class SelfAttentionBlock(nn.Module):
    """One block: self-attention then feed-forward, each with residual + LayerNorm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)

    def forward(self, x: Tensor, valid: Tensor | None = None, train: bool = False,
                gen: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        m = self.norm1(self.attn(x, x, key_valid=valid, train=train, gen=gen) + x)
        f = self.norm2(self.ffn(m, train=train, gen=gen) + m)
        return m, f


class LayerSummary(nn.Module):
    """Conv over time then mean pool over valid frames: [B, T, d] -> [B, d]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        # replicate padding keeps constant-in-time inputs exactly constant
        # through the conv, so the pooled summary is invariant to frame
        # repetition
        self.conv = nn.Conv1d(cfg.d_model, cfg.d_model, kernel_size=cfg.summary_kernel,
                              padding=cfg.summary_kernel // 2, padding_mode="replicate")

    def forward(self, x: Tensor, valid: Tensor | None = None) -> Tensor:
        if valid is not None:
            x = x * valid.unsqueeze(-1).to(x.dtype)
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)
        if valid is None:
            return h.mean(dim=1)
        w = valid.to(x.dtype)
        return (h * w.unsqueeze(-1)).sum(dim=1) / w.sum(dim=1, keepdim=True).clamp(min=1.0)


class WeightedAggregation(nn.Module):
    """Fuse the N per-layer summaries into one vector.

    Attention over the summary sequence with the last summary as query and
    residual, then a feed-forward refinement, each followed by LayerNorm.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)

    def forward(self, summaries: Tensor, train: bool = False,
                gen: torch.Generator | None = None) -> Tensor:
        if summaries.dim() != 3 or summaries.size(1) < 1:
            raise ValueError("expected summaries of shape [B, N, d_model]")
        last = summaries[:, -1:, :]
        c = self.norm1(self.attn(last, summaries, train=train, gen=gen) + last)
        g = self.norm2(self.ffn(c, train=train, gen=gen) + c)
        return g.squeeze(1)


class SawaEncoder(nn.Module):
    """Prenet + N self-attention blocks + weighted aggregation of layer summaries."""

    def __init__(self, d_bn: int, cfg: ModelConfig):
        super().__init__()
        self.prenet = EncoderPrenet(d_bn, cfg)
        self.blocks = nn.ModuleList(SelfAttentionBlock(cfg) for _ in range(cfg.n_blocks))
        self.summaries = nn.ModuleList(LayerSummary(cfg) for _ in range(cfg.n_blocks))
        self.aggregate = WeightedAggregation(cfg)
        self.d_model = cfg.d_model

    def forward(self, bn: Tensor, lengths: Tensor | None = None, train: bool = False,
                gen: torch.Generator | None = None) -> EncoderOutput:
        if not torch.isfinite(bn).all():
            raise ValueError("non-finite bottleneck input")
        B, T, _ = bn.shape
        valid = None
        if lengths is not None:
            valid = length_mask(lengths, T)
        f = self.prenet(bn, train=train, gen=gen)
        f = f + sinusoidal_positions(T, self.d_model, dtype=f.dtype, device=f.device)
        summaries = []
        for block, summarize in zip(self.blocks, self.summaries):
            _, f = block(f, valid=valid, train=train, gen=gen)
            if valid is not None:
                f = f * valid.unsqueeze(-1).to(f.dtype)
            summaries.append(summarize(f, valid=valid))
        g = self.aggregate(torch.stack(summaries, dim=1), train=train, gen=gen)
        return EncoderOutput(content=f, sentential=g, layer_summaries=torch.stack(summaries, 1))
