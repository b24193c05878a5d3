"""Shared network primitives.

Dropout everywhere in the package is driven by an explicit
``torch.Generator`` so that training steps and inference calls are pure
functions of their seeds. Modules take ``train``/``gen`` arguments instead
of relying on the global RNG or module mode.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def seeded_dropout(x: Tensor, p: float, gen: torch.Generator | None) -> Tensor:
    """Inverted dropout with an explicit generator; identity when p == 0 or gen is None."""
    if p <= 0.0 or gen is None:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= p)
    return x * keep.to(x.dtype) / (1.0 - p)


def zero_init_(module: nn.Linear | nn.Conv1d):
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


def sinusoidal_positions(T: int, d_model: int, dtype=torch.float32, device=None) -> Tensor:
    """Standard sine/cosine positional encodings [T, d_model]."""
    position = torch.arange(T, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d_model, 2, dtype=dtype, device=device) * (-math.log(10000.0) / d_model)
    )
    pe = torch.zeros(T, d_model, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return pe


def length_mask(lengths: Tensor, max_len: int) -> Tensor:
    """Boolean validity mask [B, max_len] from per-item lengths."""
    return torch.arange(max_len, device=lengths.device).unsqueeze(0) < lengths.unsqueeze(1)


def last_valid_state(outputs: Tensor, lengths: Tensor) -> Tensor:
    """Gather the output at the last valid frame of each sequence [B, T, H] -> [B, H]."""
    idx = (lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, outputs.size(-1))
    return outputs.gather(1, idx).squeeze(1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention with zero-initialized output projection.

    Queries may differ from keys/values (used by the summary aggregation);
    self-attention passes the same tensor for both.
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.dropout = dropout
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = zero_init_(nn.Linear(d_model, d_model))

    def forward(self, query: Tensor, memory: Tensor, key_valid: Tensor | None = None,
                train: bool = False, gen: torch.Generator | None = None) -> Tensor:
        B, Tq, _ = query.shape
        Tk = memory.size(1)
        q = self.q_proj(query).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(memory).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(memory).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid.view(B, 1, 1, Tk), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if train:
            attn = seeded_dropout(attn, self.dropout, gen)
        out = (attn @ v).transpose(1, 2).reshape(B, Tq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    """Two-layer position-wise feed-forward net; second layer zero-initialized."""

    def __init__(self, d_model: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.dropout = dropout
        self.lin1 = nn.Linear(d_model, hidden)
        self.lin2 = zero_init_(nn.Linear(hidden, d_model))

    def forward(self, x: Tensor, train: bool = False,
                gen: torch.Generator | None = None) -> Tensor:
        h = torch.relu(self.lin1(x))
        if train:
            h = seeded_dropout(h, self.dropout, gen)
        return self.lin2(h)


class ConvStack(nn.Module):
    """1-D conv downsampling stack over time: [B, T, C_in] -> [B, ceil(T/2^n), C_out]."""

    def __init__(self, in_dim: int, channels: int, n_layers: int, kernel: int = 5):
        super().__init__()
        convs = []
        for i in range(n_layers):
            convs.append(nn.Conv1d(in_dim if i == 0 else channels, channels,
                                   kernel_size=kernel, stride=2, padding=kernel // 2))
        self.convs = nn.ModuleList(convs)

    def forward(self, x: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = torch.relu(conv(h))
            lengths = torch.div(lengths + 1, 2, rounding_mode="floor")
        return h.transpose(1, 2), lengths.clamp(min=1)
