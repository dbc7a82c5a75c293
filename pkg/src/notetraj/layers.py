"""Transformer building blocks shared by the note encoder and the trajectory model."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    """Multi-head attention over SDPA.

    Attention weights are not dropped out: on CPU that forces the unfused
    path and costs about a third of a training step. Blocks apply dropout
    to the attention output instead.
    """

    def __init__(self, hidden_dim: int, n_heads: int):
        super().__init__()
        if hidden_dim % n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = hidden_dim // n_heads
        self.q_proj = nn.Linear(hidden_dim, hidden_dim)
        self.k_proj = nn.Linear(hidden_dim, hidden_dim)
        self.v_proj = nn.Linear(hidden_dim, hidden_dim)
        self.out_proj = nn.Linear(hidden_dim, hidden_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        bias: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        """
        Args:
            query: [B, Tq, D]
            memory: [B, Tk, D]
            bias: additive attention bias broadcastable to [B, H, Tq, Tk]
            key_padding_mask: [B, Tk], True marks padding
            causal: forbid attention to later key positions
        """
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        tq, tk = q.shape[-2], k.shape[-2]
        mask = None
        if bias is not None:
            mask = bias.to(q.dtype)
        if key_padding_mask is not None:
            pad = torch.zeros(key_padding_mask.shape, dtype=q.dtype, device=q.device)
            pad = pad.masked_fill(key_padding_mask, float("-inf"))[:, None, None, :]
            mask = pad if mask is None else mask + pad
        if causal:
            future = torch.full((tq, tk), float("-inf"), dtype=q.dtype, device=q.device).triu(1)
            mask = future if mask is None else mask + future
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out_proj(out.transpose(1, 2).reshape(query.shape[0], tq, -1))


class FeedForward(nn.Module):
    def __init__(self, hidden_dim: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(hidden_dim, ff_dim)
        self.fc2 = nn.Linear(ff_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # exact (erf) GELU
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, hidden_dim, n_heads, ff_dim, dropout=0.0, norm_first=False):
        super().__init__()
        self.attn = MultiHeadAttention(hidden_dim, n_heads)
        self.ff = FeedForward(hidden_dim, ff_dim, dropout)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)
        self.norm_first = norm_first

    def forward(self, x, bias=None, key_padding_mask=None):
        if self.norm_first:
            h = self.norm1(x)
            x = x + self.dropout(self.attn(h, h, bias, key_padding_mask))
            return x + self.dropout(self.ff(self.norm2(x)))
        x = self.norm1(x + self.dropout(self.attn(x, x, bias, key_padding_mask)))
        return self.norm2(x + self.dropout(self.ff(x)))


class DecoderBlock(nn.Module):
    """Pre-norm decoder block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, hidden_dim, n_heads, ff_dim, dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(hidden_dim, n_heads)
        self.cross_attn = MultiHeadAttention(hidden_dim, n_heads)
        self.ff = FeedForward(hidden_dim, ff_dim, dropout)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.norm3 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, memory_padding_mask=None, target_padding_mask=None):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, key_padding_mask=target_padding_mask, causal=True))
        x = x + self.dropout(
            self.cross_attn(self.norm2(x), memory, key_padding_mask=memory_padding_mask)
        )
        return x + self.dropout(self.ff(self.norm3(x)))


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_positions, dtype=torch.float32)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float32)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(n_positions, dim)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table
