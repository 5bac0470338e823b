import math

import torch
from torch import nn

from src.app.models.base import init_module_weights, norm_layer


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Softmax(Q K^T / sqrt(d)) V over the last two dims."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):

    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} should be divided by heads {heads}.")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(dim, dim, bias=bias)
        self.v_proj = nn.Linear(dim, dim, bias=bias)
        self.out_proj = nn.Linear(dim, dim)
        self.apply(init_module_weights)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query, key, value, return_weights: bool = False):
        b, n, c = query.shape
        if c != self.dim or key.shape[-1] != self.dim or value.shape[-1] != self.dim:
            raise ValueError(f"inputs must have width {self.dim}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out, weights = attention(q, k, v, return_weights=True)
        out = self.out_proj(out.transpose(1, 2).reshape(b, n, c))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    """Max(0, X W1 + b1) W2 + b2."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.ReLU()
        self.apply(init_module_weights)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class AttentionBlock(nn.Module):
    """Post-norm block: attention -> add & norm -> FFN -> add & norm.

    Positional embeddings, when given, are added to the query and key inputs only.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, normalize: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm1 = norm_layer(dim, normalize)
        self.norm2 = norm_layer(dim, normalize)

    def forward(self, query, memory=None, query_pos=None, memory_pos=None):
        if memory is None:
            memory, memory_pos = query, query_pos
        q = query if query_pos is None else query + query_pos
        k = memory if memory_pos is None else memory + memory_pos
        x = self.norm1(query + self.attn(q, k, memory))
        return self.norm2(x + self.ffn(x))
