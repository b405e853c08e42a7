"""Multi-head attention primitives shared by the decoder, condition stream and text fusion."""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    """(B, T, d) -> (B, H, T, d/H)."""
    batch, length, width = x.shape
    return x.view(batch, length, n_heads, width // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """(B, H, T, d/H) -> (B, T, d)."""
    batch, heads, length, head_dim = x.shape
    return x.transpose(1, 2).reshape(batch, length, heads * head_dim)


def causal_mask(length: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """Boolean (T, T) mask, True where query t may attend key s (s <= t)."""
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
           mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Softmax(q kᵀ / sqrt(d_head)) v per head.

    Args:
        q: (B, H, Tq, dh) queries
        k: (B, H, Tk, dh) keys
        v: (B, H, Tk, dh) values
        mask: Boolean, broadcastable to (B, H, Tq, Tk); False entries are excluded

    Returns:
        Tuple of the (B, H, Tq, dh) output and the (B, H, Tq, Tk) attention weights
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float('-inf'))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Bias-free multi-head attention with separate Q/K/V/O projections.

    ``kv_dim`` differs from ``d_model`` for cross-attention over text states.
    Projection deltas (``q_delta``/``v_delta``, shaped ``d_in x d_out``) are
    added on top of the frozen projections without touching them.
    """

    def __init__(self, d_model: int, n_heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or d_model
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(kv_dim, d_model, bias=False)
        self.v_proj = nn.Linear(kv_dim, d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)

    def project_qkv(self, query: torch.Tensor, key_value: torch.Tensor,
                    q_delta: Optional[torch.Tensor] = None,
                    v_delta: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Head-split Q, K, V projections."""
        q = self.q_proj(query)
        if q_delta is not None:
            q = q + query @ q_delta
        k = self.k_proj(key_value)
        v = self.v_proj(key_value)
        if v_delta is not None:
            v = v + key_value @ v_delta
        return split_heads(q, self.n_heads), split_heads(k, self.n_heads), split_heads(v, self.n_heads)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                mask: Optional[torch.Tensor] = None,
                q_delta: Optional[torch.Tensor] = None,
                v_delta: Optional[torch.Tensor] = None,
                return_weights: bool = False):
        q, k, v = self.project_qkv(query, key_value, q_delta, v_delta)
        out, weights = attend(q, k, v, mask)
        out = self.o_proj(merge_heads(out))
        return (out, weights) if return_weights else out
