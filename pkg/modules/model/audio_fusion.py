"""
Audio fusion: a condition stream through duplicated frozen self-attention,
merged into the music stream by zero-gated cross-attention.

For layer m the condition stream input is
``h_m = z_cond^{m-1} + Linear_m(z_cond) + e_m`` where ``z_cond^0`` is the
learned input embedding broadcast over time and ``z_cond`` is the embedded
condition grid. ``h_m`` goes through the base layer's frozen W_Q, W_K, W_V
(giving Q'_m, K'_m, V'_m) and ``z_cond^m = Attn(Q'_m, K'_m, V'_m) W_O``.
The music stream then uses
``O_fuse = O + g_m * Softmax((Q + Q'_m) K'_mᵀ / sqrt(d_head)) V'_m W_O``.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from ..errors import ConfigurationError, InputError
from ..utils.logger import get_logger
from .attention import attend, merge_heads
from .token_lm import TokenLM

logger = get_logger(__name__)


@dataclass
class ConditionStates:
    """Condition stream activations and per-layer head-split projections."""
    states: List[torch.Tensor]          # z_cond^0..z_cond^M, each (B, T, d)
    queries: List[torch.Tensor]         # Q'_1..Q'_M, each (B, H, T, d_head)
    keys: List[torch.Tensor]
    values: List[torch.Tensor]

    @property
    def length(self) -> int:
        return int(self.states[-1].shape[1])


class AudioFusion(nn.Module):
    """Trainable audio fusion parameters.

    ``z0_cond`` (d), ``linear_cond`` (M linears d->d, or d->Mb->d with a
    bottleneck), ``pos_embeddings`` (M tensors T_max x d) and ``gates`` (M).
    """

    def __init__(self, n_layers: int, d_model: int, t_max: int, bottleneck: Optional[int] = None):
        super().__init__()
        self.t_max = t_max
        self.bottleneck = bottleneck
        self.z0_cond = nn.Parameter(torch.zeros(d_model))
        if bottleneck is None:
            self.linear_cond = nn.ModuleList(nn.Linear(d_model, d_model, bias=False) for _ in range(n_layers))
        else:
            self.linear_cond = nn.ModuleList(
                nn.Sequential(nn.Linear(d_model, bottleneck, bias=False), nn.Linear(bottleneck, d_model, bias=False))
                for _ in range(n_layers)
            )
        self.pos_embeddings = nn.ParameterList(nn.Parameter(torch.zeros(t_max, d_model)) for _ in range(n_layers))
        self.gates = nn.Parameter(torch.zeros(n_layers))

    def __len__(self) -> int:
        return len(self.linear_cond)

    @torch.no_grad()
    def zero_gates_(self) -> 'AudioFusion':
        self.gates.zero_()
        return self


def init_fusion(base: TokenLM, t_max: int, seed: int, bottleneck: Optional[int] = None,
                init_std: float = 0.02) -> AudioFusion:
    """Create fusion parameters for ``base``.

    Linears, position embeddings and ``z0_cond`` are drawn from N(0, init_std²)
    with a seeded generator; gates are exactly zero.

    Raises:
        ConfigurationError: On non-positive ``t_max`` or bottleneck width
    """
    if t_max < 1:
        raise ConfigurationError(f"t_max must be >= 1, got {t_max}")
    if bottleneck is not None and bottleneck < 1:
        raise ConfigurationError(f"Bottleneck width must be >= 1, got {bottleneck}")
    cfg = base.config
    fusion = AudioFusion(cfg.n_layers, cfg.d_model, t_max, bottleneck).to(base.dtype)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in fusion.named_parameters():
            if name == 'gates':
                continue
            param.copy_(torch.randn(param.shape, generator=generator, dtype=torch.float64) * init_std)
    count = sum(p.numel() for p in fusion.parameters())
    logger.debug(f"Initialized audio fusion on {cfg.n_layers} layers, T_max={t_max} ({count} parameters)")
    return fusion


def condition_forward(cond_embedding: torch.Tensor, fusion: AudioFusion, base: TokenLM) -> ConditionStates:
    """Run the condition stream over an embedded condition grid.

    Args:
        cond_embedding: (B, T, d) summed codebook embeddings of the condition
        fusion: Trainable fusion parameters
        base: Frozen base model whose self-attention weights are reused

    Returns:
        ConditionStates: z_cond^0..z_cond^M and Q'/K'/V' per layer

    Raises:
        ConfigurationError: If T exceeds ``fusion.t_max``
    """
    batch, length, _ = cond_embedding.shape
    if length > fusion.t_max:
        raise ConfigurationError(f"Condition length {length} exceeds T_max {fusion.t_max}")
    state = fusion.z0_cond.expand(batch, length, -1)
    states, queries, keys, values = [state], [], [], []
    for m, layer in enumerate(base.layers):
        h = state + fusion.linear_cond[m](cond_embedding) + fusion.pos_embeddings[m][:length]
        q, k, v = layer.self_attn.project_qkv(h, h)
        out, _ = attend(q, k, v)
        state = layer.self_attn.o_proj(merge_heads(out))
        states.append(state)
        queries.append(q)
        keys.append(k)
        values.append(v)
    return ConditionStates(states, queries, keys, values)


def fused_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                    q_cond: torch.Tensor, k_cond: torch.Tensor, v_cond: torch.Tensor,
                    out_proj: nn.Module, gate: torch.Tensor,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Gated fusion of self-attention and condition cross-attention.

    All inputs are head-split (B, H, T, d_head). ``O`` is the (masked)
    self-attention output through ``out_proj``; ``O''`` attends with queries
    ``q + q_cond`` over the condition keys and values (unmasked) through the
    same ``out_proj``. Returns ``O + gate * O''``.

    Raises:
        InputError: If music and condition lengths differ
    """
    if q.shape[-2] != q_cond.shape[-2] or k_cond.shape[-2] != q.shape[-2]:
        raise InputError(f"Music length {q.shape[-2]} and condition length {k_cond.shape[-2]} differ")
    o, _ = attend(q, k, v, mask)
    o = out_proj(merge_heads(o))
    o_cond, _ = attend(q + q_cond, k_cond, v_cond)
    o_cond = out_proj(merge_heads(o_cond))
    return o + gate * o_cond

