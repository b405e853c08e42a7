"""
Low-rank adaptation of the frozen text cross-attention.

Each layer gets one pair for the query projection (d_model -> d_model) and one
for the value projection (d_text -> d_model). The key projection is never
adapted. A pair contributes ``scale * Aᵀ B`` on top of the frozen weight;
B starts at zero so the adapted model starts identical to the base model.
"""

from typing import Optional, Tuple

import torch
import torch.nn as nn

from ..errors import ConfigurationError, InputError
from ..utils.logger import get_logger
from .text_encoder import TextEmbedding
from .token_lm import TokenLM

logger = get_logger(__name__)


class LoraPair(nn.Module):
    """A (r x d_in) and B (r x d_out) factors of one projection delta."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.zeros(rank, d_in))
        self.B = nn.Parameter(torch.zeros(rank, d_out))

    @property
    def d_in(self) -> int:
        return int(self.A.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.B.shape[1])

    def delta(self) -> torch.Tensor:
        """scale * Aᵀ B, shaped (d_in, d_out)."""
        return self.scale * (self.A.transpose(0, 1) @ self.B)


class LoraSet(nn.Module):
    """Per-layer LoRA pairs for the cross-attention query and value projections."""

    def __init__(self, n_layers: int, d_model: int, d_text: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.rank = rank
        self.q = nn.ModuleList(LoraPair(d_model, d_model, rank, scale) for _ in range(n_layers))
        self.v = nn.ModuleList(LoraPair(d_text, d_model, rank, scale) for _ in range(n_layers))

    def __len__(self) -> int:
        return len(self.q)

    def layer_deltas(self, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.q[layer].delta(), self.v[layer].delta()

    @torch.no_grad()
    def zero_(self) -> 'LoraSet':
        for pair in list(self.q) + list(self.v):
            pair.B.zero_()
        return self


def init_lora(base: TokenLM, rank: int, seed: int, scale: float = 1.0, init_std: float = 0.1) -> LoraSet:
    """Create the LoRA set for every layer of ``base``.

    A factors are drawn from N(0, init_std²) with a seeded generator; B factors
    are exactly zero.

    Raises:
        ConfigurationError: If ``rank`` < 1
    """
    if rank < 1:
        raise ConfigurationError(f"LoRA rank must be >= 1, got {rank}")
    cfg = base.config
    lora = LoraSet(cfg.n_layers, cfg.d_model, cfg.d_text, rank, scale).to(base.dtype)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for pair in list(lora.q) + list(lora.v):
            pair.A.copy_(torch.randn(pair.A.shape, generator=generator, dtype=torch.float64) * init_std)
    count = sum(p.numel() for p in lora.parameters())
    logger.debug(f"Initialized LoRA rank {rank} on {cfg.n_layers} layers ({count} parameters)")
    return lora


def apply_lora(weight: torch.Tensor, pair: LoraPair) -> torch.Tensor:
    """Effective (d_in x d_out) weight: ``weight + scale * Aᵀ B``; ``weight`` is not modified.

    Raises:
        InputError: If shapes do not conform
    """
    if weight.dim() != 2 or tuple(weight.shape) != (pair.d_in, pair.d_out):
        raise InputError(f"Weight shape {tuple(weight.shape)} does not match LoRA pair "
                         f"({pair.d_in}, {pair.d_out})")
    return weight + pair.delta()


def lora_cross_attention(music_states: torch.Tensor, instruct: TextEmbedding, layer: int,
                         base: TokenLM, lora: Optional[LoraSet]) -> torch.Tensor:
    """Cross-attention of layer ``layer`` with LoRA-adapted query and value projections.

    Queries come from ``music_states`` (already normalised, (B, T, d_model));
    keys and values come from the instruction states. Without ``lora`` this is
    the frozen base cross-attention.

    Raises:
        InputError: If an instruction is entirely masked
    """
    block = base.layers[layer]
    if lora is None:
        return block.text_attention(music_states, instruct)
    q_delta, v_delta = lora.layer_deltas(layer)
    return block.text_attention(music_states, instruct, q_delta=q_delta, v_delta=v_delta)
