"""
Instruction-following editor: the frozen base model with audio fusion and
text fusion attached.
"""

from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from ..codec.rvq import TokenGrid
from ..errors import InputError
from ..utils.config import Config
from ..utils.logger import get_logger
from .attention import causal_mask
from .audio_fusion import AudioFusion, ConditionStates, condition_forward, fused_attention, init_fusion
from .text_encoder import TextEmbedding
from .text_fusion import LoraSet, init_lora, lora_cross_attention
from .token_lm import TokenLM, sample_tokens

logger = get_logger(__name__)

TokensLike = Union[TokenGrid, torch.Tensor, np.ndarray]


def _decode_with_condition(tokens: torch.Tensor, cond: ConditionStates, instruction: TextEmbedding,
                           base: TokenLM, fusion: AudioFusion, lora: Optional[LoraSet]) -> torch.Tensor:
    x = base.decoder_inputs(tokens)
    if x.shape[1] != cond.length:
        raise InputError(f"Music length {x.shape[1]} and condition length {cond.length} differ")
    mask = causal_mask(x.shape[1], x.device)
    for m, layer in enumerate(base.layers):
        h = layer.self_norm(x)
        q, k, v = layer.self_attn.project_qkv(h, h)
        x = x + fused_attention(q, k, v, cond.queries[m], cond.keys[m], cond.values[m],
                                layer.self_attn.o_proj, fusion.gates[m], mask)
        x = x + lora_cross_attention(layer.cross_norm(x), instruction, m, base, lora)
        x = x + layer.ffn(layer.ffn_norm(x))
    return base.output_logits(x)


def fused_decoder_forward(music_prefix: TokensLike, condition: TokensLike, instruction: TextEmbedding,
                          base: TokenLM, fusion: AudioFusion, lora: Optional[LoraSet]) -> torch.Tensor:
    """Teacher-forced logits (B, N, T, L) of the fused decoder.

    Each layer's self-attention output is replaced by the gated fusion output
    before the residual add; text cross-attention uses the LoRA-adapted
    projections when ``lora`` is given.

    Raises:
        InputError: If the grids differ in batch size or length
    """
    tokens = base._as_tokens(music_prefix)
    cond_tokens = base._as_tokens(condition)
    if tokens.shape != cond_tokens.shape:
        raise InputError(f"Music grid {tuple(tokens.shape)} and condition grid "
                         f"{tuple(cond_tokens.shape)} differ in shape")
    if instruction.states.shape[0] != tokens.shape[0]:
        raise InputError("Instruction and grid batch sizes differ")
    cond = condition_forward(base.embed_tokens(cond_tokens), fusion, base)
    return _decode_with_condition(tokens, cond, instruction, base, fusion, lora)


class InstructionEditor(nn.Module):
    """Frozen base plus trainable fusion modules.

    Parameter names are prefixed ``base.``, ``fusion.`` and ``lora.``; only the
    latter two are trainable.
    """

    def __init__(self, base: TokenLM, fusion: AudioFusion, lora: Optional[LoraSet] = None):
        super().__init__()
        self.base = base.freeze()
        self.fusion = fusion
        self.lora = lora

    @classmethod
    def attach(cls, base: TokenLM, config: Config, seed: int, text_fusion_enabled: bool = True,
               bottleneck: Optional[int] = None) -> 'InstructionEditor':
        """Attach freshly initialized adapters to ``base`` using config sections ``fusion`` and ``lora``."""
        fusion_cfg = config.section('fusion')
        lora_cfg = config.section('lora')
        width = bottleneck if bottleneck is not None else fusion_cfg['bottleneck']
        fusion = init_fusion(base, fusion_cfg['t_max'], seed, width, fusion_cfg['init_std'])
        lora = None
        if text_fusion_enabled:
            lora = init_lora(base, lora_cfg['rank'], seed + 1, lora_cfg['scale'], lora_cfg['init_std'])
        editor = cls(base, fusion, lora)
        logger.info(f"Attached adapters: {editor.trainable_count()} trainable / "
                    f"{editor.frozen_count()} frozen parameters")
        return editor

    @property
    def text_fusion_enabled(self) -> bool:
        return self.lora is not None

    def trainable_parameters(self) -> Dict[str, nn.Parameter]:
        return {name: p for name, p in self.named_parameters() if not name.startswith('base.')}

    def frozen_parameters(self) -> Dict[str, nn.Parameter]:
        return {name: p for name, p in self.named_parameters() if name.startswith('base.')}

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters().values())

    def frozen_count(self) -> int:
        return sum(p.numel() for p in self.frozen_parameters().values())

    def encode_instructions(self, instructions: Union[str, List[str], TextEmbedding]) -> TextEmbedding:
        if isinstance(instructions, TextEmbedding):
            return instructions
        if isinstance(instructions, str):
            instructions = [instructions]
        return self.base.encode_texts(list(instructions))

    def forward(self, target: TokensLike, condition: TokensLike,
                instructions: Union[str, List[str], TextEmbedding]) -> torch.Tensor:
        return fused_decoder_forward(target, condition, self.encode_instructions(instructions),
                                     self.base, self.fusion, self.lora)

    @contextmanager
    def zero_adapters(self) -> Iterator['InstructionEditor']:
        """Temporarily zero the gates and LoRA B factors (the initial, base-equivalent state)."""
        saved = {name: p.detach().clone() for name, p in self.trainable_parameters().items()
                 if name == 'fusion.gates' or name.endswith('.B')}
        with torch.no_grad():
            self.fusion.zero_gates_()
            if self.lora is not None:
                self.lora.zero_()
        try:
            yield self
        finally:
            params = self.trainable_parameters()
            with torch.no_grad():
                for name, value in saved.items():
                    params[name].copy_(value)

    @torch.no_grad()
    def generate_edit(self, condition: TokenGrid, instruction: str, temperature: float = 0.0,
                      top_k: int = 0, seed: int = 0) -> TokenGrid:
        """Generate the edited grid, frame by frame, with the same length as ``condition``."""
        cfg = self.base.config
        cond_tokens = self.base._as_tokens(condition)
        length = cond_tokens.shape[-1]
        if length < 1:
            raise InputError("Condition grid is empty")
        text = self.encode_instructions(instruction)
        cond = condition_forward(self.base.embed_tokens(cond_tokens), self.fusion, self.base)
        generator = torch.Generator().manual_seed(seed)
        tokens = torch.zeros((1, cfg.n_codebooks, length), dtype=torch.long, device=cond_tokens.device)
        for t in range(length):
            logits = _decode_with_condition(tokens, cond, text, self.base, self.fusion, self.lora)
            tokens[0, :, t] = sample_tokens(logits[0, :, t, :].cpu(), temperature, top_k, generator).to(tokens.device)
        return TokenGrid(tokens[0].cpu().numpy(), cfg.frame_rate, cfg.codebook_size)
