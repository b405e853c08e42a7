"""Closed-form parameter counts; usable at full scale without allocating weights."""

from dataclasses import dataclass
from typing import Dict, Optional

from ..constants import TEXT_VOCAB
from ..utils.config import Config

# Conceptual text vocabulary at full scale (T5-base sized)
FULL_SCALE_TEXT_VOCAB = 32128


def _layer_norm(width: int) -> int:
    return 2 * width


def text_encoder_parameter_count(vocab_size: int, d_text: int, n_layers: int, ffn_dim: int,
                                 max_tokens: int) -> int:
    per_layer = (
        3 * d_text * d_text + 3 * d_text        # packed Q/K/V projection
        + d_text * d_text + d_text              # output projection
        + d_text * ffn_dim + ffn_dim            # feed-forward in
        + ffn_dim * d_text + d_text             # feed-forward out
        + 2 * _layer_norm(d_text)
    )
    return vocab_size * d_text + max_tokens * d_text + n_layers * per_layer + _layer_norm(d_text)


def decoder_parameter_count(n_codebooks: int, codebook_size: int, n_layers: int, d_model: int,
                            ffn_dim: int, d_text: int) -> int:
    per_layer = (
        3 * _layer_norm(d_model)
        + 4 * d_model * d_model                                  # self-attention
        + 2 * d_model * d_model + 2 * d_text * d_model           # text cross-attention
        + d_model * ffn_dim + ffn_dim + ffn_dim * d_model + d_model
    )
    embeddings = n_codebooks * codebook_size * d_model
    heads = n_codebooks * d_model * codebook_size
    return embeddings + d_model + n_layers * per_layer + _layer_norm(d_model) + heads


def linear_cond_parameter_count(n_layers: int, d_model: int, bottleneck: Optional[int] = None) -> int:
    """M x d x d, or M x 2 x d x Mb with a bottleneck."""
    if bottleneck is None:
        return n_layers * d_model * d_model
    return n_layers * 2 * d_model * bottleneck


def fusion_parameter_count(n_layers: int, d_model: int, t_max: int, bottleneck: Optional[int] = None) -> int:
    return (d_model + linear_cond_parameter_count(n_layers, d_model, bottleneck)
            + n_layers * t_max * d_model + n_layers)


def lora_parameter_count(n_layers: int, d_model: int, d_text: int, rank: int) -> int:
    """Query pair (d_model -> d_model) plus value pair (d_text -> d_model) per layer."""
    return n_layers * (rank * (d_model + d_model) + rank * (d_text + d_model))


@dataclass
class ParameterSummary:
    """Parameter counts of one configuration."""
    base: int
    text_encoder: int
    linear_cond: int
    fusion: int
    lora: int

    @property
    def trainable(self) -> int:
        return self.fusion + self.lora

    @property
    def ratio(self) -> float:
        return self.trainable / self.base

    def to_dict(self) -> Dict[str, float]:
        return {
            'base': self.base, 'text_encoder': self.text_encoder, 'linear_cond': self.linear_cond,
            'fusion': self.fusion, 'lora': self.lora, 'trainable': self.trainable, 'ratio': self.ratio,
        }


def summarize(config: Config, text_vocab_size: Optional[int] = None, text_fusion: bool = True,
              bottleneck: Optional[int] = None) -> ParameterSummary:
    """Count parameters for ``config`` (a full-scale config never needs instantiating).

    Args:
        config: Resolved configuration
        text_vocab_size: Text vocabulary; defaults to the toy instruction vocabulary
        text_fusion: Include the LoRA set
        bottleneck: Override ``fusion.bottleneck``
    """
    codec, model = config.section('codec'), config.section('model')
    fusion_cfg, lora_cfg = config.section('fusion'), config.section('lora')
    vocab = text_vocab_size if text_vocab_size is not None else len(TEXT_VOCAB)
    width = bottleneck if bottleneck is not None else fusion_cfg['bottleneck']

    text = text_encoder_parameter_count(vocab, model['d_text'], model['text_layers'],
                                        model['text_ffn_dim'], model['max_text_tokens'])
    decoder = decoder_parameter_count(codec['n_codebooks'], codec['codebook_size'], model['n_layers'],
                                      model['d_model'], model['ffn_dim'], model['d_text'])
    return ParameterSummary(
        base=decoder + text,
        text_encoder=text,
        linear_cond=linear_cond_parameter_count(model['n_layers'], model['d_model'], width),
        fusion=fusion_parameter_count(model['n_layers'], model['d_model'], fusion_cfg['t_max'], width),
        lora=lora_parameter_count(model['n_layers'], model['d_model'], model['d_text'], lora_cfg['rank'])
        if text_fusion else 0,
    )
