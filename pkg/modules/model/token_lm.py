"""
Base token language model.

A causal pre-norm decoder over summed codebook embeddings. Each layer runs
self-attention, then cross-attention over the encoded text, then a
feed-forward block. N bias-free heads predict all codebooks of a frame in
parallel.
"""

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from ..codec.rvq import TokenGrid
from ..constants import TEXT_VOCAB
from ..errors import ConfigurationError, InputError
from ..utils.config import Config
from ..utils.logger import get_logger
from .attention import MultiHeadAttention, causal_mask
from .text_encoder import InstructionTokenizer, TextEmbedding, TextEncoder, pad_token_ids

logger = get_logger(__name__)

DTYPES = {'float32': torch.float32, 'float64': torch.float64}
INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Dimensions of the base model (``codec`` + ``model`` config sections)."""
    n_codebooks: int = 4
    codebook_size: int = 64
    frame_rate: int = 50
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    text_ffn_dim: int = 128
    max_text_tokens: int = 16
    dtype: str = 'float32'

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_text % self.text_heads != 0:
            raise ConfigurationError(f"d_text {self.d_text} not divisible by text_heads {self.text_heads}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"Unsupported dtype: {self.dtype}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    @classmethod
    def from_config(cls, config: Config) -> 'ModelConfig':
        codec = config.section('codec')
        return cls(n_codebooks=codec['n_codebooks'], codebook_size=codec['codebook_size'],
                   frame_rate=codec['frame_rate'], **config.section('model'))

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def to_dict(self) -> Dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ForwardOutput:
    """Logits (B, N, T, L), hidden states (M+1 entries of (B, T, d)) and optional attention weights."""
    logits: torch.Tensor
    hidden: List[torch.Tensor]
    attention: List[Dict[str, torch.Tensor]] = field(default_factory=list)


class DecoderLayer(nn.Module):
    """Pre-norm block: self-attention, text cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, d_text: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_norm = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, kv_dim=d_text)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, d_model))

    def text_attention(self, x: torch.Tensor, text: TextEmbedding,
                       q_delta: Optional[torch.Tensor] = None, v_delta: Optional[torch.Tensor] = None,
                       return_weights: bool = False):
        """Cross-attention from the (normed) music stream to the instruction states."""
        if not bool(text.mask.any(dim=1).all()):
            raise InputError("Every instruction needs at least one unmasked token")
        mask = text.mask[:, None, None, :]
        return self.cross_attn(x, text.states, mask=mask, q_delta=q_delta, v_delta=v_delta,
                               return_weights=return_weights)

    def forward(self, x: torch.Tensor, text: TextEmbedding, mask: torch.Tensor,
                return_weights: bool = False):
        h = self.self_norm(x)
        o, self_weights = self.self_attn(h, h, mask=mask, return_weights=True)
        x = x + o
        c, cross_weights = self.text_attention(self.cross_norm(x), text, return_weights=True)
        x = x + c
        x = x + self.ffn(self.ffn_norm(x))
        if return_weights:
            return x, {'self': self_weights, 'cross': cross_weights}
        return x


def sample_tokens(logits: torch.Tensor, temperature: float = 0.0, top_k: int = 0,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw one token per codebook from (N, L) logits.

    Greedy when ``temperature`` is 0 or ``top_k`` is 1.
    """
    if temperature <= 0.0 or top_k == 1:
        return torch.argmax(logits, dim=-1)
    scaled = logits / temperature
    if top_k > 0:
        kth = torch.topk(scaled, min(top_k, scaled.shape[-1]), dim=-1).values[..., -1:]
        scaled = scaled.masked_fill(scaled < kth, float('-inf'))
    probs = torch.softmax(scaled, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


class TokenLM(nn.Module):
    """Frozen-able base model: text encoder plus causal token decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tokenizer = InstructionTokenizer(TEXT_VOCAB, config.max_text_tokens)
        self.text_encoder = TextEncoder(len(self.tokenizer), config.d_text, config.text_layers,
                                        config.text_heads, config.text_ffn_dim, config.max_text_tokens)
        self.token_embeddings = nn.ModuleList(
            nn.Embedding(config.codebook_size, config.d_model) for _ in range(config.n_codebooks)
        )
        self.sos = nn.Parameter(torch.zeros(config.d_model))
        self.layers = nn.ModuleList(
            DecoderLayer(config.d_model, config.n_heads, config.ffn_dim, config.d_text)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model)
        self.heads = nn.ModuleList(
            nn.Linear(config.d_model, config.codebook_size, bias=False) for _ in range(config.n_codebooks)
        )
        self.frozen = False
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear) and module.weight.dim() == 2:
                nn.init.normal_(module.weight, std=INIT_STD)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=INIT_STD)
        nn.init.normal_(self.sos, std=INIT_STD)

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> 'TokenLM':
        """Seeded construction that leaves the global RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(config)
        return model.to(config.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.sos.dtype

    def freeze(self) -> 'TokenLM':
        """Disable gradients on every base parameter and switch to eval mode."""
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def unfreeze(self) -> 'TokenLM':
        self.requires_grad_(True)
        self.frozen = False
        return self

    # Text side

    def encode_texts(self, texts: List[str]) -> TextEmbedding:
        """Encode a batch of instructions, right-padded."""
        if not texts:
            raise InputError("No instruction texts given")
        ids, mask = pad_token_ids([self.tokenizer.tokenize(t) for t in texts])
        ids, mask = ids.to(self.sos.device), mask.to(self.sos.device)
        return TextEmbedding(self.text_encoder(ids, mask), mask)

    def encode_text(self, text: str) -> TextEmbedding:
        """Encode one instruction as a (1, S, d_text) embedding."""
        return self.encode_texts([text])

    # Music side

    def _as_tokens(self, tokens: Union[TokenGrid, torch.Tensor, np.ndarray]) -> torch.Tensor:
        if isinstance(tokens, TokenGrid):
            tokens = tokens.tokens
        tokens = torch.as_tensor(tokens, dtype=torch.long, device=self.sos.device)
        if tokens.dim() == 2:
            tokens = tokens[None]
        if tokens.dim() != 3 or tokens.shape[1] != self.config.n_codebooks:
            raise InputError(
                f"Expected tokens shaped (B, {self.config.n_codebooks}, T), got {tuple(tokens.shape)}"
            )
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.codebook_size):
            raise InputError(f"Token out of range [0, {self.config.codebook_size})")
        return tokens

    def embed_tokens(self, tokens: Union[TokenGrid, torch.Tensor, np.ndarray]) -> torch.Tensor:
        """Sum of the N codebook embeddings per frame: (B, N, T) -> (B, T, d)."""
        tokens = self._as_tokens(tokens)
        out = self.token_embeddings[0](tokens[:, 0])
        for n in range(1, self.config.n_codebooks):
            out = out + self.token_embeddings[n](tokens[:, n])
        return out

    def decoder_inputs(self, tokens: Union[TokenGrid, torch.Tensor, np.ndarray]) -> torch.Tensor:
        """Teacher-forcing inputs: SOS at position 0, then embeddings of tokens 0..T-2."""
        embedded = self.embed_tokens(tokens)
        sos = self.sos.expand(embedded.shape[0], 1, -1)
        return torch.cat([sos, embedded[:, :-1]], dim=1)

    def output_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Final norm and per-codebook heads: (B, T, d) -> (B, N, T, L)."""
        x = self.final_norm(x)
        return torch.stack([head(x) for head in self.heads], dim=1)

    def forward(self, music_embeddings: torch.Tensor, text: TextEmbedding,
                return_weights: bool = False) -> ForwardOutput:
        """Run the decoder over (B, T, d) inputs.

        Raises:
            InputError: On shape mismatch with the model or the text batch
        """
        if music_embeddings.dim() != 3 or music_embeddings.shape[-1] != self.config.d_model:
            raise InputError(f"Music embeddings must be (B, T, {self.config.d_model}), "
                             f"got {tuple(music_embeddings.shape)}")
        if text.states.shape[0] != music_embeddings.shape[0]:
            raise InputError("Text and music batch sizes differ")
        mask = causal_mask(music_embeddings.shape[1], music_embeddings.device)
        x = music_embeddings
        hidden = [x]
        weights = []
        for layer in self.layers:
            if return_weights:
                x, w = layer(x, text, mask, return_weights=True)
                weights.append(w)
            else:
                x = layer(x, text, mask)
            hidden.append(x)
        return ForwardOutput(self.output_logits(x), hidden, weights)

    def logits(self, tokens, text: TextEmbedding) -> torch.Tensor:
        """Teacher-forced logits for a (B, N, T) grid; position t predicts token t."""
        return self.forward(self.decoder_inputs(tokens), text).logits

    @torch.no_grad()
    def generate(self, text: TextEmbedding, length: int, temperature: float = 0.0,
                 top_k: int = 0, seed: int = 0) -> TokenGrid:
        """Autoregressively sample a grid of ``length`` frames.

        Raises:
            InputError: If ``length`` < 1
        """
        if length < 1:
            raise InputError(f"Generation length must be >= 1, got {length}")
        generator = torch.Generator().manual_seed(seed)
        tokens = torch.zeros((1, self.config.n_codebooks, length), dtype=torch.long, device=self.sos.device)
        for t in range(length):
            step_logits = self.logits(tokens, text)[0, :, t, :]
            tokens[0, :, t] = sample_tokens(step_logits.cpu(), temperature, top_k, generator).to(tokens.device)
        return TokenGrid(tokens[0].cpu().numpy(), self.config.frame_rate, self.config.codebook_size)
