"""
Instruction tokenizer and the small bidirectional text encoder.

The encoder is trained together with the base decoder during pretraining on
stem descriptions and frozen afterwards.
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Sequence

import torch
import torch.nn as nn

from ..constants import TEXT_VOCAB
from ..errors import InputError

PAD_ID = 0
UNK_ID = 1
_WORD = re.compile(r"[a-z0-9]+")


class InstructionTokenizer:
    """Lowercase whitespace tokenizer over a fixed vocabulary; punctuation is dropped."""

    def __init__(self, vocab: Sequence[str] = TEXT_VOCAB, max_tokens: int = 16):
        self.vocab = tuple(vocab)
        self.max_tokens = max_tokens
        self._index: Dict[str, int] = {word: i for i, word in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def words(self, text: str) -> List[str]:
        return _WORD.findall(text.lower())

    def tokenize(self, text: str) -> List[int]:
        """Token ids for ``text``, truncated to ``max_tokens``.

        Raises:
            InputError: If the text is empty or has no word characters
        """
        if not text or not text.strip():
            raise InputError("Instruction text must be non-empty")
        words = self.words(text)
        if not words:
            raise InputError(f"Instruction has no words: {text!r}")
        return [self._index.get(w, UNK_ID) for w in words[:self.max_tokens]]


@dataclass
class TextEmbedding:
    """Encoded instructions: (B, S, d_text) states and a (B, S) mask, True at real tokens."""
    states: torch.Tensor
    mask: torch.Tensor

    @property
    def length(self) -> int:
        return int(self.states.shape[1])

    def to(self, dtype: torch.dtype) -> 'TextEmbedding':
        return TextEmbedding(self.states.to(dtype), self.mask)


class TextEncoder(nn.Module):
    """Token + learned position embedding followed by a pre-norm transformer encoder."""

    def __init__(self, vocab_size: int, d_text: int, n_layers: int, n_heads: int,
                 ffn_dim: int, max_tokens: int):
        super().__init__()
        self.max_tokens = max_tokens
        self.token_embedding = nn.Embedding(vocab_size, d_text)
        self.position_embedding = nn.Embedding(max_tokens, d_text)
        layer = nn.TransformerEncoderLayer(
            d_model=d_text, nhead=n_heads, dim_feedforward=ffn_dim, dropout=0.0,
            activation='gelu', batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers, norm=nn.LayerNorm(d_text),
                                             enable_nested_tensor=False)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Encode (B, S) token ids; ``mask`` is True at real tokens."""
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        return self.encoder(x, src_key_padding_mask=~mask)


def pad_token_ids(batch: Sequence[Sequence[int]]):
    """Right-pad id lists into (B, S) ids and mask tensors."""
    length = max(len(ids) for ids in batch)
    ids = torch.full((len(batch), length), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(batch), length), dtype=torch.bool)
    for row, seq in enumerate(batch):
        ids[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[row, :len(seq)] = True
    return ids, mask
