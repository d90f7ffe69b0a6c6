"""Report tokenization: a fixed-vocabulary whitespace/punctuation tokenizer.

Reports are lowercased, split on anything that is not a letter or digit,
mapped through the vocabulary (unknown words to UNK), prefixed with CLS at
position 0, and padded or tail-truncated to a fixed length.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import VocabError
from .formats import CLS_TOKEN, PAD_TOKEN, RESERVED_TOKENS, UNK_TOKEN

_WORD_RE = re.compile(r"[a-z0-9]+")

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2


class Vocabulary:
    """Token list where position is the id; ids 0-2 are PAD, CLS, UNK."""

    def __init__(self, tokens: list[str]):
        if len(tokens) < 3 or tuple(tokens[:3]) != RESERVED_TOKENS:
            raise VocabError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Build a vocabulary from plain words, prepending the reserved ids."""
        seen, ordered = set(), []
        for w in words:
            if w not in seen and w not in RESERVED_TOKENS:
                seen.add(w)
                ordered.append(w)
        return cls(list(RESERVED_TOKENS) + ordered)


@dataclass
class TokenSequence:
    """Fixed-length token ids with a validity mask; CLS sits at position 0."""

    ids: np.ndarray
    mask: np.ndarray
    cls_position: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.ndim != 1 or self.ids.shape != self.mask.shape or self.ids.size == 0:
            raise VocabError("ids and mask must be equal-length non-empty 1-D arrays")
        if not self.mask[self.cls_position]:
            raise VocabError("CLS position must be unmasked")
        if np.any(self.ids < 0):
            raise VocabError("token ids must be non-negative")
        if np.any(self.ids[~self.mask] != PAD_ID):
            raise VocabError("masked-out positions must carry the pad id")

    def __len__(self) -> int:
        return self.ids.size


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    """Tokenize a report to exactly max_len ids: [CLS, words..., PAD...].

    Texts longer than max_len - 1 words are truncated at the tail. Every id
    is validated against the vocabulary size.
    """
    if max_len < 1:
        raise VocabError(f"max_len must be >= 1, got {max_len}")
    words = split_words(text)[: max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    ids[0] = CLS_ID
    mask[0] = True
    for i, w in enumerate(words, start=1):
        ids[i] = vocab.id_of(w)
        mask[i] = True
    if np.any(ids >= len(vocab)):
        raise VocabError("token id exceeds vocabulary size")
    return TokenSequence(ids, mask)
