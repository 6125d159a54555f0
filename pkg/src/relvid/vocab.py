"""Tiny closed vocabulary shared by the data generator and the model.

Token 0 is the null token used for classifier-free guidance and for
padding prompts to the model's text length.
"""

from __future__ import annotations

from .errors import VocabError

NULL = "<null>"
SHAPES = ("circle", "square", "triangle", "cross")
RELATIONS = ("approach", "separate", "orbit", "follow", "collide")
FILLER = ("a", "the", "with", "near")

VOCAB = (NULL,) + SHAPES + RELATIONS + FILLER
NULL_ID = 0

_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def encode(words) -> list[int]:
    """Map words (list or whitespace-separated string) to token ids."""
    if isinstance(words, str):
        words = words.split()
    ids = []
    for w in words:
        if w not in _WORD_TO_ID:
            raise VocabError(
                f"unknown word {w!r}; vocabulary: {', '.join(VOCAB)}"
            )
        ids.append(_WORD_TO_ID[w])
    return ids


def decode(ids) -> list[str]:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(VOCAB):
            raise VocabError(f"token id {i} outside vocabulary of {len(VOCAB)}")
        out.append(VOCAB[i])
    return out


def prompt_ids(shape1: str, relation: str, shape2: str) -> list[int]:
    """Token ids for the canonical '<shape1> <relation> <shape2>' prompt."""
    return encode([shape1, relation, shape2])


def pad(ids, length: int) -> list[int]:
    if len(ids) > length:
        raise VocabError(f"prompt of {len(ids)} tokens exceeds text length {length}")
    return list(ids) + [NULL_ID] * (length - len(ids))
