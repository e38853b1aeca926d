"""Vocabulary, tokenization, and padded batching for spoken sentences.

Tokenization is deterministic whitespace splitting after lowercasing, with
punctuation separated into its own tokens. Reserved ids are fixed:
PAD=0, BOS=1, EOS=2, UNK=3. Decoder targets carry exactly one leading BOS
and one trailing EOS.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(sentence: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation off words."""
    return _TOKEN_RE.findall(sentence.lower())


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        lines = [f"# reserved {i} {tok}" for i, tok in enumerate(RESERVED)]
        lines += self.id_to_token[len(RESERVED):]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("#") or not line.strip():
                continue
            tokens.append(line.strip())
        return cls(tokens)


def build_vocab(corpus: list[str], min_freq: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary (ties broken lexicographically).

    Tokens occurring fewer than ``min_freq`` times are dropped and will
    encode to UNK. Deterministic for a given corpus.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for sentence in corpus:
        for token in tokenize(sentence):
            counts[token] = counts.get(token, 0) + 1
    kept = [tok for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


def encode(sentence: str, vocab: Vocabulary) -> list[int]:
    """Sentence -> [BOS, ids..., EOS]; out-of-vocabulary tokens become UNK."""
    return [BOS] + [vocab.id_of(tok) for tok in tokenize(sentence)] + [EOS]


def decode(ids, vocab: Vocabulary) -> str:
    """Ids -> sentence, dropping PAD/BOS and stopping at EOS."""
    words = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id == EOS:
            break
        if token_id in (PAD, BOS):
            continue
        words.append(vocab.token_of(token_id))
    return " ".join(words)


def pad_batch(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; mask True exactly on real tokens."""
    if not sequences:
        raise ValueError("pad_batch needs at least one sequence")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask
