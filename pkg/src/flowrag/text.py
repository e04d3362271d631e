"""Shared tokenization and vocabulary utilities.

One tokenizer serves the retriever, the generator, TF-IDF scoring and the
BLEU metric so that every component sees the same token stream.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

# Special tokens for the generator LM input. Content tokens can never collide
# with these: the tokenizer splits "<" off as punctuation.
BEGIN = "<begin>"
SEP = "<sep>"
AGENT = "<agent>"
USER = "<user>"
END = "<end>"
UNK = "<unk>"
PAD = "<pad>"
SPECIAL_TOKENS = (PAD, UNK, BEGIN, SEP, AGENT, USER, END)


def tokenize(text: str) -> list[str]:
    """Lowercase word tokenizer; punctuation becomes separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass
class Vocab:
    """Frozen token <-> id mapping with the special-token inventory first."""

    tokens: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for tok in SPECIAL_TOKENS:
            if tok not in self._index:
                raise ValueError(f"vocabulary missing special token {tok!r}")

    @classmethod
    def build(cls, texts: list[str], min_count: int = 1, max_size: int | None = None) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count),
            key=lambda t: (-counts[t], t),
        )
        if max_size is not None:
            kept = kept[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(list(SPECIAL_TOKENS) + kept)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def begin_id(self) -> int:
        return self._index[BEGIN]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def agent_id(self) -> int:
        return self._index[AGENT]

    @property
    def user_id(self) -> int:
        return self._index[USER]

    @property
    def end_id(self) -> int:
        return self._index[END]

    def id_of(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.id_of(tok) for tok in tokenize(text)]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        return cls(list(data["tokens"]))
