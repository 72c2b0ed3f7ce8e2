"""Word-level vocabulary with reserved control tokens and a simple tokenizer."""

from __future__ import annotations

import re

BOS = "<bos>"
EOS = "<eos>"
IMAGE = "<image>"

RESERVED = (BOS, EOS, IMAGE)

# multi-char marks first so "..." and "--" win over "." and "-"
_TOKEN_RE = re.compile(r"\.\.\.|--|[.,:;!?\-]|<[a-z]+>|[a-z0-9']+")


def tokenize_text(text: str) -> list[str]:
    """Lowercased word/punctuation tokens, independent of any vocabulary."""
    return _TOKEN_RE.findall(text.lower())


class UnknownTokenError(KeyError):
    pass


class Vocabulary:
    """Dense bidirectional token-string <-> id map. Ids are list order."""

    def __init__(self, words: list[str]):
        tokens = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate words in vocabulary")
        self._id_to_str = tokens
        self._str_to_id = {w: i for i, w in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._id_to_str)

    def __contains__(self, word: str) -> bool:
        return word in self._str_to_id

    @property
    def bos_id(self) -> int:
        return self._str_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self._str_to_id[EOS]

    @property
    def image_id(self) -> int:
        return self._str_to_id[IMAGE]

    @property
    def words(self) -> list[str]:
        return list(self._id_to_str)

    def to_id(self, word: str) -> int:
        try:
            return self._str_to_id[word]
        except KeyError:
            raise UnknownTokenError(f"not in vocabulary: {word!r}") from None

    def to_string(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_str):
            raise UnknownTokenError(f"token id out of range: {token_id}")
        return self._id_to_str[token_id]

    def encode(self, text: str) -> list[int]:
        """Lowercases, splits words and punctuation marks, maps to ids."""
        return [self.to_id(tok) for tok in _TOKEN_RE.findall(text.lower())]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.to_string(i) for i in ids)
