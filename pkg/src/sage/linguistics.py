"""Sink-token detection and key-concept extraction.

Sink tokens are punctuation marks and lightweight conjunctions that soak
up attention while carrying little meaning; emitting one closes a
descriptive segment. Concepts are pulled from that segment with a
deterministic lexicon+suffix POS tagger: maximal ADJ* NOUN+ chunks plus
standalone nouns and adjectives. Function words never survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .vocab import Vocabulary

NOUN = "NOUN"
ADJ = "ADJ"
DET = "DET"
PREP = "PREP"
CONJ = "CONJ"
VERB = "VERB"
AUX = "AUX"
PRON = "PRON"
NUM = "NUM"
OTHER = "OTHER"

TAGS = (NOUN, ADJ, DET, PREP, CONJ, VERB, AUX, PRON, NUM, OTHER)
CLOSED_CLASSES = (DET, PREP, CONJ, PRON, AUX)

DEFAULT_PUNCTUATION = (".", ",", ":", ";", "!", "?", "-", "--", "...")
DEFAULT_CONJUNCTIONS = ("and", "or", "but", "so", "yet")

# canonical tag table for the artifact's closed vocabulary
DEFAULT_WORD_TAGS: dict[str, str] = {}


def _tag_all(tag: str, words: str) -> None:
    for w in words.split():
        DEFAULT_WORD_TAGS[w] = tag


_tag_all(DET, "a an the this that these those")
_tag_all(PREP, "in on at of near with by under over behind beside above from to")
_tag_all(CONJ, " ".join(DEFAULT_CONJUNCTIONS))
_tag_all(PRON, "it its they their")
_tag_all(AUX, "is are was were be been has have had can will")
_tag_all(VERB, "sits rests stands floats appears shows contains describe lies")
_tag_all(NUM, "one two three four")
_tag_all(NOUN, "circle square triangle rectangle ring disc box ball dog cat car "
               "table chair frisbee scene image background center corner side "
               "edge detail pattern area region photo field sky grass wall floor")
_tag_all(ADJ, "red blue green yellow purple orange gray white black small large "
              "tiny huge bright dark wooden shiny sports dining colorful pale")
for _p in DEFAULT_PUNCTUATION:
    DEFAULT_WORD_TAGS[_p] = OTHER
_tag_all(OTHER, "<bos> <eos> <image> there here very please not also")

# (suffix, tag) rules tried in order on words missing from the lexicon
DEFAULT_SUFFIX_RULES: tuple[tuple[str, str], ...] = (
    ("ing", VERB),
    ("ed", VERB),
    ("ly", OTHER),
    ("ish", ADJ),
    ("ful", ADJ),
)
UNKNOWN_TAG = NOUN


class SinkLexicon:
    """The sink-token set: punctuation plus lightweight conjunctions."""

    def __init__(self, punctuation=DEFAULT_PUNCTUATION, conjunctions=DEFAULT_CONJUNCTIONS):
        self.punctuation = frozenset(punctuation)
        self.conjunctions = frozenset(conjunctions)

    def __contains__(self, token_string: str) -> bool:
        return token_string in self.punctuation or token_string in self.conjunctions

    @classmethod
    def from_json(cls, path: str | Path) -> "SinkLexicon":
        data = json.loads(Path(path).read_text())
        return cls(tuple(data["punctuation"]), tuple(data["conjunctions"]))


class PosLexicon:
    """Word -> tag map with suffix fallbacks; every word gets exactly one tag."""

    def __init__(self, word_tags: dict[str, str] | None = None,
                 suffix_rules=DEFAULT_SUFFIX_RULES):
        table = dict(DEFAULT_WORD_TAGS) if word_tags is None else dict(word_tags)
        for word, tag in table.items():
            if tag not in TAGS:
                raise ValueError(f"unknown tag {tag!r} for word {word!r}")
        self._table = table
        self._suffix_rules = tuple(suffix_rules)

    def tag(self, word: str) -> str:
        hit = self._table.get(word)
        if hit is not None:
            return hit
        for suffix, tag in self._suffix_rules:
            if word.endswith(suffix):
                return tag
        return UNKNOWN_TAG

    @classmethod
    def from_json(cls, path: str | Path) -> "PosLexicon":
        return cls(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SinkEvent:
    """A sink trigger: the decode step, the sink token, and the closed segment.

    ``segment`` is a half-open span of generated-token indices, exclusive
    of the sink itself; consecutive events partition the non-sink stream.
    """

    step: int
    token: int
    segment: tuple[int, int]


@dataclass(frozen=True)
class Concept:
    surface: str
    span: tuple[int, int]
    kind: str  # noun | adjective | noun_phrase


def is_sink(token: int, vocab: Vocabulary, lexicon: SinkLexicon) -> bool:
    return vocab.to_string(token) in lexicon


def extract_concepts(segment: list[int], vocab: Vocabulary, pos: PosLexicon,
                     offset: int = 0) -> list[Concept]:
    """Concepts of one segment, in surface order.

    Returns every maximal ADJ* NOUN+ chunk (as ``noun_phrase`` when it has
    2+ tokens, ``noun`` for a bare noun) plus standalone adjectives that
    no chunk absorbed. Duplicated surfaces keep their first span.
    ``offset`` shifts spans to stream-absolute token indices.
    """
    return extract_concepts_from_words([vocab.to_string(t) for t in segment], pos, offset)


def extract_concepts_from_words(words: list[str], pos: PosLexicon,
                                offset: int = 0) -> list[Concept]:
    tags = [pos.tag(w) for w in words]
    n = len(words)
    concepts: list[Concept] = []
    i = 0
    while i < n:
        if tags[i] not in (ADJ, NOUN):
            i += 1
            continue
        j = i
        while j < n and tags[j] == ADJ:
            j += 1
        k = j
        while k < n and tags[k] == NOUN:
            k += 1
        if k > j:
            # ADJ* NOUN+ chunk over [i, k)
            kind = "noun_phrase" if k - i > 1 else "noun"
            concepts.append(Concept(" ".join(words[i:k]), (offset + i, offset + k), kind))
            i = k
        else:
            # adjectives with no following noun stand alone
            for a in range(i, j):
                concepts.append(Concept(words[a], (offset + a, offset + a + 1), "adjective"))
            i = j
    seen: set[str] = set()
    unique = []
    for c in concepts:
        if c.surface not in seen:
            seen.add(c.surface)
            unique.append(c)
    return unique
