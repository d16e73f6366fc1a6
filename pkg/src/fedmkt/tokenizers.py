"""Deterministic toy tokenizers with deliberately different vocabularies.

Three kinds are supported:

* ``word``  - whitespace split, one id per word, joined back with single spaces.
* ``char``  - one id per character (spaces included), joined by concatenation.
* ``merge`` - whitespace split, then each word is split into characters and the
  ordered merge rules are applied greedily (lowest rank first), BPE style.
  Detokenizing concatenates surfaces, so word boundaries are not recoverable.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

UNK = "<unk>"
EOS = "</s>"

WORD = "word"
CHAR = "char"
MERGE = "merge"
KINDS = (WORD, CHAR, MERGE)

FORMAT_TAG = "fedmkt-tokenizer/1"


class TokenizerError(ValueError):
    pass


class CorruptSequenceError(TokenizerError):
    """Raised when an id sequence contains ids outside the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense id <-> token map. The id of a token is its index in ``entries``."""

    entries: tuple[str, ...]
    unk_id: int = 0
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if any(not isinstance(t, str) or t == "" for t in entries):
            raise TokenizerError("vocabulary tokens must be non-empty strings")
        index = {tok: i for i, tok in enumerate(entries)}
        if len(index) != len(entries):
            raise TokenizerError("vocabulary tokens must be unique")
        if not 0 <= self.unk_id < len(entries):
            raise TokenizerError(f"unk_id {self.unk_id} out of range")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.entries[idx]

    @property
    def eos_id(self) -> int:
        try:
            return self._index[EOS]
        except KeyError:
            raise TokenizerError("vocabulary has no end-of-sequence token") from None

    @property
    def vocab_id(self) -> str:
        """Stable 16-hex-digit content hash, used as a cache and wire key."""
        h = hashlib.sha256("\x00".join(self.entries).encode("utf-8"))
        h.update(str(self.unk_id).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TokenizerSpec:
    kind: str
    vocab: Vocabulary
    merge_rules: tuple[tuple[str, str], ...] = ()
    lowercase: bool = True
    _ranks: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TokenizerError(f"unknown tokenizer kind {self.kind!r}")
        rules = tuple((str(a), str(b)) for a, b in self.merge_rules)
        if rules and self.kind != MERGE:
            raise TokenizerError("merge rules are only valid for the merge kind")
        for a, b in rules:
            for tok in (a, b, a + b):
                if tok not in self.vocab:
                    raise TokenizerError(f"merge rule ({a!r}, {b!r}) references {tok!r} not in vocab")
        object.__setattr__(self, "merge_rules", rules)
        object.__setattr__(self, "_ranks", {pair: i for i, pair in enumerate(rules)})

    def normalize(self, text: str) -> str:
        return text.lower() if self.lowercase else text

    def pieces(self, text: str) -> list[str]:
        """Surface segmentation of ``text`` (before the id lookup)."""
        text = self.normalize(text)
        if self.kind == WORD:
            return text.split()
        if self.kind == CHAR:
            return list(text)
        out: list[str] = []
        for word in text.split():
            out.extend(self._merge_word(word))
        return out

    def _merge_word(self, word: str) -> list[str]:
        parts = list(word)
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            pair = self.merge_rules[best[0]]
            merged: list[str] = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def tokenize(self, text: str) -> list[int]:
        if not text:
            raise TokenizerError("cannot tokenize empty text")
        return [self.vocab.id_of(p) for p in self.pieces(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        n = len(self.vocab)
        toks = []
        for i in ids:
            if not 0 <= int(i) < n:
                raise CorruptSequenceError(f"token id {i} outside vocabulary of size {n}")
            toks.append(self.vocab.entries[int(i)])
        sep = " " if self.kind == WORD else ""
        return sep.join(toks)

    def surfaces(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab.entries[int(i)] for i in ids]

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        doc = {
            "format": FORMAT_TAG,
            "kind": self.kind,
            "lowercase": self.lowercase,
            "unk_id": self.vocab.unk_id,
            "vocab": list(self.vocab.entries),
            "merges": [list(p) for p in self.merge_rules],
        }
        return json.dumps(doc, ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TokenizerSpec":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_TAG:
            raise TokenizerError(f"not a tokenizer spec (format={doc.get('format')!r})")
        vocab = Vocabulary(tuple(doc["vocab"]), unk_id=int(doc["unk_id"]))
        return cls(
            kind=doc["kind"],
            vocab=vocab,
            merge_rules=tuple(tuple(p) for p in doc["merges"]),
            lowercase=bool(doc["lowercase"]),
        )


def tokenize(spec: TokenizerSpec, text: str) -> list[int]:
    return spec.tokenize(text)


def detokenize(spec: TokenizerSpec, ids: Sequence[int]) -> str:
    return spec.detokenize(ids)


# -- builders ---------------------------------------------------------------


def _specials() -> list[str]:
    return [UNK, EOS]


def build_word_tokenizer(texts: Iterable[str], lowercase: bool = True) -> TokenizerSpec:
    words: dict[str, None] = {}
    for t in texts:
        for w in (t.lower() if lowercase else t).split():
            words.setdefault(w, None)
    vocab = Vocabulary(tuple(_specials() + sorted(words)), unk_id=0)
    return TokenizerSpec(WORD, vocab, lowercase=lowercase)


def build_char_tokenizer(texts: Iterable[str], lowercase: bool = True) -> TokenizerSpec:
    chars: set[str] = set()
    for t in texts:
        chars.update(t.lower() if lowercase else t)
    vocab = Vocabulary(tuple(_specials() + sorted(chars)), unk_id=0)
    return TokenizerSpec(CHAR, vocab, lowercase=lowercase)


def learn_merges(word_counts: dict[str, int], num_merges: int) -> list[tuple[str, str]]:
    """Classic BPE merge learning on a word frequency table.

    Ties between equally frequent pairs go to the lexicographically smallest
    pair so the result does not depend on dict ordering.
    """
    words = {tuple(w): c for w, c in word_counts.items() if w}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for parts, c in words.items():
            for i in range(len(parts) - 1):
                pairs[(parts[i], parts[i + 1])] += c
        if not pairs:
            break
        top = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        new_words: dict[tuple[str, ...], int] = {}
        for parts, c in words.items():
            out = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    out.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            key = tuple(out)
            new_words[key] = new_words.get(key, 0) + c
        words = new_words
    return merges


def merge_tokenizer_from_rules(
    alphabet: Iterable[str], merges: Sequence[tuple[str, str]], lowercase: bool = True
) -> TokenizerSpec:
    entries = _specials()
    seen = set(entries)
    for ch in sorted(set(alphabet)):
        if ch not in seen and not ch.isspace():
            entries.append(ch)
            seen.add(ch)
    for a, b in merges:
        if a + b not in seen:
            entries.append(a + b)
            seen.add(a + b)
    return TokenizerSpec(MERGE, Vocabulary(tuple(entries)), tuple(merges), lowercase=lowercase)


def build_merge_tokenizer(
    texts: Iterable[str], num_merges: int, lowercase: bool = True
) -> TokenizerSpec:
    counts: Counter = Counter()
    for t in texts:
        counts.update((t.lower() if lowercase else t).split())
    alphabet = {ch for w in counts for ch in w}
    merges = learn_merges(dict(counts), num_merges)
    return merge_tokenizer_from_rules(alphabet, merges, lowercase=lowercase)


def build_tokenizer(kind: str, texts: Sequence[str], num_merges: int = 0) -> TokenizerSpec:
    if kind == WORD:
        return build_word_tokenizer(texts)
    if kind == CHAR:
        return build_char_tokenizer(texts)
    if kind == MERGE:
        return build_merge_tokenizer(texts, num_merges)
    raise TokenizerError(f"unknown tokenizer kind {kind!r}")


DEMO_SENTENCE = "we utilize the dynamic programming approach to align tokens"


def demo_tokenizers(extra_texts: Iterable[str] = ()) -> tuple[TokenizerSpec, TokenizerSpec]:
    """(subword, word) tokenizer pair covering ``DEMO_SENTENCE``.

    The subword side is trained without the word 'utilize' (only its halves
    'util' and 'ize'), so it lacks a merge joining them.
    """
    texts = [DEMO_SENTENCE, *extra_texts]
    counts: Counter = Counter()
    for t in texts:
        counts.update(t.lower().split())
    train = {w: c for w, c in counts.items() if w != "utilize"}
    train["util"] = train.get("util", 0) + 1
    train["ize"] = train.get("ize", 0) + 1
    alphabet = {ch for w in counts for ch in w}
    merges = learn_merges(train, 10_000)
    subword = merge_tokenizer_from_rules(alphabet, merges)
    word = build_word_tokenizer(texts)
    return subword, word


def lm_pair(spec: TokenizerSpec, text: str) -> tuple[list[int], list[int]]:
    """Next-token training pair: every token is an input position and the
    last one is trained to predict the end-of-sequence token."""
    ids = spec.tokenize(text)
    return ids, ids[1:] + [spec.vocab.eos_id]
