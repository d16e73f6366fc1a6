"""Cross-tokenizer alignment: MinED vocabulary mapping, DP sequence matching
and projection of sparse logits from one vocabulary onto another."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .sparse import SparseLogits
from .tokenizers import TokenizerSpec, Vocabulary

EXACT = "one_to_one_exact"
MANY_TO_ONE = "many_to_one"
ONE_TO_MANY = "one_to_many"
UNMATCHED = "unmatched"
FLAGS = (EXACT, MANY_TO_ONE, ONE_TO_MANY, UNMATCHED)

MAX_SPAN = 4
EXACT_SCORE = 2
RELATED_SCORE = 1

TABLE_FORMAT = "fedmkt-vocab-map/1"
PATH_FORMAT = "fedmkt-alignment/1"


class AlignmentError(ValueError):
    pass


# -- edit distance ------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _encode(tokens: Sequence[str], pad: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(t) for t in tokens], dtype=np.int64)
    width = max(1, int(lengths.max()) if len(tokens) else 1)
    codes = np.full((len(tokens), width), pad, dtype=np.int64)
    for i, t in enumerate(tokens):
        codes[i, : len(t)] = [ord(c) for c in t]
    return codes, lengths


def edit_distance_matrix(sources: Sequence[str], targets: Sequence[str], block: int = 4_000_000) -> np.ndarray:
    """All-pairs Levenshtein distances, shape ``(len(sources), len(targets))``.

    The DP runs over character positions while being vectorised over every
    (source, target) pair of a block of sources.
    """
    src_codes, src_len = _encode(sources, pad=-1)
    tgt_codes, tgt_len = _encode(targets, pad=-2)
    n_t, lt = tgt_codes.shape
    out = np.empty((len(sources), n_t), dtype=np.int64)
    chunk = max(1, block // max(1, n_t * (lt + 1)))
    for lo in range(0, len(sources), chunk):
        hi = min(lo + chunk, len(sources))
        out[lo:hi] = _distance_block(src_codes[lo:hi], src_len[lo:hi], tgt_codes, tgt_len)
    return out


def _distance_block(src_codes, src_len, tgt_codes, tgt_len) -> np.ndarray:
    s, ls = src_codes.shape
    t, lt = tgt_codes.shape
    out = np.empty((s, t), dtype=np.int64)
    prev = np.broadcast_to(np.arange(lt + 1, dtype=np.int64), (s, t, lt + 1)).copy()
    zero = src_len == 0
    out[zero] = tgt_len
    col = tgt_len[None, :, None]
    for i in range(1, int(src_len.max(initial=0)) + 1):
        cur = np.empty_like(prev)
        cur[:, :, 0] = i
        neq = tgt_codes[None, :, :] != src_codes[:, i - 1][:, None, None]
        best = np.minimum(prev[:, :, :-1] + neq, prev[:, :, 1:] + 1)
        for j in range(1, lt + 1):
            np.minimum(best[:, :, j - 1], cur[:, :, j - 1] + 1, out=cur[:, :, j])
        prev = cur
        done = src_len == i
        if done.any():
            out[done] = np.take_along_axis(cur[done], np.broadcast_to(col, (int(done.sum()), t, 1)), axis=2)[..., 0]
    return out


# -- vocabulary mapping table ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class VocabMappingTable:
    """``map[s]`` is the target id closest (MinED) to source token ``s``."""

    source: Vocabulary
    target: Vocabulary
    map: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.map, dtype=np.int64)
        if m.shape != (len(self.source),):
            raise AlignmentError("mapping table must have one entry per source token")
        if len(m) and (m.min() < 0 or m.max() >= len(self.target)):
            raise AlignmentError("mapping table points outside the target vocabulary")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)

    @property
    def source_vocab_id(self) -> str:
        return self.source.vocab_id

    @property
    def target_vocab_id(self) -> str:
        return self.target.vocab_id

    def map_token(self, token: str) -> Optional[str]:
        if token not in self.source:
            return None
        return self.target.entries[self.map[self.source.id_of(token)]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VocabMappingTable):
            return NotImplemented
        return (
            self.source == other.source
            and self.target == other.target
            and np.array_equal(self.map, other.map)
        )

    def to_text(self) -> str:
        doc = {
            "format": TABLE_FORMAT,
            "source_vocab_id": self.source_vocab_id,
            "target_vocab_id": self.target_vocab_id,
            "map": self.map.tolist(),
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_text(cls, text: str, source: Vocabulary, target: Vocabulary) -> "VocabMappingTable":
        doc = json.loads(text)
        if doc.get("format") != TABLE_FORMAT:
            raise AlignmentError("not a vocabulary mapping table")
        if doc["source_vocab_id"] != source.vocab_id or doc["target_vocab_id"] != target.vocab_id:
            raise AlignmentError("mapping table was built for different vocabularies")
        return cls(source, target, np.array(doc["map"], dtype=np.int64))


_table_cache: dict[tuple[str, str], VocabMappingTable] = {}
_table_lock = threading.RLock()


def build_mapping_table(source: Vocabulary, target: Vocabulary, use_cache: bool = True) -> VocabMappingTable:
    """For every source token pick the target token at minimum edit distance;
    ties go to the lexicographically smallest target string."""
    if not len(source) or not len(target):
        raise AlignmentError("vocabularies must be non-empty")
    key = (source.vocab_id, target.vocab_id)
    if use_cache:
        with _table_lock:
            hit = _table_cache.get(key)
        if hit is not None and hit.source == source and hit.target == target:
            return hit
    dist = edit_distance_matrix(source.entries, target.entries)
    lex_rank = np.empty(len(target), dtype=np.int64)
    lex_rank[np.argsort(np.array(target.entries, dtype=object), kind="stable")] = np.arange(len(target))
    key_matrix = dist * len(target) + lex_rank[None, :]
    table = VocabMappingTable(source, target, np.argmin(key_matrix, axis=1))
    if use_cache:
        with _table_lock:
            _table_cache[key] = table
    return table


# -- sequence alignment -----------------------------------------------------------


@dataclass(frozen=True)
class AlignedPair:
    """Half-open spans ``[start, end)`` over the source and target sequences."""

    src_start: int
    src_end: int
    tgt_start: int
    tgt_end: int
    flag: str

    @property
    def src_len(self) -> int:
        return self.src_end - self.src_start

    @property
    def tgt_len(self) -> int:
        return self.tgt_end - self.tgt_start


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple[AlignedPair, ...]

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(FLAGS, 0)
        for p in self.pairs:
            out[p.flag] += 1
        return out

    @property
    def score(self) -> int:
        return sum(_FLAG_SCORE[p.flag] for p in self.pairs)

    def to_text(self) -> str:
        doc = {
            "format": PATH_FORMAT,
            "pairs": [[p.src_start, p.src_end, p.tgt_start, p.tgt_end, p.flag] for p in self.pairs],
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AlignmentPath":
        doc = json.loads(text)
        if doc.get("format") != PATH_FORMAT:
            raise AlignmentError("not an alignment path")
        return cls(tuple(AlignedPair(int(a), int(b), int(c), int(d), str(f)) for a, b, c, d, f in doc["pairs"]))


_FLAG_SCORE = {EXACT: EXACT_SCORE, MANY_TO_ONE: RELATED_SCORE, ONE_TO_MANY: RELATED_SCORE, UNMATCHED: 0}


def _steps_into(src, tgt, i, j, mapper):
    """Transitions ``(a, b, score, flag)`` that end at DP state ``(i, j)``."""
    if i >= 1 and j >= 1:
        if src[i - 1] == tgt[j - 1]:
            yield 1, 1, EXACT_SCORE, EXACT
        else:
            yield 1, 1, 0, UNMATCHED
        t = tgt[j - 1]
        for a in range(2, min(MAX_SPAN, i) + 1):
            span = src[i - a : i]
            if "".join(span) == t or mapper(span[0]) == t:
                yield a, 1, RELATED_SCORE, MANY_TO_ONE
        s = src[i - 1]
        for b in range(2, min(MAX_SPAN, j) + 1):
            if s == "".join(tgt[j - b : j]):
                yield 1, b, RELATED_SCORE, ONE_TO_MANY
    if i >= 1:
        yield 1, 0, 0, UNMATCHED
    if j >= 1:
        yield 0, 1, 0, UNMATCHED


def align_sequences(
    source_tokens: Sequence[str],
    target_tokens: Sequence[str],
    table: Optional[VocabMappingTable] = None,
    mapper: Optional[Callable[[str], Optional[str]]] = None,
) -> AlignmentPath:
    """Monotone alignment of two tokenizations of the same text.

    Maximises the total pair score (exact 1-1 match: 2, related many-to-one
    or one-to-many span: 1, unmatched: 0). Among equal-score paths the one
    whose last pair has the smaller combined span length wins, then the one
    whose last pair starts at the earlier source index, recursively.
    """
    if not source_tokens or not target_tokens:
        raise AlignmentError("cannot align empty sequences")
    if mapper is None:
        mapper = table.map_token if table is not None else (lambda s: None)
    src, tgt = list(source_tokens), list(target_tokens)
    n, m = len(src), len(tgt)
    neg = -1
    score = [[neg] * (m + 1) for _ in range(n + 1)]
    back: list[list[Optional[tuple]]] = [[None] * (m + 1) for _ in range(n + 1)]
    score[0][0] = 0
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 and j == 0:
                continue
            best = None
            for a, b, sc, flag in _steps_into(src, tgt, i, j, mapper):
                total = score[i - a][j - b] + sc
                key = (-total, a + b, i - a)
                if best is None or key < best[0]:
                    best = (key, a, b, flag)
            score[i][j] = -best[0][0]
            back[i][j] = best[1:]
    pairs = []
    i, j = n, m
    while i or j:
        a, b, flag = back[i][j]
        pairs.append(AlignedPair(i - a, i, j - b, j, flag))
        i, j = i - a, j - b
    pairs.reverse()
    return AlignmentPath(tuple(pairs))


def check_path(path: AlignmentPath, n_source: int, n_target: int) -> None:
    """Assert monotone, gap-free coverage of both sequences."""
    si = ti = 0
    for p in path.pairs:
        if p.src_start != si or p.tgt_start != ti:
            raise AlignmentError(f"pair {p} breaks monotone coverage")
        if p.src_len + p.tgt_len == 0:
            raise AlignmentError("empty pair")
        if p.flag == EXACT and (p.src_len, p.tgt_len) != (1, 1):
            raise AlignmentError("exact pairs must be 1-to-1")
        si, ti = p.src_end, p.tgt_end
    if (si, ti) != (n_source, n_target):
        raise AlignmentError("path does not cover both sequences")


# -- logit projection ------------------------------------------------------------


def carriers(path: AlignmentPath, target_positions: int) -> np.ndarray:
    """Source carrier index for every target position, ``-1`` where none.

    Exact pairs carry their single source token; many-to-one pairs carry the
    first source token of the span. One-to-many and unmatched pairs carry
    nothing.
    """
    out = np.full(target_positions, -1, dtype=np.int64)
    for p in path.pairs:
        if p.flag in (EXACT, MANY_TO_ONE) and p.tgt_start < target_positions:
            out[p.tgt_start] = p.src_start
    return out


def project_logits(
    source: SparseLogits,
    path: AlignmentPath,
    table: VocabMappingTable,
    target_positions: int,
    target_realized: Sequence[int],
    carrier_index: Optional[np.ndarray] = None,
) -> SparseLogits:
    """Map per-position source top-K logits onto the target vocabulary.

    Positions with a carrier receive the carrier's entries mapped through the
    table, keeping only the first (highest-logit) entry for each target id.
    Other positions get a single one-hot entry on their realized next token,
    valued one above the largest source logit of the sample.
    """
    realized = np.asarray(target_realized, dtype=np.int64)
    if len(realized) != target_positions:
        raise AlignmentError("need one realized token per target position")
    car = carriers(path, target_positions) if carrier_index is None else carrier_index
    if np.any(car >= source.n_positions):
        raise AlignmentError("carrier position outside the source logits")
    onehot_val = float(source.values.max()) + 1.0 if source.n_entries else 1.0

    has = np.flatnonzero(car >= 0)
    src_pos = car[has]
    lens = source.counts()[src_pos]
    row = np.repeat(np.arange(len(has)), lens)
    starts = np.repeat(source.offsets[src_pos] - (np.cumsum(lens) - lens), lens)
    gidx = starts + np.arange(int(lens.sum()))
    mapped = table.map[source.token_ids[gidx]]
    vals = source.values[gidx]
    # first-write-wins: keep the earliest entry for each (row, target id)
    _, first = np.unique(row * len(table.target) + mapped, return_index=True)
    keep = np.sort(first)
    pos_c, ids_c, vals_c = has[row[keep]], mapped[keep], vals[keep]

    empty = np.ones(target_positions, dtype=bool)
    empty[pos_c] = False
    pos_o = np.flatnonzero(empty)
    ids_o = realized[pos_o]
    vals_o = np.full(len(pos_o), onehot_val, dtype=np.float32)

    pos_all = np.concatenate([pos_c, pos_o])
    order = np.argsort(pos_all, kind="stable")
    counts = np.bincount(pos_all, minlength=target_positions)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return SparseLogits(
        offsets,
        np.concatenate([ids_c, ids_o])[order],
        np.concatenate([vals_c, vals_o])[order],
        realized,
    )


class TokenAligner:
    """Cached source->target alignment for one ordered tokenizer pair."""

    def __init__(self, source: TokenizerSpec, target: TokenizerSpec):
        self.source = source
        self.target = target
        self.table = build_mapping_table(source.vocab, target.vocab)
        self._cache: dict[str, tuple] = {}
        self._lock = threading.Lock()

    def align_text(self, text: str):
        """Returns ``(source_ids, target_ids, path, carrier_index)``."""
        with self._lock:
            hit = self._cache.get(text)
        if hit is not None:
            return hit
        sid = self.source.tokenize(text)
        tid = self.target.tokenize(text)
        path = align_sequences(self.source.surfaces(sid), self.target.surfaces(tid), self.table)
        car = carriers(path, len(tid))
        car.setflags(write=False)
        hit = (sid, tid, path, car)
        with self._lock:
            self._cache[text] = hit
        return hit

    def project(self, logits: SparseLogits, text: str) -> SparseLogits:
        _, tid, path, car = self.align_text(text)
        realized = tid[1:] + [self.target.vocab.eos_id]
        return project_logits(logits, path, self.table, len(tid), realized, carrier_index=car)


_aligner_cache: dict[tuple[str, str, str, str], TokenAligner] = {}


def get_aligner(source: TokenizerSpec, target: TokenizerSpec) -> TokenAligner:
    key = (source.kind, source.vocab.vocab_id, target.kind, target.vocab.vocab_id)
    with _table_lock:
        al = _aligner_cache.get(key)
        if al is None or al.source != source or al.target != target:
            al = TokenAligner(source, target)
            _aligner_cache[key] = al
    return al
