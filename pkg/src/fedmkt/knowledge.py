"""Knowledge sets, DualMinCE selection, and the cross-party byte format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .align import get_aligner
from .data_eval import Sample, encode
from .sparse import SparseLogits
from .tokenizers import TokenizerSpec
from .toy_lm import LanguageModel, knowledge_record, log_softmax


class KnowledgeError(ValueError):
    pass


class SampleMismatchError(KnowledgeError):
    """Inputs to a selection cover different public samples."""


@dataclass(frozen=True)
class KnowledgeRecord:
    sample_id: int
    loss: float  # always a float32-representable value
    logits: SparseLogits

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeRecord):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and np.float32(self.loss).tobytes() == np.float32(other.loss).tobytes()
            and self.logits == other.logits
        )


@dataclass(frozen=True)
class KnowledgeSet:
    origin: int
    round: int
    vocab_id: str
    k_top: int
    records: tuple[KnowledgeRecord, ...]

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise KnowledgeError("sample ids must be strictly increasing")
        for r in self.records:
            if not np.isfinite(r.loss) or r.loss < 0:
                raise KnowledgeError(f"invalid loss {r.loss} for sample {r.sample_id}")
        if len(self.vocab_id.encode("ascii")) != 16:
            raise KnowledgeError("vocab id must be 16 ASCII characters")

    @property
    def sample_ids(self) -> list[int]:
        return [r.sample_id for r in self.records]

    def losses(self) -> dict[int, float]:
        return {r.sample_id: r.loss for r in self.records}


@dataclass(frozen=True)
class SelectedRecord:
    sample_id: int
    logits: SparseLogits
    source: int


@dataclass(frozen=True)
class SelectiveKnowledgeSet:
    records: tuple[SelectedRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def by_sample(self) -> dict[int, SelectedRecord]:
        return {r.sample_id: r for r in self.records}


def build_knowledge_set(
    model: LanguageModel, public: Sequence[Sample], k_top: int, origin: int, round: int
) -> KnowledgeSet:
    """One loss/top-K record per public sample, in sample-id order."""
    if k_top < 1:
        raise KnowledgeError("k_top must be positive")
    ordered = sorted(public, key=lambda s: s.sample_id)
    pairs = [encode(model.tokenizer, s.text) for s in ordered]
    if not pairs:
        return KnowledgeSet(origin, round, model.tokenizer.vocab.vocab_id, k_top, ())
    # one batched forward; positions are independent
    lens = [len(x) for x, _ in pairs]
    for n in lens:
        if n > model.context_window:
            raise KnowledgeError("public sample exceeds the model context window")
    z = model.forward_positions(np.concatenate([x for x, _ in pairs]))
    logp = log_softmax(z)
    records = []
    off = 0
    for s, (x, y), n in zip(ordered, pairs, lens):
        zi = z[off : off + n]
        loss = -logp[np.arange(off, off + n), np.asarray(y)].mean()
        records.append(KnowledgeRecord(s.sample_id, float(np.float32(loss)), SparseLogits.top_k(zi, k_top, y)))
        off += n
    return KnowledgeSet(origin, round, model.tokenizer.vocab.vocab_id, k_top, tuple(records))


def align_knowledge_set(
    ks: KnowledgeSet, source: TokenizerSpec, target: TokenizerSpec, public: Sequence[Sample]
) -> KnowledgeSet:
    """Project every record's logits into ``target``'s vocabulary.

    Losses travel unchanged; only logits are aligned.
    """
    if ks.vocab_id != source.vocab.vocab_id:
        raise KnowledgeError("knowledge set was not produced with the given source tokenizer")
    if source == target:
        return ks
    texts = {s.sample_id: s.text for s in public}
    aligner = get_aligner(source, target)
    records = []
    for r in ks.records:
        try:
            text = texts[r.sample_id]
        except KeyError:
            raise SampleMismatchError(f"sample {r.sample_id} is not in the public set") from None
        records.append(KnowledgeRecord(r.sample_id, r.loss, aligner.project(r.logits, text)))
    return KnowledgeSet(ks.origin, ks.round, target.vocab.vocab_id, ks.k_top, tuple(records))


def dual_min_ce(local_losses: Mapping[int, float], candidates: Sequence[KnowledgeSet]) -> SelectiveKnowledgeSet:
    """Admit, per sample, the lowest-loss candidate's logits if that loss is
    strictly below the recipient's own loss. Equal candidate losses resolve
    to the lowest origin id, so candidate order is irrelevant."""
    if not candidates:
        raise KnowledgeError("need at least one candidate knowledge set")
    ids = sorted(local_losses)
    for c in candidates:
        if c.sample_ids != ids:
            raise SampleMismatchError(f"candidate from participant {c.origin} covers different samples")
    ordered = sorted(candidates, key=lambda c: c.origin)
    if len({c.origin for c in ordered}) != len(ordered):
        raise KnowledgeError("duplicate candidate origins")
    losses = np.array([[r.loss for r in c.records] for c in ordered], dtype=np.float64)
    best = np.argmin(losses, axis=0)  # first minimum -> lowest origin
    local = np.array([local_losses[i] for i in ids], dtype=np.float64)
    admitted = losses[best, np.arange(len(ids))] < local
    records = tuple(
        SelectedRecord(ids[i], ordered[best[i]].records[i].logits, ordered[best[i]].origin)
        for i in np.flatnonzero(admitted)
    )
    return SelectiveKnowledgeSet(records)


# -- wire format -----------------------------------------------------------------
#
# header:  magic "FMKS" | version u16 | origin u32 | round u32 | N u32 | k_top u32 | vocab_id 16B
# record:  sample_id u64 | loss f32 | positions u32
#          per position: realized u32 | entries u16 | entries * (token_id u32, logit f32)
# all little endian

MAGIC = b"FMKS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII16s")
_RECORD = struct.Struct("<QfI")
_POSITION = struct.Struct("<IH")
_ENTRY = np.dtype([("id", "<u4"), ("logit", "<f4")])


class FormatError(KnowledgeError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def serialize_knowledge(ks: KnowledgeSet) -> bytes:
    out = [_HEADER.pack(MAGIC, VERSION, ks.origin, ks.round, len(ks.records), ks.k_top, ks.vocab_id.encode("ascii"))]
    for r in ks.records:
        lg = r.logits
        out.append(_RECORD.pack(r.sample_id, r.loss, lg.n_positions))
        counts = lg.counts()
        if counts.size and counts.max() > 0xFFFF:
            raise FormatError("too many entries at one position")
        entries = np.empty(lg.n_entries, dtype=_ENTRY)
        entries["id"] = lg.token_ids
        entries["logit"] = lg.values
        raw = entries.tobytes()
        for p in range(lg.n_positions):
            lo, hi = lg.offsets[p], lg.offsets[p + 1]
            out.append(_POSITION.pack(int(lg.realized[p]), int(hi - lo)))
            out.append(raw[lo * 8 : hi * 8])
    return b"".join(out)


def deserialize_knowledge(data: bytes) -> KnowledgeSet:
    view = memoryview(data)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError("not a knowledge-set stream")
    if len(view) < _HEADER.size:
        raise TruncatedError("stream ends inside the header")
    _, version, origin, rnd, n, k_top, vid = _HEADER.unpack_from(view, 0)
    if version != VERSION:
        raise VersionError(f"unsupported knowledge format version {version}")
    off = _HEADER.size
    records = []
    for _ in range(n):
        if len(view) < off + _RECORD.size:
            raise TruncatedError("stream ends inside a record header")
        sid, loss, n_pos = _RECORD.unpack_from(view, off)
        off += _RECORD.size
        realized = np.empty(n_pos, dtype=np.int64)
        counts = np.empty(n_pos, dtype=np.int64)
        chunks = []
        for p in range(n_pos):
            if len(view) < off + _POSITION.size:
                raise TruncatedError("stream ends inside a position header")
            realized[p], counts[p] = _POSITION.unpack_from(view, off)
            off += _POSITION.size
            nbytes = int(counts[p]) * _ENTRY.itemsize
            if len(view) < off + nbytes:
                raise TruncatedError("stream ends inside logit entries")
            chunks.append(view[off : off + nbytes])
            off += nbytes
        entries = np.frombuffer(b"".join(chunks), dtype=_ENTRY)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        logits = SparseLogits(offsets, entries["id"].astype(np.int32), entries["logit"].copy(), realized)
        records.append(KnowledgeRecord(int(sid), float(loss), logits))
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes after the last record")
    try:
        return KnowledgeSet(origin, rnd, vid.decode("ascii"), k_top, tuple(records))
    except (KnowledgeError, UnicodeDecodeError) as exc:
        raise FormatError(f"stream decodes to an invalid knowledge set: {exc}") from exc


@dataclass(frozen=True)
class PayloadSize:
    n_bytes: int
    n_floats: int


def wire_size(n_records: int, n_positions: int, n_floats: int) -> PayloadSize:
    """Size of a set with the given record, position and entry totals."""
    n_bytes = (
        _HEADER.size
        + n_records * _RECORD.size
        + n_positions * _POSITION.size
        + n_floats * _ENTRY.itemsize
    )
    return PayloadSize(n_bytes, n_floats)


def payload_size(ks: KnowledgeSet) -> PayloadSize:
    """Floats are the transmitted logit values; bytes follow the wire format."""
    floats = sum(r.logits.n_entries for r in ks.records)
    positions = sum(r.logits.n_positions for r in ks.records)
    return wire_size(len(ks.records), positions, floats)


def expected_payload(n_samples: int, seq_len: int, k_top: int) -> PayloadSize:
    """Size of a set with fixed-length sequences and full top-K per position."""
    return wire_size(n_samples, n_samples * seq_len, n_samples * seq_len * k_top)
