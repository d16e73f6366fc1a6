import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fedmkt.align import (
    EXACT,
    MANY_TO_ONE,
    ONE_TO_MANY,
    UNMATCHED,
    AlignedPair,
    AlignmentError,
    AlignmentPath,
    TokenAligner,
    VocabMappingTable,
    align_sequences,
    build_mapping_table,
    carriers,
    check_path,
    edit_distance,
    edit_distance_matrix,
    get_aligner,
    project_logits,
)
from fedmkt.cli import align_dump
from fedmkt.sparse import SparseLogits
from fedmkt.tokenizers import DEMO_SENTENCE, Vocabulary, build_char_tokenizer, build_word_tokenizer, demo_tokenizers

short = st.text(alphabet="abcd", max_size=8)


def test_edit_distance_examples():
    assert edit_distance("util", "utilize") == 3
    assert edit_distance("", "abc") == 3
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("same", "same") == 0


@given(short, short)
@settings(max_examples=300, deadline=None)
def test_edit_distance_matches_oracle(a, b):
    d = edit_distance(a, b)
    assert d == oracles.levenshtein(a, b) == edit_distance(b, a)
    assert edit_distance(a, a) == 0


@given(st.lists(short, min_size=1, max_size=8), st.lists(short, min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_distance_matrix_matches_oracle(src, tgt):
    m = edit_distance_matrix(src, tgt)
    assert m.tolist() == [[oracles.levenshtein(s, t) for t in tgt] for s in src]


def test_mapping_table_examples():
    src = Vocabulary(("<unk>", "</s>", "util", "we"))
    tgt = Vocabulary(("<unk>", "</s>", "utilize", "dynamic", "programming"))
    table = build_mapping_table(src, tgt, use_cache=False)
    assert table.map_token("util") == "utilize"

    ident = build_mapping_table(tgt, tgt, use_cache=False)
    assert ident.map.tolist() == list(range(len(tgt)))

    tie = build_mapping_table(Vocabulary(("ab",)), Vocabulary(("ba", "aa")), use_cache=False)
    assert tie.map_token("ab") == "aa"


def test_mapping_table_cache_and_text_round_trip():
    sub, word = demo_tokenizers()
    a = build_mapping_table(sub.vocab, word.vocab)
    assert build_mapping_table(sub.vocab, word.vocab) is a
    back = VocabMappingTable.from_text(a.to_text(), sub.vocab, word.vocab)
    assert back == a and back.to_text() == a.to_text()
    with pytest.raises(AlignmentError):
        VocabMappingTable.from_text(a.to_text(), word.vocab, sub.vocab)


def test_demo_alignment():
    sub, word = demo_tokenizers()
    src = sub.surfaces(sub.tokenize(DEMO_SENTENCE))
    tgt = word.surfaces(word.tokenize(DEMO_SENTENCE))
    path = align_sequences(src, tgt, build_mapping_table(sub.vocab, word.vocab))
    check_path(path, len(src), len(tgt))
    m2o = [p for p in path.pairs if p.flag == MANY_TO_ONE]
    assert [(src[p.src_start : p.src_end], tgt[p.tgt_start : p.tgt_end]) for p in m2o] == [(["util", "ize"], ["utilize"])]
    assert path.counts()[EXACT] == 8


def test_identical_sequences_align_exactly():
    toks = ["a", "b", "a", "c"]
    path = align_sequences(toks, toks)
    assert all(p.flag == EXACT for p in path.pairs)
    assert [(p.src_start, p.tgt_start) for p in path.pairs] == [(i, i) for i in range(4)]


def test_no_relation_matches_enumeration():
    path = align_sequences(["aa"], ["bb", "cc"])
    got = [(p.src_start, p.src_end, p.tgt_start, p.tgt_end, p.flag) for p in path.pairs]
    want = [p[:5] for p in oracles.best_path(["aa"], ["bb", "cc"], lambda s: None)]
    assert got == want
    assert all(p.flag == UNMATCHED for p in path.pairs)


def test_one_to_many_when_source_is_longer():
    path = align_sequences(["xa", "abc", "y"], ["xa", "a", "bc", "y"])
    assert [p.flag for p in path.pairs] == [EXACT, ONE_TO_MANY, EXACT]


def test_empty_sequences_rejected():
    with pytest.raises(AlignmentError):
        align_sequences([], ["a"])
    with pytest.raises(AlignmentError):
        align_sequences(["a"], [])


tok_alpha = st.sampled_from(["a", "b", "ab", "ba", "c", "abc", "bc"])


@given(
    st.lists(tok_alpha, min_size=1, max_size=5),
    st.lists(tok_alpha, min_size=1, max_size=5),
    st.dictionaries(tok_alpha, tok_alpha),
)
@settings(max_examples=150, deadline=None)
def test_aligner_matches_exhaustive_enumeration(src, tgt, mapping):
    mapper = mapping.get
    path = align_sequences(src, tgt, mapper=mapper)
    check_path(path, len(src), len(tgt))
    best = oracles.best_path(src, tgt, mapper)
    assert [(p.src_start, p.src_end, p.tgt_start, p.tgt_end, p.flag) for p in path.pairs] == [b[:5] for b in best]
    assert path.score == sum(b[5] for b in best)


def test_path_text_round_trip():
    path = align_sequences(["we", "util", "ize"], ["we", "utilize"])
    assert AlignmentPath.from_text(path.to_text()) == path


def test_check_path_rejects_gaps():
    bad = AlignmentPath((AlignedPair(0, 1, 0, 1, EXACT), AlignedPair(2, 3, 1, 2, EXACT)))
    with pytest.raises(AlignmentError):
        check_path(bad, 3, 2)


# -- projection -----------------------------------------------------------------------


def _identity_setup():
    spec = build_word_tokenizer(["a b c d e"])
    table = build_mapping_table(spec.vocab, spec.vocab, use_cache=False)
    return spec, table


def test_identity_projection():
    spec, table = _identity_setup()
    rng = np.random.default_rng(0)
    text = "a b c d e"
    ids = spec.tokenize(text)
    src = SparseLogits.top_k(rng.normal(size=(len(ids), len(spec.vocab))), 4, ids[1:] + [spec.vocab.eos_id])
    path = align_sequences(spec.surfaces(ids), spec.surfaces(ids), table)
    out = project_logits(src, path, table, len(ids), ids[1:] + [spec.vocab.eos_id])
    assert out == src
    assert TokenAligner(spec, spec).project(src, text) == src


def test_collision_first_write_wins():
    src_v = Vocabulary(("<unk>", "</s>", "ab", "abx", "zz"))
    tgt_v = Vocabulary(("<unk>", "</s>", "ab", "zz"))
    table = build_mapping_table(src_v, tgt_v, use_cache=False)
    assert table.map_token("abx") == "ab"
    src = SparseLogits.from_lists([[(2, 5.0), (3, 4.0), (4, 1.0)]], [2])
    path = AlignmentPath((AlignedPair(0, 1, 0, 1, EXACT),))
    out = project_logits(src, path, table, 1, [2])
    assert out.position(0) == [(2, 5.0), (3, 1.0)]


def test_one_hot_fallback():
    src_v = Vocabulary(tuple(f"s{i}" for i in range(4)))
    tgt_v = Vocabulary(tuple(f"t{i}" for i in range(9)))
    table = build_mapping_table(src_v, tgt_v, use_cache=False)
    src = SparseLogits.from_lists([[(1, 2.5), (0, -1.0)]], [1])
    path = AlignmentPath((AlignedPair(0, 1, 0, 0, UNMATCHED), AlignedPair(1, 1, 0, 1, UNMATCHED)))
    out = project_logits(src, path, table, 1, [7])
    assert out.position(0) == [(7, 3.5)]


def test_carrier_out_of_range():
    _, table = _identity_setup()
    src = SparseLogits.from_lists([[(2, 1.0)]], [2])
    path = AlignmentPath((AlignedPair(3, 4, 0, 1, EXACT),))
    with pytest.raises(AlignmentError):
        project_logits(src, path, table, 1, [2])


def test_carriers_by_flag():
    path = AlignmentPath((
        AlignedPair(0, 1, 0, 1, EXACT),
        AlignedPair(1, 3, 1, 2, MANY_TO_ONE),
        AlignedPair(3, 4, 2, 4, ONE_TO_MANY),
        AlignedPair(4, 5, 4, 4, UNMATCHED),
    ))
    assert carriers(path, 4).tolist() == [0, 1, -1, -1]


def test_no_overlap_vocabularies_fall_back_everywhere():
    src = build_word_tokenizer(["aaa bbb"])
    tgt = build_char_tokenizer(["xyz"])
    text = "aaa bbb"
    al = TokenAligner(src, tgt)
    _, tid, path, car = al.align_text(text)
    assert (car == -1).all()
    z = np.random.default_rng(1).normal(size=(2, len(src.vocab)))
    out = al.project(SparseLogits.top_k(z, 3, [0, 1]), text)
    assert out.counts().tolist() == [1] * len(tid)
    assert "one-hot fallback" in align_dump(src, tgt, text)


def test_identical_specs_dump_all_exact():
    _, word = demo_tokenizers()
    assert "all pairs are exact matches" in align_dump(word, word, DEMO_SENTENCE)


def test_get_aligner_is_cached():
    sub, word = demo_tokenizers()
    assert get_aligner(sub, word) is get_aligner(sub, word)


@given(st.lists(st.sampled_from(["we", "util", "ize", "the", "align", "tokens", "dynamic"]), min_size=1, max_size=8),
       st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def test_projection_mass_and_order(words, k, seed):
    sub, word = demo_tokenizers()
    text = " ".join(words)
    sid = sub.tokenize(text)
    z = np.random.default_rng(seed).normal(size=(len(sid), len(sub.vocab)))
    src = SparseLogits.top_k(z, k, sid[1:] + [sub.vocab.eos_id])
    al = get_aligner(sub, word)
    out = al.project(src, text)
    _, tid, _, car = al.align_text(text)
    out.check()
    counts = out.counts()
    assert out.n_positions == len(tid)
    assert (counts >= 1).all()
    assert (counts[car < 0] == 1).all()
    assert out.realized.tolist() == tid[1:] + [word.vocab.eos_id]
