import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmkt.data_eval import (
    DataError,
    Sample,
    SyntheticTask,
    client_mixture,
    dumps_samples,
    encode,
    evaluate,
    generate_world,
    loads_samples,
    split_pool,
    token_distribution,
    total_variation,
)
from fedmkt.tokenizers import build_word_tokenizer
from fedmkt.toy_lm import BaseParams, LanguageModel, LowRankAdapter, new_model


def _pool(n):
    return [Sample(i, f"w{i}", "x") for i in range(n)]


def test_five_equal_parts():
    public, private = split_pool(_pool(5000), 4, np.random.default_rng(0))
    assert len(public) == 1000
    assert [len(p) for p in private] == [1000] * 4


def test_single_client_halves():
    public, private = split_pool(_pool(10), 1)
    assert len(public) == 5 and [len(p) for p in private] == [5]


def test_pool_too_small():
    with pytest.raises(DataError):
        split_pool(_pool(3), 4)


@given(st.integers(1, 6), st.integers(0, 60), st.integers(0, 100))
@settings(max_examples=50, deadline=None)
def test_split_disjoint_and_equal(k, extra, seed):
    n = (k + 1) + extra
    public, private = split_pool(_pool(n), k, np.random.default_rng(seed))
    parts = [public, *private]
    ids = [{s.sample_id for s in p} for p in parts]
    assert len({len(p) for p in parts}) == 1
    for a, b in itertools.combinations(ids, 2):
        assert not a & b


@pytest.mark.parametrize("homogeneous", [False, True])
def test_world_splits_disjoint(homogeneous):
    world = generate_world(SyntheticTask(seed=3, homogeneous=homogeneous))
    splits = world.splits()
    ids = {name: {s.sample_id for s in samples} for name, samples in splits.items()}
    for (na, a), (nb, b) in itertools.combinations(ids.items(), 2):
        assert not a & b, (na, nb)
    if homogeneous:
        assert len(world.public) == len(world.private[0])


def test_world_is_deterministic():
    a, b = generate_world(SyntheticTask(seed=1)), generate_world(SyntheticTask(seed=1))
    assert dumps_samples(a.public) == dumps_samples(b.public)
    assert dumps_samples(a.private[2]) == dumps_samples(b.private[2])
    c = generate_world(SyntheticTask(seed=2))
    assert dumps_samples(a.public) != dumps_samples(c.public)


def test_clients_are_non_iid():
    task = SyntheticTask(seed=0)
    world = generate_world(task)
    mixes = [client_mixture(task, k) for k in range(1, 5)]
    for a, b in itertools.combinations(mixes, 2):
        assert not np.allclose(a, b)
    spec = build_word_tokenizer(world.all_texts())
    dists = [token_distribution(spec, p) for p in world.private]
    for a, b in itertools.combinations(dists, 2):
        assert total_variation(a, b) > 0.2
    hom = SyntheticTask(homogeneous=True)
    assert all(np.allclose(client_mixture(hom, k), 0.25) for k in range(1, 5))


def test_targets_non_empty():
    world = generate_world(SyntheticTask(seed=5))
    for samples in world.splits().values():
        assert all(s.target for s in samples)


def test_task_validation():
    with pytest.raises(DataError):
        SyntheticTask(own_topic_share=1.5)
    with pytest.raises(DataError):
        SyntheticTask(min_words=5, max_words=3)
    with pytest.raises(DataError):
        SyntheticTask(n_public=0)


def test_tsv_round_trip():
    world = generate_world(SyntheticTask(n_public=8))
    text = dumps_samples(world.public)
    back = loads_samples(text)
    assert [(s.sample_id, s.prompt, s.target) for s in back] == [(s.sample_id, s.prompt, s.target) for s in world.public]
    with pytest.raises(DataError):
        dumps_samples([Sample(0, "a\tb", "c")])
    with pytest.raises(DataError):
        loads_samples("1\tonly two")


# -- evaluation -------------------------------------------------------------------------


def _constant_model(tok, token_id):
    V, d = len(tok.vocab), 3
    out = np.zeros((d, V))
    out[:, token_id] = 1.0
    base = BaseParams(np.ones((V, d)), np.eye(d), out)
    return LanguageModel(base, LowRankAdapter.init(d, 1, 1.0, np.random.default_rng(0)), tok)


def test_constant_predictor_accuracy():
    tok = build_word_tokenizer(["a b"])
    model = _constant_model(tok, tok.vocab.id_of("a"))
    samples = [Sample(0, "b a", "a b b"), Sample(1, "b a", "b b b")]
    # targets: [a a b b </s>] and [a b b b </s>] -> 3 of 10 are 'a'
    assert evaluate(model, samples)["accuracy"] == pytest.approx(0.3, abs=1e-15)


def test_uniform_model_perplexity():
    tok = build_word_tokenizer([" ".join(f"w{i}" for i in range(14))])
    assert len(tok.vocab) == 16
    V, d = 16, 4
    base = BaseParams(np.ones((V, d)), np.eye(d), np.zeros((d, V)))
    model = LanguageModel(base, LowRankAdapter.init(d, 2, 1.0, np.random.default_rng(0)), tok)
    m = evaluate(model, [Sample(0, "w1 w2", "w3"), Sample(1, "w4", "w5 w6 w7")])
    assert m["perplexity"] == pytest.approx(16.0, rel=1e-12)


def test_accuracy_matches_scan_oracle():
    world = generate_world(SyntheticTask(seed=4))
    tok = build_word_tokenizer(world.all_texts())
    model = new_model(tok, 8, np.random.default_rng(0))
    model.adapter.B[...] = np.random.default_rng(1).normal(size=model.adapter.B.shape)
    samples = world.eval_global[:20]
    hits = total = 0
    for s in samples:
        x, y = encode(tok, s.text)
        z = model.forward(x)
        for t in range(len(y)):
            hits += int(np.argmax(z[t]) == y[t])
            total += 1
    assert evaluate(model, samples)["accuracy"] == hits / total


def test_empty_eval_set():
    tok = build_word_tokenizer(["a"])
    with pytest.raises(DataError):
        evaluate(_constant_model(tok, 0), [])
