"""Synthetic non-IID corpora, the public/private split, and evaluation."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tokenizers import DEMO_SENTENCE, TokenizerSpec, lm_pair
from .toy_lm import LanguageModel, evaluate_positions

SYLLABLES = (
    "ka", "lo", "mi", "ru", "ten", "vas", "po", "zi", "dor", "fen", "ul", "bra",
    "ne", "sa", "tor", "qui", "mel", "ga", "rin", "sho", "pel", "da", "vi", "kon",
)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: int
    prompt: str
    target: str
    topic: int = -1

    @property
    def text(self) -> str:
        return f"{self.prompt} {self.target}" if self.target else self.prompt


@dataclass(frozen=True)
class SyntheticTask:
    """Template-driven next-word corpus with per-client topic skew.

    Each topic owns a word list and a successor map over it; a sentence walks
    the map, following the successor with probability ``p_follow`` and
    jumping to a random topic word otherwise. With probability ``p_shared`` a
    sentence opens with a fragment of ``DEMO_SENTENCE`` shared by all topics.
    """

    seed: int = 0
    n_clients: int = 4
    n_topics: int = 4
    words_per_topic: int = 8
    own_topic_share: float = 0.7
    homogeneous: bool = False
    min_words: int = 5
    max_words: int = 9
    p_follow: float = 0.85
    p_shared: float = 0.15
    n_public: int = 64
    n_private: int = 64
    n_eval: int = 128

    def __post_init__(self):
        if self.n_clients < 1 or self.n_topics < 1:
            raise DataError("need at least one client and one topic")
        if not 0.0 <= self.own_topic_share <= 1.0:
            raise DataError("own_topic_share must lie in [0, 1]")
        if not 1 <= self.min_words <= self.max_words:
            raise DataError("invalid sentence length bounds")
        if min(self.n_public, self.n_private, self.n_eval) < 1:
            raise DataError("split sizes must be positive")
        if self.n_topics * self.words_per_topic > len(SYLLABLES) ** 2:
            raise DataError("not enough syllable combinations for the requested vocabulary")


@dataclass
class WorldData:
    task: SyntheticTask
    public: list[Sample]
    private: list[list[Sample]]
    eval_global: list[Sample]
    eval_local: list[list[Sample]]
    topic_words: list[list[str]]

    def all_texts(self) -> list[str]:
        out = [DEMO_SENTENCE]
        for group in [self.public, *self.private, self.eval_global, *self.eval_local]:
            out.extend(s.text for s in group)
        return out

    def splits(self) -> dict[str, list[Sample]]:
        out = {"public": self.public, "eval_global": self.eval_global}
        for k, (p, e) in enumerate(zip(self.private, self.eval_local), 1):
            out[f"private_{k}"] = p
            out[f"eval_local_{k}"] = e
        return out


class _TopicModel:
    def __init__(self, task: SyntheticTask, rng: np.random.Generator):
        self.task = task
        combos = [a + b for a in SYLLABLES for b in SYLLABLES if a != b]
        chosen = rng.choice(len(combos), size=task.n_topics * task.words_per_topic, replace=False)
        words = [combos[i] for i in chosen]
        w = task.words_per_topic
        self.words = [words[t * w : (t + 1) * w] for t in range(task.n_topics)]
        # successor of word i within a topic is a random derangement of the list
        self.succ = []
        for _ in range(task.n_topics):
            perm = rng.permutation(w)
            while w > 1 and np.any(perm == np.arange(w)):
                perm = rng.permutation(w)
            self.succ.append(perm)
        self.shared = DEMO_SENTENCE.split()

    def sentence(self, topic: int, rng: np.random.Generator) -> list[str]:
        t = self.task
        n = int(rng.integers(t.min_words, t.max_words + 1))
        out: list[str] = []
        if rng.random() < t.p_shared:
            start = int(rng.integers(0, len(self.shared) - 1))
            out.extend(self.shared[start : start + int(rng.integers(2, 4))])
        words, succ = self.words[topic], self.succ[topic]
        cur = int(rng.integers(len(words)))
        out.append(words[cur])
        while len(out) < n:
            if rng.random() < t.p_follow:
                cur = int(succ[cur])
            else:
                cur = int(rng.integers(len(words)))
            out.append(words[cur])
        return out


def client_mixture(task: SyntheticTask, client: int) -> np.ndarray:
    """Topic weights of client ``client`` (1-based)."""
    if task.homogeneous or task.n_topics == 1:
        return np.full(task.n_topics, 1.0 / task.n_topics)
    own = (client - 1) % task.n_topics
    rest = (1.0 - task.own_topic_share) / (task.n_topics - 1)
    w = np.full(task.n_topics, rest)
    w[own] = task.own_topic_share
    return w


def _make(topics: _TopicModel, weights, n: int, rng, next_id: int) -> list[Sample]:
    out = []
    for i in range(n):
        topic = int(rng.choice(len(weights), p=weights))
        words = topics.sentence(topic, rng)
        cut = max(1, len(words) // 2)
        out.append(Sample(next_id + i, " ".join(words[:cut]), " ".join(words[cut:]), topic))
    return out


def split_pool(pool: Sequence[Sample], n_clients: int, rng: Optional[np.random.Generator] = None):
    """Random split into ``n_clients + 1`` equal parts: one public, one per client.

    Leftover samples (when the pool size is not divisible) are dropped.
    """
    parts = n_clients + 1
    size = len(pool) // parts
    if n_clients < 1 or size < 1:
        raise DataError(f"pool of {len(pool)} samples cannot be split into {parts} non-empty parts")
    order = np.arange(len(pool)) if rng is None else rng.permutation(len(pool))
    chunks = [[pool[int(i)] for i in order[p * size : (p + 1) * size]] for p in range(parts)]
    return chunks[0], chunks[1:]


def generate_world(task: SyntheticTask) -> WorldData:
    rng = np.random.default_rng(task.seed)
    topics = _TopicModel(task, rng)
    uniform = np.full(task.n_topics, 1.0 / task.n_topics)
    k = task.n_clients
    if task.homogeneous:
        pool = _make(topics, uniform, task.n_public * (k + 1), rng, 0)
        public, private = split_pool(pool, k, rng)
    else:
        public = _make(topics, uniform, task.n_public, rng, 0)
        private, next_id = [], task.n_public
        for c in range(1, k + 1):
            private.append(_make(topics, client_mixture(task, c), task.n_private, rng, next_id))
            next_id += task.n_private
    next_id = 1 + max(s.sample_id for s in [*public, *(s for p in private for s in p)])
    eval_global = _make(topics, uniform, task.n_eval, rng, next_id)
    next_id += task.n_eval
    eval_local = []
    for c in range(1, k + 1):
        eval_local.append(_make(topics, client_mixture(task, c), task.n_eval, rng, next_id))
        next_id += task.n_eval
    return WorldData(task, public, private, eval_global, eval_local, topics.words)


# -- serialization -----------------------------------------------------------------


def dumps_samples(samples: Iterable[Sample]) -> str:
    lines = []
    for s in samples:
        if "\t" in s.prompt + s.target or "\n" in s.prompt + s.target:
            raise DataError("sample text may not contain tabs or newlines")
        lines.append(f"{s.sample_id}\t{s.prompt}\t{s.target}\n")
    return "".join(lines)


def loads_samples(text: str) -> list[Sample]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"line {n}: expected 3 tab-separated fields")
        out.append(Sample(int(parts[0]), parts[1], parts[2]))
    return out


# -- evaluation ----------------------------------------------------------------------


@functools.lru_cache(maxsize=200_000)
def encode(spec: TokenizerSpec, text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    x, y = lm_pair(spec, text)
    return tuple(x), tuple(y)


def encode_samples(spec: TokenizerSpec, samples: Iterable[Sample]) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    return [encode(spec, s.text) for s in samples]


def evaluate(model: LanguageModel, samples: Sequence[Sample]) -> dict[str, float]:
    """Next-token accuracy over all positions and perplexity ``exp(mean CE)``."""
    if not samples:
        raise DataError("cannot evaluate on an empty set")
    pairs = encode_samples(model.tokenizer, samples)
    per_sample, correct, _ = evaluate_positions(model, pairs)
    return {
        "accuracy": float(correct.mean()),
        "perplexity": float(np.exp(per_sample.mean())),
    }


def token_distribution(spec: TokenizerSpec, samples: Iterable[Sample]) -> np.ndarray:
    counts = np.zeros(len(spec.vocab))
    for x, _ in encode_samples(spec, samples):
        np.add.at(counts, list(x), 1)
    return counts / counts.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())
