import time

import numpy as np
import pytest

from fedmkt.tokenizers import build_word_tokenizer
from fedmkt.toy_lm import new_model

_START = time.perf_counter()
_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            n, title = m.args
            _RESULTS.setdefault(n, {"title": title, "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    entry = _RESULTS[m.args[0]]
    if rep.when == "setup":
        entry["setup"] = entry.get("setup", 0.0) + rep.duration
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["outcomes"].append((item.name, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        outs = r["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for _, o, _ in outs):
            status = "PASS"
        else:
            status = "FAIL"
        secs = sum(d for _, _, d in outs) + r.get("setup", 0.0)
        tr.write_line(f"criterion {n:2d}: {status:7s} {r['title']} ({len(outs)} checks, {secs:.1f}s)")
    total = time.perf_counter() - _START
    verdict = "PASS" if total < 600 else "FAIL"
    tr.write_line(f"full suite runtime: {total:.1f}s (limit 600s) {verdict}")


# -- shared fixtures ------------------------------------------------------------------


TINY_TEXTS = ["a b c d e", "b c a e f", "f e d c b a", "c c b a d", "g h a b"]


@pytest.fixture
def tiny_tokenizer():
    return build_word_tokenizer(TINY_TEXTS)


def make_tiny_model(tokenizer, dim=6, rank=3, seed=0, random_b=True):
    rng = np.random.default_rng(seed)
    model = new_model(tokenizer, dim, rng, rank=rank, alpha=4.0)
    if random_b:
        model.adapter.B[...] = rng.normal(0, 0.5, model.adapter.B.shape)
    return model


@pytest.fixture
def tiny_model(tiny_tokenizer):
    return make_tiny_model(tiny_tokenizer)

