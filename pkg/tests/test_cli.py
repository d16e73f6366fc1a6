import json
import subprocess
import sys

import pytest

from fedmkt.cli import EXIT_ABORT, EXIT_INVALID, EXIT_OK, compare_summaries, main
from fedmkt.federation import CSV_COLUMNS
from fedmkt.tokenizers import DEMO_SENTENCE

SMALL = {"task": {"n_public": 12, "n_private": 12, "n_eval": 12}}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_zero_shot_run(tmp_path, small_config):
    out = tmp_path / "zs"
    assert run_cli("run", "--config", small_config, "--mode", "zero_shot", "--out", out) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "zero_shot" and summary["rounds"] == 0
    assert summary["communication"]["total_floats"] == 0
    assert (out / "rounds.csv").read_text().splitlines() == [",".join(CSV_COLUMNS)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["finished"]
    assert len(list((out / "checkpoints").iterdir())) == 5
    assert sorted(p.name for p in (out / "data").iterdir()) == sorted(
        ["public.tsv", "eval_global.tsv"] + [f"{s}_{k}.tsv" for k in range(1, 5) for s in ("private", "eval_local")]
    )


def test_rows_per_round(tmp_path, small_config):
    out = tmp_path / "r"
    assert run_cli("run", "--config", small_config, "--T", 2, "--K", 2, "--out", out) == EXIT_OK
    lines = (out / "rounds.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary["participants"], key=int) == ["0", "1", "2"]


def test_same_config_byte_identical(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("run", "--config", small_config, "--T", 1, "--out", out) == EXIT_OK
    assert (a / "rounds.csv").read_bytes() == (b / "rounds.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    for ck in (a / "checkpoints").iterdir():
        assert ck.read_bytes() == (b / "checkpoints" / ck.name).read_bytes()


def test_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "lam": 0.5, "T": 3}))
    out = tmp_path / "o"
    assert run_cli("run", "--config", cfg, "--T", 1, "--out", out) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["T"] == 1 and manifest["config"]["lam"] == 0.5


@pytest.mark.parametrize("doc", ["{not json", json.dumps({"lam": 2.0}), json.dumps({"nope": 1}), "[1, 2]"])
def test_invalid_config_exit_code(tmp_path, doc, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(doc)
    assert run_cli("run", "--config", cfg, "--out", tmp_path / "x") == EXIT_INVALID
    assert "error:" in capsys.readouterr().err


def test_invalid_flag_names_field(tmp_path, capsys):
    assert run_cli("run", "--E", 0, "--out", tmp_path / "x") == EXIT_INVALID
    assert "E" in capsys.readouterr().err


def test_abort_exit_code(tmp_path, small_config, monkeypatch):
    from fedmkt import federation as fed
    from fedmkt.toy_lm import NonFiniteError

    def boom(*a, **k):
        raise NonFiniteError("non-finite loss")

    monkeypatch.setattr(fed, "train_ce", boom)
    out = tmp_path / "ab"
    assert run_cli("run", "--config", small_config, "--out", out) == EXIT_ABORT
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "aborted"


# -- compare -------------------------------------------------------------------------------


def _summary(mode, accs, world_seed=0):
    return {
        "mode": mode,
        "world_seed": world_seed,
        "participants": {str(i): {"role": "server" if i == 0 else "client", "accuracy": a, "perplexity": 10.0}
                         for i, a in enumerate(accs)},
    }


def test_compare_single_and_identical():
    rows, v = compare_summaries([_summary("fedmkt", [0.5, 0.4])])
    assert len(rows) == 2 and not v
    rows, _ = compare_summaries([_summary("fedmkt", [0.5, 0.4])] * 2)
    assert all(r["delta_accuracy"] == 0.0 for r in rows)


def test_compare_three_modes_and_violations():
    rows, v = compare_summaries([
        _summary("zero_shot", [0.1, 0.1]),
        _summary("standalone", [0.1, 0.3]),
        _summary("fedmkt", [0.6, 0.2]),
    ])
    assert len(rows) == 2 * 3
    assert [r["delta_accuracy"] for r in rows if r["mode"] == "fedmkt"] == pytest.approx([0.5, 0.1])
    assert v == ["participant 1: fedmkt 0.2000 < standalone 0.3000"]


def test_compare_mismatched_seeds(tmp_path, capsys):
    paths = []
    for i, seed in enumerate((0, 1)):
        p = tmp_path / f"s{i}.json"
        p.write_text(json.dumps(_summary("fedmkt", [0.5], seed)))
        paths.append(p)
    assert run_cli("compare", *paths) == EXIT_INVALID
    assert "world seeds" in capsys.readouterr().err


def test_compare_from_runs(tmp_path, small_config, capsys):
    paths = []
    for mode in ("zero_shot", "standalone"):
        out = tmp_path / mode
        assert run_cli("run", "--config", small_config, "--mode", mode, "--T", 1, "--out", out) == EXIT_OK
        paths.append(out / "summary.json")
    capsys.readouterr()
    table = tmp_path / "t.csv"
    assert run_cli("compare", *paths, "--csv", table) == EXIT_OK
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) >= 1 + 10
    assert len(table.read_text().splitlines()) == 1 + 10


# -- align-demo / cost -------------------------------------------------------------------------


def test_align_demo_output(capsys):
    assert run_cli("align-demo") == EXIT_OK
    out = capsys.readouterr().out
    assert DEMO_SENTENCE in out
    assert "['util', 'ize'] -> ['utilize']  many_to_one" in out


def test_align_demo_unknown_tokenizer(capsys):
    assert run_cli("align-demo", "--source", "/nonexistent/tok.txt") == EXIT_INVALID


def test_cost_analytic(capsys):
    assert run_cli("cost", "--n-samples", 1000, "--seq-len", 512, "--k-top", 16) == EXIT_OK
    out = capsys.readouterr().out
    assert "floats per knowledge set per direction: 8,192,000" in out


def test_cost_k_top_zero(capsys):
    assert run_cli("cost", "--k-top", 0) == EXIT_INVALID
    assert "k_top" in capsys.readouterr().err


def test_cost_trainable_fraction_hand_count(capsys, small_config):
    assert run_cli("cost", "--config", small_config, "--json") == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    from fedmkt.federation import FedConfig, build_world

    cfg = FedConfig.from_dict(SMALL)
    for p in build_world(cfg).participants():
        V, d, r = p.model.vocab_size, p.model.dim, p.model.adapter.A.shape[0]
        lora = r * d + d * r
        assert rep["trainable_fraction"][str(p.pid)] == pytest.approx(lora / (V * d + d * d + d * V + lora), rel=1e-12)
    assert rep["total"]["floats"] == 10 * (rep["per_round"]["upload_floats"] + rep["per_round"]["download_floats"])


def test_cost_zero_rounds_for_non_exchange_modes(capsys):
    assert run_cli("cost", "--mode", "standalone", "--n-samples", 10, "--seq-len", 4, "--json") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["total"]["floats"] == 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedmkt.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
