"""Command-line entry point: ``fedmkt run | compare | align-demo | cost``.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
Flag values take precedence over the config file, which takes precedence
over built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .align import EXACT, TokenAligner, edit_distance
from .data_eval import DataError, dumps_samples, encode
from .federation import (
    CSV_COLUMNS,
    CSV_SCHEMA_VERSION,
    ConfigError,
    FedConfig,
    ProtocolError,
    default_clients,
    homogeneous_clients,
    RunAborted,
    RunResult,
    build_world,
    communication_cost,
    run,
)
from .knowledge import KnowledgeError, expected_payload, wire_size
from .tokenizers import DEMO_SENTENCE, TokenizerError, TokenizerSpec, build_tokenizer, demo_tokenizers
from .toy_lm import save_checkpoint

log = logging.getLogger("fedmkt")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
MANIFEST_VERSION = 1

# scalar FedConfig fields exposed as flags
_FLAG_FIELDS = {
    "K": int, "T": int, "R": int, "E": int, "lam": float, "lr_server": float, "lr_client": float,
    "k_top": int, "batch_size": int, "seed": int, "mode": str, "weight_decay": float,
    "max_grad_norm": float, "loss_norm": str, "workers": int, "context_window": int,
}


class UsageError(ValueError):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    for name, typ in _FLAG_FIELDS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--task-seed", type=int, default=None, help="world generator seed")
    p.add_argument("--homogeneous", action="store_true", default=None,
                   help="identical client data distributions")


def load_config(args: argparse.Namespace) -> FedConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    task = dict(doc.get("task", {}))
    if getattr(args, "task_seed", None) is not None:
        task["seed"] = args.task_seed
    if getattr(args, "homogeneous", None):
        task["homogeneous"] = True
    if "K" in doc:
        task.setdefault("n_clients", doc["K"])
    if "clients" not in doc:
        # default roster, resized to K; identical clients for a homogeneous world
        k = doc.get("K", FedConfig.K)
        if task.get("homogeneous"):
            roster = homogeneous_clients(k)
        else:
            base = default_clients()
            roster = [base[i % len(base)] for i in range(k)]
        doc["clients"] = [dataclasses.asdict(c) for c in roster]
    if task:
        doc["task"] = task
    try:
        cfg = FedConfig.from_dict(doc)
    except DataError as exc:
        raise ConfigError(f"task: {exc}") from exc
    return cfg.validate()


# -- run -----------------------------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def rounds_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in result.logs:
        w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(row)])
    return buf.getvalue()


def summarize(cfg: FedConfig, result: RunResult) -> dict:
    metrics = result.final_metrics()
    return {
        "version": __version__,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "world_seed": cfg.task.seed,
        "rounds": len({r.round for r in result.logs}),
        "participants": {str(pid): m for pid, m in metrics.items()},
        "communication": communication_cost(result.logs),
    }


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.mode}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": __version__,
        "manifest_version": MANIFEST_VERSION,
        "csv_schema": CSV_SCHEMA_VERSION,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished": None,
        "status": "running",
        "outputs": {"rounds": "rounds.csv", "summary": "summary.json", "checkpoints": "checkpoints/", "data": "data/"},
    }
    _write_json(out / "manifest.json", manifest)
    world = build_world(cfg)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for name, samples in world.data.splits().items():
        (data_dir / f"{name}.tsv").write_text(dumps_samples(samples))
    try:
        result = run(cfg, world)
    except RunAborted as exc:
        manifest.update(status="aborted", error=str(exc), finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
        _write_json(out / "manifest.json", manifest)
        raise
    (out / "rounds.csv").write_text(rounds_csv(result))
    summary = summarize(cfg, result)
    _write_json(out / "summary.json", summary)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for p in world.participants():
        (ck / f"participant{p.pid}.ckpt").write_bytes(save_checkpoint(p.model))
    manifest.update(status="complete", finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    _write_json(out / "manifest.json", manifest)
    for pid, m in summary["participants"].items():
        print(f"participant {pid} ({m['role']}): accuracy {m['accuracy']:.4f} perplexity {m['perplexity']:.3f}")
    print(f"outputs written to {out}")
    return EXIT_OK


# -- compare -------------------------------------------------------------------------

# (better, worse) pairs that FedMKT results are expected to respect
ORDERINGS = (("fedmkt", "standalone"), ("standalone", "zero_shot"), ("fedmkt", "zero_shot"))


def compare_summaries(summaries: Sequence[dict]) -> tuple[list[dict], list[str]]:
    if not summaries:
        raise UsageError("compare needs at least one summary")
    seeds = {s["world_seed"] for s in summaries}
    if len(seeds) > 1:
        raise UsageError(f"summaries come from different world seeds: {sorted(seeds)}")
    base = summaries[0]["participants"]
    rows = []
    for s in summaries:
        for pid in sorted(s["participants"], key=int):
            m = s["participants"][pid]
            ref = base.get(pid, m)
            rows.append({
                "participant": int(pid),
                "role": m["role"],
                "mode": s["mode"],
                "accuracy": m["accuracy"],
                "perplexity": m["perplexity"],
                "delta_accuracy": m["accuracy"] - ref["accuracy"],
            })
    acc = {(r["mode"], r["participant"]): r["accuracy"] for r in rows}
    violations = []
    for hi, lo in ORDERINGS:
        for (mode, pid), a in sorted(acc.items()):
            if mode == hi and (lo, pid) in acc and a < acc[(lo, pid)]:
                violations.append(f"participant {pid}: {hi} {a:.4f} < {lo} {acc[(lo, pid)]:.4f}")
    return rows, violations


def cmd_compare(args: argparse.Namespace) -> int:
    summaries = []
    for path in args.summaries:
        try:
            summaries.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read summary {path}: {exc}") from exc
    rows, violations = compare_summaries(summaries)
    print(f"{'participant':>11} {'role':>6} {'mode':>12} {'accuracy':>9} {'ppl':>9} {'delta':>8}")
    for r in rows:
        print(f"{r['participant']:>11} {r['role']:>6} {r['mode']:>12} {r['accuracy']:9.4f} "
              f"{r['perplexity']:9.3f} {r['delta_accuracy']:+8.4f}")
    for v in violations:
        print("ordering violation:", v)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


# -- align-demo ----------------------------------------------------------------------


def _load_tokenizer(name: str, text: str) -> TokenizerSpec:
    if name in ("demo-subword", "demo-word"):
        sub, word = demo_tokenizers()
        return sub if name == "demo-subword" else word
    if name in ("word", "char"):
        return build_tokenizer(name, [text])
    if name.startswith("merge"):
        n = int(name.partition(":")[2] or 20)
        return build_tokenizer("merge", [text], num_merges=n)
    try:
        return TokenizerSpec.from_text(Path(name).read_text())
    except OSError as exc:
        raise UsageError(f"unknown tokenizer {name!r}") from exc


def align_dump(source: TokenizerSpec, target: TokenizerSpec, text: str) -> str:
    al = TokenAligner(source, target)
    sid, tid, path, car = al.align_text(text)
    src, tgt = source.surfaces(sid), target.surfaces(tid)
    lines = [f"text: {text}", f"source tokens ({len(src)}): {src}", f"target tokens ({len(tgt)}): {tgt}", "", "mapping table hits:"]
    for tok in dict.fromkeys(src):
        hit = al.table.map_token(tok)
        lines.append(f"  {tok!r} -> {hit!r} (distance {edit_distance(tok, hit)})")
    lines += ["", "alignment path:"]
    for p in path.pairs:
        lines.append(f"  {src[p.src_start:p.src_end]} -> {tgt[p.tgt_start:p.tgt_end]}  {p.flag}")
    lines += ["", "projection:"]
    for j, c in enumerate(car):
        if c < 0:
            lines.append(f"  target {j} {tgt[j]!r}: one-hot fallback")
        else:
            lines.append(f"  target {j} {tgt[j]!r}: carried by source {int(c)} {src[int(c)]!r}")
    counts = path.counts()
    lines.append("")
    lines.append("flags: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    if counts.get(EXACT, 0) == len(path.pairs):
        lines.append("all pairs are exact matches")
    return "\n".join(lines)


def cmd_align_demo(args: argparse.Namespace) -> int:
    text = args.text
    source = _load_tokenizer(args.source, text)
    target = _load_tokenizer(args.target, text)
    print(align_dump(source, target, text))
    return EXIT_OK


# -- cost ----------------------------------------------------------------------------


def cost_report(cfg: FedConfig, n_samples: Optional[int] = None, seq_len: Optional[int] = None) -> dict:
    if (n_samples is None) != (seq_len is None):
        raise UsageError("--n-samples and --seq-len go together")
    world = build_world(cfg)
    fractions = {p.pid: p.model.trainable_fraction() for p in world.participants()}
    if n_samples is not None:
        one = expected_payload(n_samples, seq_len, cfg.k_top)
        up_f, up_b = cfg.K * one.n_floats, cfg.K * one.n_bytes
        down_f, down_b = up_f, up_b
        per_set = {"floats": one.n_floats, "bytes": one.n_bytes}
    else:
        def size(p):
            width = min(cfg.k_top, p.model.vocab_size)
            positions = sum(len(encode(p.tokenizer, s.text)[0]) for s in world.public)
            return wire_size(len(world.public), positions, positions * width)

        per_client = [(sz.n_floats, sz.n_bytes) for sz in map(size, world.clients)]
        s0 = size(world.server)
        s0_floats, s0_bytes = s0.n_floats, s0.n_bytes
        up_f, up_b = sum(f for f, _ in per_client), sum(b for _, b in per_client)
        down_f, down_b = cfg.K * s0_floats, cfg.K * s0_bytes
        per_set = {"server": {"floats": s0_floats, "bytes": s0_bytes},
                   "clients": [{"floats": f, "bytes": b} for f, b in per_client]}
    rounds = 0 if cfg.mode in ("zero_shot", "standalone", "centralized", "fedavg") else cfg.T
    return {
        "per_set": per_set,
        "per_round": {"upload_floats": up_f, "download_floats": down_f, "upload_bytes": up_b, "download_bytes": down_b},
        "total": {"floats": rounds * (up_f + down_f), "bytes": rounds * (up_b + down_b), "rounds": rounds},
        "trainable_fraction": {str(k): v for k, v in fractions.items()},
    }


def cmd_cost(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    rep = cost_report(cfg, args.n_samples, args.seq_len)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return EXIT_OK
    ps = rep["per_set"]
    if "floats" in ps:
        print(f"floats per knowledge set per direction: {ps['floats']:,}")
        print(f"bytes per knowledge set: {ps['bytes']:,}")
    pr = rep["per_round"]
    print(f"per round: upload {pr['upload_floats']:,} floats ({pr['upload_bytes']:,} bytes), "
          f"download {pr['download_floats']:,} floats ({pr['download_bytes']:,} bytes)")
    t = rep["total"]
    print(f"total over {t['rounds']} rounds: {t['floats']:,} floats, {t['bytes']:,} bytes")
    for pid, frac in rep["trainable_fraction"].items():
        print(f"participant {pid}: trainable fraction {frac:.6f}")
    return EXIT_OK


# -- entry -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmkt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train in the configured mode and write logs")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default runs/<mode>-seed<seed>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate summaries across modes")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("align-demo", help="show how one text aligns across two tokenizers")
    p.add_argument("--source", default="demo-subword",
                   help="demo-subword, demo-word, word, char, merge[:N], or a tokenizer file")
    p.add_argument("--target", default="demo-word")
    p.add_argument("--text", default=DEMO_SENTENCE)
    p.set_defaults(func=cmd_align_demo)

    p = sub.add_parser("cost", help="communication volume and trainable fraction")
    _add_config_flags(p)
    p.add_argument("--n-samples", type=int, default=None, help="public set size for the analytic count")
    p.add_argument("--seq-len", type=int, default=None, help="tokens per sample for the analytic count")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataError, TokenizerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RunAborted, ProtocolError, KnowledgeError, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
