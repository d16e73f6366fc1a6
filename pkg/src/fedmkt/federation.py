"""FedMKT protocol rounds and the baseline training modes.

One round follows the eleven-step workflow:

 1. clients fine-tune adapters on private data
 2. clients build knowledge sets on the public data
 3. clients upload them
 4. server aligns client logits to its vocabulary
 5. server selects knowledge (DualMinCE)
 6. server transfers knowledge into its adapter
 7. server builds its own knowledge set
 8. server broadcasts it
 9. clients align server logits to their vocabularies
10. clients select knowledge (DualMinCE)
11. clients transfer knowledge into their adapters
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import knowledge as kn
from .data_eval import Sample, SyntheticTask, WorldData, encode, evaluate, generate_world
from .knowledge import (
    KnowledgeSet,
    SelectiveKnowledgeSet,
    align_knowledge_set,
    build_knowledge_set,
    deserialize_knowledge,
    dual_min_ce,
    payload_size,
    serialize_knowledge,
)
from .tokenizers import TokenizerSpec, build_tokenizer
from .toy_lm import LanguageModel, OptimizerState, evaluate_positions, loss_and_grad, new_model, optimizer_step

log = logging.getLogger(__name__)

MODES = ("fedmkt", "zero_shot", "standalone", "centralized", "fedavg", "llm2slm")
LOSS_NORMS = ("token", "char")


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class RunAborted(RuntimeError):
    def __init__(self, message: str, round: int, participant: int):
        super().__init__(f"round {round}, participant {participant}: {message}")
        self.round = round
        self.participant = participant


@dataclass
class ModelSpec:
    kind: str = "word"
    dim: int = 16
    merges: int = 0
    rank: int = 8
    alpha: float = 16.0
    base_seed: Optional[int] = None


def default_server() -> ModelSpec:
    return ModelSpec(kind="word", dim=64)


def default_clients() -> list[ModelSpec]:
    return [
        ModelSpec(kind="word", dim=16),
        ModelSpec(kind="merge", dim=24, merges=60),
        ModelSpec(kind="char", dim=16),
        ModelSpec(kind="merge", dim=32, merges=120),
    ]


def homogeneous_clients(n: int = 4, dim: int = 16, kind: str = "word") -> list[ModelSpec]:
    return [ModelSpec(kind=kind, dim=dim, base_seed=1) for _ in range(n)]


@dataclass
class FedConfig:
    K: int = 4
    T: int = 10
    R: int = 1
    E: int = 1
    lam: float = 0.9
    lr_server: float = 0.01
    lr_client: float = 0.01
    k_top: int = 16
    batch_size: int = 4
    seed: int = 0
    mode: str = "fedmkt"
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    loss_norm: str = "token"
    workers: int = 1
    context_window: int = 256
    server: ModelSpec = field(default_factory=default_server)
    clients: list[ModelSpec] = field(default_factory=default_clients)
    task: SyntheticTask = field(default_factory=SyntheticTask)

    def validate(self) -> "FedConfig":
        errors = []
        if self.K < 1:
            errors.append("K: must be >= 1")
        for name in ("T", "R", "E"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            errors.append("lam: must lie in [0, 1]")
        if self.k_top < 1:
            errors.append("k_top: must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        if self.lr_server <= 0 or self.lr_client <= 0:
            errors.append("lr_server/lr_client: must be positive")
        if self.mode not in MODES:
            errors.append(f"mode: must be one of {', '.join(MODES)}")
        if self.loss_norm not in LOSS_NORMS:
            errors.append(f"loss_norm: must be one of {', '.join(LOSS_NORMS)}")
        if self.workers < 1:
            errors.append("workers: must be >= 1")
        if len(self.clients) != self.K:
            errors.append(f"clients: expected {self.K} client model specs, got {len(self.clients)}")
        if self.task.n_clients != self.K:
            errors.append("task.n_clients: must equal K")
        for i, spec in enumerate([self.server, *self.clients]):
            where = "server" if i == 0 else f"clients[{i - 1}]"
            if spec.kind not in ("word", "char", "merge"):
                errors.append(f"{where}.kind: unknown tokenizer kind {spec.kind!r}")
            if spec.dim < 1 or spec.rank < 1:
                errors.append(f"{where}: dim and rank must be positive")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FedConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        try:
            if "server" in doc:
                doc["server"] = ModelSpec(**doc["server"])
            if "clients" in doc:
                doc["clients"] = [ModelSpec(**c) for c in doc["clients"]]
            if "task" in doc:
                doc["task"] = SyntheticTask(**doc["task"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**doc)


# -- participants & world -------------------------------------------------------


@dataclass
class Participant:
    pid: int
    role: str
    model: LanguageModel
    opt: OptimizerState
    rng: np.random.Generator
    private: list[Sample] = field(default_factory=list)
    local_eval: list[Sample] = field(default_factory=list)
    frozen: bool = False

    @property
    def tokenizer(self) -> TokenizerSpec:
        return self.model.tokenizer


@dataclass
class World:
    config: FedConfig
    data: WorldData
    server: Participant
    clients: list[Participant]

    @property
    def public(self) -> list[Sample]:
        return self.data.public

    def participants(self) -> list[Participant]:
        return [self.server, *self.clients]


def _make_participant(pid: int, spec: ModelSpec, texts, cfg: FedConfig, lr: float) -> Participant:
    tok = build_tokenizer(spec.kind, texts, num_merges=spec.merges)
    base_rng = (
        np.random.default_rng([spec.base_seed, cfg.seed, spec.dim])
        if spec.base_seed is not None
        else np.random.default_rng([cfg.seed, pid, 7])
    )
    model = new_model(
        tok, spec.dim, np.random.default_rng([cfg.seed, pid, 11]), rank=spec.rank,
        alpha=spec.alpha, context_window=cfg.context_window, base_rng=base_rng,
    )
    opt = OptimizerState.for_adapter(
        model.adapter, lr, beta1=cfg.beta1, beta2=cfg.beta2,
        weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm,
    )
    return Participant(pid, "server" if pid == 0 else "client", model, opt, np.random.default_rng([cfg.seed, pid, 13]))


def build_world(config: FedConfig, data: Optional[WorldData] = None) -> World:
    config.validate()
    data = data if data is not None else generate_world(config.task)
    texts = data.all_texts()
    server = _make_participant(0, config.server, texts, config, config.lr_server)
    server.local_eval = data.eval_global
    clients = []
    for k, spec in enumerate(config.clients, 1):
        p = _make_participant(k, spec, texts, config, config.lr_client)
        p.private = data.private[k - 1]
        p.local_eval = data.eval_local[k - 1]
        clients.append(p)
    return World(config, data, server, clients)


# -- training primitives ------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class EpochStats:
    loss: float = 0.0
    ft: float = 0.0
    kd: float = 0.0
    steps: int = 0


def _step(p: Participant, ce, kd, lam: float) -> tuple[float, float, float]:
    obj = loss_and_grad(p.model, ce, kd, lam)
    optimizer_step(p.model.adapter, obj.grad_A, obj.grad_B, p.opt)
    return obj.loss, obj.ft_loss, obj.kd_loss


def train_ce(p: Participant, samples: Sequence[Sample], epochs: int, batch_size: int) -> EpochStats:
    """Plain next-token fine-tuning (the task loss) over ``samples``."""
    pairs = [encode(p.tokenizer, s.text) for s in samples]
    stats = EpochStats()
    for _ in range(epochs):
        for idx in _batches(len(pairs), batch_size, p.rng):
            loss, ft, _ = _step(p, [pairs[i] for i in idx], (), 1.0)
            stats.loss += loss
            stats.ft += ft
            stats.steps += 1
    if stats.steps:
        stats.loss /= stats.steps
        stats.ft /= stats.steps
    return stats


def train_transfer(
    p: Participant, public: Sequence[Sample], selected: SelectiveKnowledgeSet, epochs: int, batch_size: int, lam: float
) -> EpochStats:
    """``lam * FT + (1 - lam) * KD`` over public minibatches; the KD term of a
    batch uses the batch samples that were admitted into ``selected``."""
    pairs = [encode(p.tokenizer, s.text) for s in public]
    teacher = {r.sample_id: r.logits for r in selected.records}
    stats = EpochStats()
    for _ in range(epochs):
        for idx in _batches(len(pairs), batch_size, p.rng):
            ce = [pairs[i] for i in idx]
            kd = [(pairs[i][0], teacher[public[i].sample_id]) for i in idx if public[i].sample_id in teacher]
            loss, ft, kdl = _step(p, ce, kd, lam)
            stats.loss += loss
            stats.ft += ft
            stats.kd += kdl
            stats.steps += 1
    if stats.steps:
        stats.loss /= stats.steps
        stats.ft /= stats.steps
        stats.kd /= stats.steps
    return stats


def local_losses(p: Participant, public: Sequence[Sample], loss_norm: str = "token") -> dict[int, float]:
    """Recipient-side per-sample losses on the public set."""
    pairs = [encode(p.tokenizer, s.text) for s in public]
    per_sample, _, _ = evaluate_positions(p.model, pairs)
    if loss_norm == "char":
        scale = np.array([len(x) / len(s.text) for s, (x, _) in zip(public, pairs)])
        per_sample = per_sample * scale
    return {s.sample_id: float(v) for s, v in zip(public, per_sample)}


def knowledge_set(p: Participant, public: Sequence[Sample], cfg: FedConfig, round: int) -> KnowledgeSet:
    ks = build_knowledge_set(p.model, public, cfg.k_top, p.pid, round)
    if cfg.loss_norm == "token":
        return ks
    texts = {s.sample_id: s.text for s in public}
    records = tuple(
        kn.KnowledgeRecord(
            r.sample_id,
            float(np.float32(r.loss * r.logits.n_positions / len(texts[r.sample_id]))),
            r.logits,
        )
        for r in ks.records
    )
    return KnowledgeSet(ks.origin, ks.round, ks.vocab_id, ks.k_top, records)


# -- protocol operations ----------------------------------------------------------------


@dataclass
class RoundLog:
    round: int
    participant: int
    role: str
    mode: str
    ta_loss: float = 0.0
    ft_loss: float = 0.0
    kd_loss: float = 0.0
    combined_loss: float = 0.0
    selected: int = 0
    eval_accuracy: float = 0.0
    eval_perplexity: float = 0.0
    upload_floats: int = 0
    download_floats: int = 0
    upload_bytes: int = 0
    download_bytes: int = 0


CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [f.name for f in dataclasses.fields(RoundLog)]


def client_update1(client: Participant, public: Sequence[Sample], cfg: FedConfig, round: int):
    """Steps 1-2: private fine-tuning, then the client's knowledge set."""
    stats = train_ce(client, client.private, cfg.E, cfg.batch_size)
    return knowledge_set(client, public, cfg, round), stats


def server_update(
    server: Participant, client_sets: Sequence[KnowledgeSet], public: Sequence[Sample],
    client_tokenizers: dict[int, TokenizerSpec], cfg: FedConfig, round: int,
):
    """Steps 4-7. Returns the server knowledge set, transfer stats and the
    selective set size."""
    origins = sorted(ks.origin for ks in client_sets)
    if origins != list(range(1, cfg.K + 1)):
        raise ProtocolError(f"server needs knowledge from clients 1..{cfg.K}, got {origins}")
    aligned = [align_knowledge_set(ks, client_tokenizers[ks.origin], server.tokenizer, public) for ks in client_sets]
    selected = dual_min_ce(local_losses(server, public, cfg.loss_norm), aligned)
    if not len(selected):
        log.info("round %d: server selective set is empty; KD term is zero", round)
    if server.frozen:
        stats = EpochStats()
    else:
        stats = train_transfer(server, public, selected, cfg.R, cfg.batch_size, cfg.lam)
    return knowledge_set(server, public, cfg, round), stats, len(selected)


def client_update2(client: Participant, server_set: KnowledgeSet, public: Sequence[Sample],
                   server_tokenizer: TokenizerSpec, cfg: FedConfig):
    """Steps 9-11: align the server knowledge, select, and transfer."""
    aligned = align_knowledge_set(server_set, server_tokenizer, client.tokenizer, public)
    selected = dual_min_ce(local_losses(client, public, cfg.loss_norm), [aligned])
    stats = train_transfer(client, public, selected, cfg.E, cfg.batch_size, cfg.lam)
    return stats, len(selected)


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    payload: bytes


@dataclass
class RunResult:
    world: World
    logs: list[RoundLog]
    traffic: list[Message] = field(default_factory=list)
    events: list[tuple] = field(default_factory=list)

    def final_metrics(self) -> dict[int, dict]:
        out = {}
        for p in self.world.participants():
            m = evaluate(p.model, self.world.data.eval_global)
            row = {"role": p.role, "accuracy": m["accuracy"], "perplexity": m["perplexity"]}
            if p.role == "client":
                loc = evaluate(p.model, p.local_eval)
                row.update(local_accuracy=loc["accuracy"], local_perplexity=loc["perplexity"])
            out[p.pid] = row
        return out


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _guard(round: int, pid: int, fn: Callable, *args):
    try:
        return fn(*args)
    except (FloatingPointError, ValueError, ProtocolError) as exc:
        raise RunAborted(str(exc), round, pid) from exc


def _eval_row(row: RoundLog, p: Participant, data: WorldData) -> RoundLog:
    m = evaluate(p.model, data.eval_global)
    row.eval_accuracy, row.eval_perplexity = m["accuracy"], m["perplexity"]
    return row


def run_fedmkt(config: FedConfig, world: World, freeze_server: bool = False) -> RunResult:
    """Full FedMKT (or LLM2SLM with ``freeze_server``) over ``config.T`` rounds."""
    config.validate()
    server, clients, public = world.server, world.clients, world.public
    server.frozen = freeze_server
    result = RunResult(world, [])
    ev = result.events
    mode = "llm2slm" if freeze_server else config.mode
    client_toks = {c.pid: c.tokenizer for c in clients}
    for t in range(1, config.T + 1):
        ev.append((t, "step1-2", "clients"))
        ups = _map(lambda c: _guard(t, c.pid, client_update1, c, public, config, t), clients, config.workers)
        blobs = []
        for c, (ks, _) in zip(clients, ups):
            blob = serialize_knowledge(ks)
            result.traffic.append(Message(t, c.pid, 0, blob))
            blobs.append(blob)
        ev.append((t, "step3", "upload"))
        received = [deserialize_knowledge(b) for b in blobs]
        ev.append((t, "step4-7", "server"))
        s0, sstats, n_sel = _guard(t, 0, server_update, server, received, public, client_toks, config, t)
        s0_blob = serialize_knowledge(s0)
        for c in clients:
            result.traffic.append(Message(t, 0, c.pid, s0_blob))
        ev.append((t, "step8", "broadcast"))
        s0_size = payload_size(s0)
        downs = _map(
            lambda c: _guard(t, c.pid, client_update2, c, deserialize_knowledge(s0_blob), public, server.tokenizer, config),
            clients, config.workers,
        )
        ev.append((t, "step9-11", "clients"))
        up_sizes = [payload_size(ks) for ks, _ in ups]
        srow = RoundLog(
            t, 0, "server", mode, ft_loss=sstats.ft, kd_loss=sstats.kd, combined_loss=sstats.loss, selected=n_sel,
            upload_floats=s0_size.n_floats * len(clients), upload_bytes=s0_size.n_bytes * len(clients),
            download_floats=sum(s.n_floats for s in up_sizes), download_bytes=sum(s.n_bytes for s in up_sizes),
        )
        result.logs.append(_eval_row(srow, server, world.data))
        for c, (_, st1), (st2, sel), size in zip(clients, ups, downs, up_sizes):
            row = RoundLog(
                t, c.pid, "client", mode, ta_loss=st1.loss, ft_loss=st2.ft, kd_loss=st2.kd,
                combined_loss=st2.loss, selected=sel,
                upload_floats=size.n_floats, upload_bytes=size.n_bytes,
                download_floats=s0_size.n_floats, download_bytes=s0_size.n_bytes,
            )
            result.logs.append(_eval_row(row, c, world.data))
        log.info("round %d done: server acc %.3f", t, result.logs[-len(clients) - 1].eval_accuracy)
    return result


def _check_homogeneous(clients: Sequence[Participant]) -> None:
    first = clients[0].model
    for c in clients[1:]:
        m = c.model
        if (
            m.tokenizer != first.tokenizer
            or m.dim != first.dim
            or m.adapter.rank != first.adapter.rank
            or m.adapter.alpha != first.adapter.alpha
            or m.base.digest() != first.base.digest()
        ):
            raise ConfigError("fedavg requires identical client architectures and frozen bases")


def fedavg_aggregate(adapters: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Uniform elementwise mean of the adapter factors."""
    A = np.mean(np.stack([a.A for a in adapters]), axis=0)
    B = np.mean(np.stack([a.B for a in adapters]), axis=0)
    return A, B


def run_baseline(config: FedConfig, world: World) -> RunResult:
    config.validate()
    mode = config.mode
    result = RunResult(world, [])
    server, clients = world.server, world.clients
    if mode == "zero_shot":
        return result
    if mode == "fedmkt":
        return run_fedmkt(config, world)
    if mode == "llm2slm":
        return run_fedmkt(config, world, freeze_server=True)
    if mode == "standalone":
        for t in range(1, config.T + 1):
            stats = _map(lambda c: train_ce(c, c.private, config.E, config.batch_size), clients, config.workers)
            for c, st in zip(clients, stats):
                row = RoundLog(t, c.pid, "client", mode, ta_loss=st.loss, combined_loss=st.loss)
                result.logs.append(_eval_row(row, c, world.data))
        return result
    if mode == "centralized":
        pooled = sorted(
            [*world.public, *(s for c in clients for s in c.private)], key=lambda s: s.sample_id
        )
        for t in range(1, config.T + 1):
            st = train_ce(server, pooled, config.R, config.batch_size)
            row = RoundLog(t, 0, "server", mode, ft_loss=st.loss, combined_loss=st.loss)
            result.logs.append(_eval_row(row, server, world.data))
        return result
    if mode == "fedavg":
        _check_homogeneous(clients)
        n_floats = clients[0].model.adapter.n_params
        for t in range(1, config.T + 1):
            stats = _map(lambda c: train_ce(c, c.private, config.E, config.batch_size), clients, config.workers)
            A, B = fedavg_aggregate([c.model.adapter for c in clients])
            for c in clients:
                c.model.adapter.A[...] = A
                c.model.adapter.B[...] = B
            for c, st in zip(clients, stats):
                row = RoundLog(
                    t, c.pid, "client", mode, ta_loss=st.loss, combined_loss=st.loss,
                    upload_floats=n_floats, download_floats=n_floats,
                    upload_bytes=8 * n_floats, download_bytes=8 * n_floats,
                )
                result.logs.append(_eval_row(row, c, world.data))
        return result
    raise ConfigError(f"mode: unknown mode {mode!r}")


def run(config: FedConfig, world: Optional[World] = None) -> RunResult:
    world = world if world is not None else build_world(config)
    if config.mode == "fedmkt":
        return run_fedmkt(config, world)
    return run_baseline(config, world)


def communication_cost(logs: Sequence[RoundLog]) -> dict[str, int]:
    """Totals over the run: client uploads and server broadcasts."""
    up = sum(r.upload_floats for r in logs if r.role == "client")
    down = sum(r.download_floats for r in logs if r.role == "client")
    up_b = sum(r.upload_bytes for r in logs if r.role == "client")
    down_b = sum(r.download_bytes for r in logs if r.role == "client")
    return {
        "upload_floats": up,
        "download_floats": down,
        "total_floats": up + down,
        "upload_bytes": up_b,
        "download_bytes": down_b,
        "total_bytes": up_b + down_b,
    }
