"""Tiny causal LMs with a frozen base and a trainable low-rank adapter.

Architecture, per position (rows are positions)::

    e = E[x]                                  # (n, d)  frozen embedding
    u = e @ W.T + (alpha / r) * (e @ A.T) @ B.T
    h = tanh(u)
    z = h @ O                                 # (n, V)  frozen output projection

Only ``A`` (r x d) and ``B`` (d x r) are trained. Gradients are exact and
computed by hand; nothing here touches the base parameters after creation.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .sparse import SparseLogits
from .tokenizers import TokenizerSpec


class ModelError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; the run must abort."""


@dataclass(frozen=True, eq=False)
class BaseParams:
    embedding: np.ndarray  # (V, d)
    hidden: np.ndarray  # (d, d)
    output: np.ndarray  # (d, V)

    def __post_init__(self):
        for name in ("embedding", "hidden", "output"):
            arr = np.array(getattr(self, name), dtype=np.float64, order="C")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        v, d = self.embedding.shape
        if self.hidden.shape != (d, d) or self.output.shape != (d, v):
            raise ModelError("inconsistent base parameter shapes")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.embedding, self.hidden, self.output):
            h.update(arr.tobytes())
        return h.hexdigest()

    @property
    def n_params(self) -> int:
        return self.embedding.size + self.hidden.size + self.output.size

    def logits(self, ids) -> np.ndarray:
        """Base-only forward, no adapter involved."""
        e = self.embedding[np.asarray(ids, dtype=np.int64)]
        return np.tanh(e @ self.hidden.T) @ self.output

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "BaseParams":
        return cls(
            embedding=rng.normal(0.0, 1.0, (vocab_size, dim)),
            hidden=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)),
            output=rng.normal(0.0, 1.0, (dim, vocab_size)),
        )


@dataclass
class LowRankAdapter:
    A: np.ndarray  # (r, d)
    B: np.ndarray  # (d, r)
    alpha: float = 16.0

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64)
        self.B = np.array(self.B, dtype=np.float64)
        r, d = self.A.shape
        if self.B.shape != (d, r):
            raise ModelError("adapter factors have mismatched shapes")
        if r > d:
            raise ModelError("adapter rank cannot exceed the hidden width")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.A.copy(), self.B.copy(), self.alpha)

    def digest(self) -> str:
        return hashlib.sha256(self.A.tobytes() + self.B.tobytes()).hexdigest()

    def delta(self) -> np.ndarray:
        return self.scale * self.B @ self.A

    @classmethod
    def init(cls, dim: int, rank: int, alpha: float, rng: np.random.Generator) -> "LowRankAdapter":
        bound = 1.0 / np.sqrt(dim)
        return cls(rng.uniform(-bound, bound, (rank, dim)), np.zeros((dim, rank)), alpha)


@dataclass
class LanguageModel:
    base: BaseParams
    adapter: LowRankAdapter
    tokenizer: TokenizerSpec
    context_window: int = 256

    def __post_init__(self):
        if self.base.vocab_size != len(self.tokenizer.vocab):
            raise ModelError("base vocabulary size does not match the tokenizer")
        if self.adapter.A.shape[1] != self.base.dim:
            raise ModelError("adapter width does not match the base model")

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_params(self) -> int:
        return self.base.n_params + self.adapter.n_params

    def trainable_fraction(self) -> float:
        return self.adapter.n_params / self.n_params

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ModelError("expected a non-empty 1-d id sequence")
        if len(ids) > self.context_window:
            raise ModelError(f"sequence of length {len(ids)} exceeds context window {self.context_window}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ModelError("token id outside the vocabulary")
        return ids

    def _hidden(self, ids: np.ndarray):
        e = self.base.embedding[ids]
        ea = e @ self.adapter.A.T
        u = e @ self.base.hidden.T + self.adapter.scale * (ea @ self.adapter.B.T)
        return e, ea, np.tanh(u)

    def forward(self, ids) -> np.ndarray:
        """Dense logits, one row per position; row t scores token t+1."""
        ids = self._check_ids(ids)
        _, _, h = self._hidden(ids)
        return h @ self.base.output

    def forward_positions(self, ids: np.ndarray) -> np.ndarray:
        """Forward over a flat batch of positions without the window check."""
        _, _, h = self._hidden(np.asarray(ids, dtype=np.int64))
        return h @ self.base.output


def forward(model: LanguageModel, ids) -> np.ndarray:
    return model.forward(ids)


# -- losses ---------------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def ce_loss(model: LanguageModel, sample) -> float:
    """Mean next-token cross-entropy of ``(input_ids, target_ids)``."""
    inputs, targets = sample
    if len(inputs) != len(targets):
        raise ModelError("input and target lengths differ")
    logp = log_softmax(model.forward(inputs))
    return float(-logp[np.arange(len(targets)), np.asarray(targets)].mean())


def _sparse_teacher(target: SparseLogits) -> np.ndarray:
    """Restricted-support softmax of the teacher entries (float64)."""
    counts = target.counts()
    if np.any(counts == 0):
        raise ModelError("teacher position with empty support")
    rows = target.rows()
    vals = target.values.astype(np.float64)
    starts = target.offsets[:-1]
    m = np.maximum.reduceat(vals, starts)
    ex = np.exp(vals - m[rows])
    return ex / np.add.reduceat(ex, starts)[rows]


def kd_loss(model: LanguageModel, ids, target: SparseLogits) -> float:
    """Mean over positions of ``-sum_j q_j log p_j`` with ``q`` the teacher
    softmax over its own sparse support (temperature 1)."""
    if target.n_positions != len(ids):
        raise ModelError("teacher positions do not match the input length")
    q = _sparse_teacher(target)
    logp = log_softmax(model.forward(ids))
    rows = target.rows()
    per_entry = -q * logp[rows, target.token_ids]
    return float(np.bincount(rows, per_entry, minlength=len(ids)).mean())


def sparse_entropy(target: SparseLogits) -> float:
    """Mean per-position entropy of the teacher distribution."""
    q = _sparse_teacher(target)
    rows = target.rows()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(q > 0, -q * np.log(q), 0.0)
    return float(np.bincount(rows, h, minlength=target.n_positions).mean())


@dataclass
class Objective:
    """Value and adapter gradient of ``lam * FT + (1 - lam) * KD``."""

    loss: float
    ft_loss: float
    kd_loss: float
    grad_A: np.ndarray
    grad_B: np.ndarray


def loss_and_grad(
    model: LanguageModel,
    ce_samples: Sequence = (),
    kd_samples: Sequence = (),
    lam: float = 1.0,
) -> Objective:
    """Combined objective over a minibatch.

    ``ce_samples`` are ``(input_ids, target_ids)`` pairs, ``kd_samples`` are
    ``(input_ids, SparseLogits)`` pairs. Each term is the mean over its samples
    of the per-sample position mean; an empty term contributes zero. With
    ``lam == 1`` the KD term is skipped entirely (and FT for ``lam == 0``).
    """
    use_ft = lam != 0.0 and len(ce_samples) > 0
    use_kd = lam != 1.0 and len(kd_samples) > 0
    inputs, parts = [], []
    if use_ft:
        inputs += [np.asarray(x, dtype=np.int64) for x, _ in ce_samples]
    if use_kd:
        inputs += [np.asarray(x, dtype=np.int64) for x, _ in kd_samples]
    d = model.dim
    if not inputs:
        return Objective(0.0, 0.0, 0.0, np.zeros_like(model.adapter.A), np.zeros_like(model.adapter.B))
    ids = np.concatenate(inputs)
    e, ea, h = model._hidden(ids)
    z = h @ model.base.output
    logp = log_softmax(z)
    p = np.exp(logp)
    gz = np.zeros_like(z)
    ft = kd = 0.0
    off = 0
    if use_ft:
        n_ce = len(ce_samples)
        lens = np.array([len(x) for x, _ in ce_samples])
        tgt = np.concatenate([np.asarray(y, dtype=np.int64) for _, y in ce_samples])
        if len(tgt) != lens.sum():
            raise ModelError("input and target lengths differ")
        n = int(lens.sum())
        w = np.repeat(1.0 / (n_ce * lens), lens)
        rows = np.arange(off, off + n)
        ft = float(-(w * logp[rows, tgt]).sum())
        gz[rows] = (lam * w)[:, None] * p[rows]
        gz[rows, tgt] -= lam * w
        off += n
    if use_kd:
        n_kd = len(kd_samples)
        for x, teacher in kd_samples:
            n = len(x)
            if teacher.n_positions != n:
                raise ModelError("teacher positions do not match the input length")
            q = _sparse_teacher(teacher)
            r = teacher.rows()
            wt = 1.0 / (n_kd * n)
            kd += float(-(q * logp[off + r, teacher.token_ids]).sum() * wt)
            block = gz[off : off + n]
            block += ((1.0 - lam) * wt) * p[off : off + n]
            np.add.at(block, (r, teacher.token_ids), -(1.0 - lam) * wt * q)
            off += n
    if use_ft and use_kd:
        loss = lam * ft + (1.0 - lam) * kd
    elif use_ft:
        loss = lam * ft
    else:
        loss = (1.0 - lam) * kd
    gh = gz @ model.base.output.T
    gu = gh * (1.0 - h * h)
    s = model.adapter.scale
    grad_B = s * gu.T @ ea
    grad_A = s * (gu @ model.adapter.B).T @ e
    if not (np.isfinite(loss) and np.all(np.isfinite(grad_A)) and np.all(np.isfinite(grad_B))):
        raise NonFiniteError("non-finite loss or gradient")
    return Objective(loss, ft, kd, grad_A, grad_B)


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments for one adapter."""

    m_A: np.ndarray
    v_A: np.ndarray
    m_B: np.ndarray
    v_B: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    step: int = 0

    @classmethod
    def for_adapter(cls, adapter: LowRankAdapter, lr: float, **kw) -> "OptimizerState":
        return cls(
            np.zeros_like(adapter.A), np.zeros_like(adapter.A),
            np.zeros_like(adapter.B), np.zeros_like(adapter.B),
            lr=lr, **kw,
        )


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        c = max_norm / norm
        return [g * c for g in grads], norm
    return list(grads), norm


def optimizer_step(adapter: LowRankAdapter, grad_A: np.ndarray, grad_B: np.ndarray, state: OptimizerState) -> float:
    """One clipped AdamW step, in place. Returns the pre-clip gradient norm."""
    if grad_A.shape != adapter.A.shape or grad_B.shape != adapter.B.shape:
        raise ModelError("gradient shapes do not match the adapter")
    if not (np.all(np.isfinite(grad_A)) and np.all(np.isfinite(grad_B))):
        raise NonFiniteError("non-finite gradient")
    (gA, gB), norm = clip_by_global_norm([grad_A, grad_B], state.max_grad_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in ((adapter.A, gA, state.m_A, state.v_A), (adapter.B, gB, state.m_B, state.v_B)):
        p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return norm


# -- knowledge records ---------------------------------------------------------


def knowledge_record(model: LanguageModel, sample, k_top: int) -> tuple[float, SparseLogits]:
    """Per-sample CE loss plus per-position top-``k_top`` logits."""
    inputs, targets = sample
    z = model.forward(inputs)
    logp = log_softmax(z)
    loss = float(-logp[np.arange(len(targets)), np.asarray(targets)].mean())
    return loss, SparseLogits.top_k(z, k_top, targets)


def evaluate_positions(model: LanguageModel, samples: Iterable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched forward over many samples.

    Returns per-sample mean CE, per-position correctness flags and the
    per-position sample index.
    """
    samples = list(samples)
    lens = np.array([len(x) for x, _ in samples])
    ids = np.concatenate([np.asarray(x, dtype=np.int64) for x, _ in samples])
    tgt = np.concatenate([np.asarray(y, dtype=np.int64) for _, y in samples])
    z = model.forward_positions(ids)
    logp = log_softmax(z)
    nll = -logp[np.arange(len(tgt)), tgt]
    owner = np.repeat(np.arange(len(samples)), lens)
    per_sample = np.bincount(owner, nll, minlength=len(samples)) / lens
    correct = z.argmax(axis=1) == tgt
    return per_sample, correct, owner


# -- construction & checkpoints --------------------------------------------------


def new_model(
    tokenizer: TokenizerSpec,
    dim: int,
    rng: np.random.Generator,
    rank: int = 8,
    alpha: float = 16.0,
    context_window: int = 256,
    base_rng: Optional[np.random.Generator] = None,
) -> LanguageModel:
    base = BaseParams.random(len(tokenizer.vocab), dim, base_rng if base_rng is not None else rng)
    adapter = LowRankAdapter.init(dim, min(rank, dim), alpha, rng)
    return LanguageModel(base, adapter, tokenizer, context_window)


CKPT_MAGIC = b"FMKTCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LanguageModel) -> bytes:
    """Binary layout (little endian)::

        magic[8] version:u32 V:u32 d:u32 r:u32 context:u32 alpha:f64
        embedding f64[V*d] hidden f64[d*d] output f64[d*V] A f64[r*d] B f64[d*r]
        tok_len:u32 tokenizer_spec_utf8[tok_len]
    """
    buf = io.BytesIO()
    v, d, r = model.vocab_size, model.dim, model.adapter.rank
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IIIIId", CKPT_VERSION, v, d, r, model.context_window, model.adapter.alpha))
    for arr in (model.base.embedding, model.base.hidden, model.base.output, model.adapter.A, model.adapter.B):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tok = model.tokenizer.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(tok)))
    buf.write(tok)
    return buf.getvalue()


def load_checkpoint(data: bytes) -> LanguageModel:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    head = struct.calcsize("<IIIIId")
    if len(data) < 8 + head:
        raise CheckpointError("truncated checkpoint header")
    version, v, d, r, ctx, alpha = struct.unpack_from("<IIIIId", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8 + head
    arrays = []
    for shape in ((v, d), (d, d), (d, v), (r, d), (d, r)):
        n = shape[0] * shape[1] * 8
        if len(data) < off + n:
            raise CheckpointError("truncated checkpoint arrays")
        arrays.append(np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape).copy())
        off += n
    if len(data) < off + 4:
        raise CheckpointError("truncated checkpoint tokenizer")
    (tlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + tlen:
        raise CheckpointError("checkpoint length mismatch")
    tok = TokenizerSpec.from_text(data[off:].decode("utf-8"))
    base = BaseParams(arrays[0], arrays[1], arrays[2])
    return LanguageModel(base, LowRankAdapter(arrays[3], arrays[4], alpha), tok, ctx)
