"""Per-position sparse (top-K) logits stored in CSR layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class SparseLogits:
    """Ragged per-position ``(token_id, logit)`` lists plus realized next tokens.

    Position ``p`` owns entries ``offsets[p]:offsets[p+1]``. Entries within a
    position are unique and sorted by descending logit. Values are float32,
    the wire precision.
    """

    offsets: np.ndarray  # int64, shape (P+1,)
    token_ids: np.ndarray  # int32, shape (nnz,)
    values: np.ndarray  # float32, shape (nnz,)
    realized: np.ndarray  # int32, shape (P,)

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.ascontiguousarray(self.offsets, dtype=np.int64))
        object.__setattr__(self, "token_ids", np.ascontiguousarray(self.token_ids, dtype=np.int32))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32))
        object.__setattr__(self, "realized", np.ascontiguousarray(self.realized, dtype=np.int32))
        if self.offsets.ndim != 1 or len(self.offsets) != len(self.realized) + 1:
            raise ValueError("offsets must have one more entry than positions")
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.token_ids):
            raise ValueError("offsets do not span the entry arrays")
        if len(self.token_ids) != len(self.values):
            raise ValueError("token_ids and values differ in length")
        if np.any(np.diff(self.offsets) < 0):
            raise ValueError("offsets must be non-decreasing")

    @property
    def n_positions(self) -> int:
        return len(self.realized)

    @property
    def n_entries(self) -> int:
        return len(self.token_ids)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def position(self, p: int) -> list[tuple[int, float]]:
        lo, hi = self.offsets[p], self.offsets[p + 1]
        return list(zip(self.token_ids[lo:hi].tolist(), self.values[lo:hi].tolist()))

    def rows(self) -> np.ndarray:
        """Position index of every entry."""
        return np.repeat(np.arange(self.n_positions), self.counts())

    def check(self) -> None:
        """Validate uniqueness and descending order within positions."""
        for p in range(self.n_positions):
            lo, hi = self.offsets[p], self.offsets[p + 1]
            ids = self.token_ids[lo:hi]
            if len(np.unique(ids)) != len(ids):
                raise ValueError(f"duplicate token ids at position {p}")
            if np.any(np.diff(self.values[lo:hi]) > 0):
                raise ValueError(f"entries not sorted by descending logit at position {p}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseLogits):
            return NotImplemented
        return (
            np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.token_ids, other.token_ids)
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.realized, other.realized)
        )

    @classmethod
    def from_lists(cls, positions, realized) -> "SparseLogits":
        """Build from ``[[(id, logit), ...], ...]``; entries are taken as given."""
        counts = [len(p) for p in positions]
        offsets = np.concatenate([[0], np.cumsum(counts, dtype=np.int64)])
        ids = [t for p in positions for t, _ in p]
        vals = [v for p in positions for _, v in p]
        return cls(offsets, np.array(ids, dtype=np.int32), np.array(vals, dtype=np.float32), realized)

    @classmethod
    def top_k(cls, logits: np.ndarray, k: int, realized) -> "SparseLogits":
        """Top-``k`` entries of each row of a dense ``(P, V)`` logit matrix.

        Ties are broken towards the smaller token id.
        """
        n, v = logits.shape
        k = min(k, v)
        # a stable sort keeps equal logits in id order, also across the k boundary
        ids = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        vals = np.take_along_axis(logits, ids, axis=1)
        offsets = np.arange(n + 1, dtype=np.int64) * k
        return cls(offsets, ids.reshape(-1), vals.reshape(-1).astype(np.float32), realized)
