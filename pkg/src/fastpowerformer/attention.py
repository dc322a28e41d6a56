"""Dense scaled dot-product attention and multi-round LSH attention.

LSH attention here is computed exactly: every query attends, with a single
softmax, over the union of positions that shared its bucket in any hash
round.  Bucket membership comes from angular (random-rotation) hashing of the
unit-normalised keys, with queries sharing the keys' codes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, masked_fill, matmul, mul, softmax, swapaxes

__all__ = [
    "AttentionCost",
    "BucketAssignment",
    "track_cost",
    "dense_attention",
    "lsh_hash",
    "hash_keys",
    "multi_round_pool",
    "pool_mask",
    "lsh_attention",
]


@dataclass
class AttentionCost:
    """Accumulated count of evaluated query/key score entries.

    ``token_count`` is the length of the most recently attended sequence and
    ``calls`` the number of sequences attended (batch items count separately).
    """

    score_entries: int = 0
    token_count: int = 0
    calls: int = 0

    def reset(self) -> None:
        self.score_entries = 0
        self.token_count = 0
        self.calls = 0


_meters = threading.local()


def _active_meters() -> list[AttentionCost]:
    st = getattr(_meters, "stack", None)
    if st is None:
        st = _meters.stack = []
    return st


@contextmanager
def track_cost(cost: Optional[AttentionCost] = None):
    """Collect attention cost for every attention call in the block."""
    cost = cost if cost is not None else AttentionCost()
    st = _active_meters()
    st.append(cost)
    try:
        yield cost
    finally:
        # dataclass equality compares counts, so remove by identity
        del st[next(i for i, m in enumerate(st) if m is cost)]


def _record(entries: int, tokens: int, calls: int = 1) -> None:
    for m in _active_meters():
        m.score_entries += int(entries)
        m.token_count = int(tokens)
        m.calls += calls


@dataclass(frozen=True)
class BucketAssignment:
    """Per-round bucket ids for one sequence; ``codes`` has shape (n_rounds, L)."""

    n_rounds: int
    n_buckets: int
    codes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[0] != self.n_rounds:
            raise ShapeError(f"codes must be ({self.n_rounds}, L), got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_buckets):
            raise ValueError(f"bucket codes must lie in [0, {self.n_buckets})")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def length(self) -> int:
        return self.codes.shape[1]


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention expects rank-3 q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    if v.shape[:2] != q.shape[:2]:
        raise ShapeError(f"v {v.shape} must share batch and length with q {q.shape}")


def dense_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over all L x L pairs."""
    _check_qkv(q, k, v)
    B, L, d = q.shape
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    _record(B * L * L, L, B)
    return matmul(softmax(scores, axis=-1), v)


def _rotations(d: int, n_buckets: int, n_rounds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_rounds, d, n_buckets // 2))


def _angular_codes(x: np.ndarray, rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = x / np.where(norm > 0, norm, 1.0)
    proj = np.einsum("...ld,rdh->...rlh", unit, rot)
    return np.argmax(np.concatenate([proj, -proj], axis=-1), axis=-1)


def _check_buckets(n_buckets: int, n_rounds: int) -> None:
    if n_buckets < 2 or n_buckets % 2:
        raise ValueError(f"n_buckets must be even and >= 2, got {n_buckets}")
    if n_rounds < 1:
        raise ValueError(f"n_rounds must be >= 1, got {n_rounds}")


def lsh_hash(vectors, n_buckets: int, n_rounds: int, seed: int) -> BucketAssignment:
    """Angular LSH of an (L, d) array: argmax over [xR; -xR] per round."""
    _check_buckets(n_buckets, n_rounds)
    x = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"lsh_hash expects (L, d) vectors, got {x.shape}")
    rot = _rotations(x.shape[1], n_buckets, n_rounds, seed)
    return BucketAssignment(n_rounds, n_buckets, _angular_codes(x, rot))


def hash_keys(k, n_buckets: int, n_rounds: int, seed: int) -> list[BucketAssignment]:
    """Hash every sequence of a (B, L, d) key batch with one shared rotation draw."""
    _check_buckets(n_buckets, n_rounds)
    x = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    rot = _rotations(x.shape[-1], n_buckets, n_rounds, seed)
    codes = _angular_codes(x, rot)
    return [BucketAssignment(n_rounds, n_buckets, c) for c in codes]


def multi_round_pool(assignment: BucketAssignment, i: int) -> set[int]:
    """Positions sharing a bucket with ``i`` in at least one round."""
    L = assignment.length
    if not 0 <= i < L:
        raise IndexError(f"position {i} out of range for length {L}")
    codes = assignment.codes
    hits = (codes == codes[:, i : i + 1]).any(axis=0)
    hits[i] = True
    return set(np.flatnonzero(hits).tolist())


def pool_mask(assignment: BucketAssignment) -> tuple[np.ndarray, int]:
    """Full (L, L) pool membership mask plus the per-round score-entry count."""
    mask, entries = _kernels.bucket_pool_mask(assignment.codes, assignment.n_buckets)
    mask = mask.copy()
    np.fill_diagonal(mask, True)  # a position always sees itself
    return mask, entries


def lsh_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_buckets: int = 4,
    n_rounds: int = 4,
    seed: int = 0,
    assignments: Optional[Sequence[BucketAssignment]] = None,
) -> Tensor:
    """Attention restricted to multi-round LSH pools.

    ``n_buckets=1`` is the degenerate single-bucket mode, identical to dense
    attention.  Precomputed ``assignments`` (one per batch item) bypass hashing.
    """
    _check_qkv(q, k, v)
    B, L, d = q.shape
    if assignments is None:
        if n_buckets == 1:
            assignments = [BucketAssignment(1, 1, np.zeros((1, L), dtype=np.int64))] * B
        else:
            assignments = hash_keys(k, n_buckets, n_rounds, seed)
    if len(assignments) != B:
        raise ShapeError(f"need {B} bucket assignments, got {len(assignments)}")
    masks = np.empty((B, L, L), dtype=bool)
    entries = 0
    for b, a in enumerate(assignments):
        if a.length != L:
            raise ShapeError(f"assignment length {a.length} != sequence length {L}")
        masks[b], e = pool_mask(a)
        entries += e
    _record(entries, L, B)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    scores = masked_fill(scores, ~masks, -np.inf)
    return matmul(softmax(scores, axis=-1), v)
