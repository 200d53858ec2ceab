"""Exact causal attention: the reference every sparse path is measured against.

Scores and sums accumulate in float64 and are stored as float32. Masked score entries hold the most
negative finite float32 instead of -inf, so max-subtraction never produces NaN.
"""
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.errors import InternalError, InvalidDimensionError, SelectionError
from core.tensors import Matrix, as_matrix

SENTINEL = np.float32(np.finfo(np.float32).min)


@dataclass(frozen=True)
class AttentionProbs:
    n: int
    p: Matrix


class DenseResult(NamedTuple):
    o: Matrix
    probs: AttentionProbs


class KeepSets:
    """Per-row sets of retained key indices, each a sorted array of causally admissible indices."""

    __slots__ = ("rows",)

    def __init__(self, rows: Iterable[Sequence[int]]):
        checked = []
        for i, row in enumerate(rows):
            arr = np.asarray(row, dtype=np.int64).reshape(-1)
            if arr.size:
                if arr[0] < 0 or arr[-1] > i:
                    raise SelectionError(f"row {i}: keep set {arr.tolist()} not within 0..{i}")
                if np.any(np.diff(arr) <= 0):
                    raise SelectionError(f"row {i}: keep set must be sorted and unique")
            arr.setflags(write=False)
            checked.append(arr)
        self.rows: Tuple[np.ndarray, ...] = tuple(checked)

    @classmethod
    def full(cls, n: int) -> "KeepSets":
        return cls(np.arange(i + 1) for i in range(n))

    @classmethod
    def empty(cls, n: int) -> "KeepSets":
        return cls(() for _ in range(n))

    @classmethod
    def from_lists(cls, rows: Iterable[Iterable[int]]) -> "KeepSets":
        """Sorts each row; duplicates and inadmissible indices are still rejected."""
        return cls(sorted(r) for r in rows)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "KeepSets":
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise InvalidDimensionError(f"keep mask must be square, got {mask.shape}")
        return cls(np.flatnonzero(mask[i]) for i in range(mask.shape[0]))

    @property
    def n(self) -> int:
        return len(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.rows], dtype=np.int64)

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        for i, row in enumerate(self.rows):
            out[i, row] = True
        return out

    def is_subset_of(self, other: "KeepSets") -> bool:
        if other.n != self.n:
            return False
        return bool(np.all(~self.mask() | other.mask()))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def check_qk(q: np.ndarray, k: np.ndarray, what: str = "Q/K"):
    if q.ndim != 2 or k.ndim != 2:
        raise InvalidDimensionError(f"{what} must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise InvalidDimensionError(f"{what} head dims differ: {q.shape[1]} vs {k.shape[1]}")
    if q.shape[0] != k.shape[0]:
        raise InvalidDimensionError(f"{what} lengths differ: {q.shape[0]} vs {k.shape[0]}")
    if q.shape[0] == 0:
        raise InvalidDimensionError(f"{what} must be non-empty")


def check_values(k: np.ndarray, v: np.ndarray):
    if v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise InvalidDimensionError(f"V must have {k.shape[0]} rows, got shape {v.shape}")


def default_scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def exact_scores64(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """scale * <q_i, k_j> for all pairs, float64, accumulated over the feature axis in ascending order."""
    q64 = np.asarray(q, dtype=np.float64)
    k64 = np.asarray(k, dtype=np.float64)
    acc = np.zeros((q64.shape[0], k64.shape[0]), dtype=np.float64)
    for t in range(q64.shape[1]):
        acc += np.multiply.outer(q64[:, t], k64[:, t])
    return acc * scale


def causal_scores(q: Matrix, k: Matrix, scale: float) -> Matrix:
    check_qk(q, k)
    if not (scale > 0 and math.isfinite(scale)):
        raise InvalidDimensionError(f"scale must be positive, got {scale}")
    s = exact_scores64(q, k, scale)
    s[~causal_mask(s.shape[0])] = SENTINEL
    return as_matrix(s, "scores")


def softmax_rows64(s64: np.ndarray, admissible: np.ndarray) -> np.ndarray:
    s64 = np.where(admissible, s64, -np.inf)
    row_max = s64.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        bad = int(np.flatnonzero(~np.isfinite(row_max[:, 0]))[0])
        raise InternalError(f"row {bad} has no admissible key")
    e = np.exp(s64 - row_max)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_causal(scores: Matrix) -> AttentionProbs:
    s = np.asarray(scores)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidDimensionError(f"scores must be square, got {s.shape}")
    s64 = s.astype(np.float64)
    admissible = causal_mask(s.shape[0]) & (s64 > float(SENTINEL))
    p = softmax_rows64(s64, admissible)
    return AttentionProbs(n=s.shape[0], p=as_matrix(p, "P"))


def aggregate(p: Matrix, v: Matrix, keep_mask: Optional[np.ndarray] = None) -> Matrix:
    p64 = np.asarray(p, dtype=np.float64)
    if keep_mask is not None:
        p64 = np.where(keep_mask, p64, 0.0)
    return as_matrix(p64 @ np.asarray(v, dtype=np.float64), "O")


def dense_attention(q: Matrix, k: Matrix, v: Matrix) -> DenseResult:
    check_qk(q, k)
    check_values(k, v)
    probs = row_softmax_causal(causal_scores(q, k, default_scale(q.shape[1])))
    return DenseResult(aggregate(probs.p, v), probs)


def dense_output_blocked(q: Matrix, k: Matrix, v: Matrix, block_rows: int = 256) -> Matrix:
    """Dense causal output computed one row block at a time, without materializing P."""
    check_qk(q, k)
    check_values(k, v)
    n, d = q.shape
    scale = default_scale(d)
    k64 = np.asarray(k, dtype=np.float64)
    v64 = np.asarray(v, dtype=np.float64)
    out = np.empty((n, v.shape[1]), dtype=np.float64)
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        s = np.asarray(q[start:stop], dtype=np.float64) @ k64[:stop].T * scale
        rows = np.arange(start, stop)[:, None]
        p = softmax_rows64(s, np.arange(stop)[None, :] <= rows)
        out[start:stop] = p @ v64[:stop]
    return as_matrix(out, "O")


def _check_keep(probs: AttentionProbs, v: Matrix, keep: KeepSets):
    if keep.n != probs.n:
        raise SelectionError(f"keep sets cover {keep.n} rows, attention has {probs.n}")
    if v.shape[0] != probs.n:
        raise InvalidDimensionError(f"V must have {probs.n} rows, got {v.shape[0]}")


def truncated_output(probs: AttentionProbs, v: Matrix, keep: KeepSets) -> Matrix:
    """Unrenormalized partial sums: O_hat_i = sum over j in S_i of P_ij V_j."""
    _check_keep(probs, v, keep)
    return aggregate(probs.p, v, keep.mask())


def truncation_bound(probs: AttentionProbs, v: Matrix, keep: KeepSets) -> float:
    """Separable bound: sum_i sum_{j not in S_i, j<=i} P_ij ||V_j||_2."""
    _check_keep(probs, v, keep)
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=1)
    dropped = causal_mask(probs.n) & ~keep.mask()
    residual = np.where(dropped, np.asarray(probs.p, dtype=np.float64), 0.0)
    return float((residual @ norms).sum())


def frobenius_diff(a: Matrix, b: Matrix) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def mse(a: Matrix, b: Matrix) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))
