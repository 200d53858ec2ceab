"""Runtime-checkable forms of the truncation bound, rank equivalence and bound optimality."""
import itertools
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from attention.dense import (
    AttentionProbs,
    KeepSets,
    aggregate,
    causal_mask,
    default_scale,
    frobenius_diff,
    truncated_output,
    truncation_bound,
)
from attention.metric import oam_token_exact, token_scores
from core.errors import InvalidDimensionError, SelectionError
from core.tensors import Matrix

BOUND_TOLERANCE = 1e-5
RANK_TIE_TOLERANCE = 1e-12
NESTING_TOLERANCE = 1e-12


@dataclass(frozen=True)
class BoundCheck:
    passed: bool
    lhs: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.lhs


def verify_separable_bound(probs: AttentionProbs, v: Matrix, keep: KeepSets, tolerance: float = BOUND_TOLERANCE) -> BoundCheck:
    """||O - O_hat||_F <= sum_i sum_{j not in S_i} P_ij ||V_j|| for the unrenormalized truncation."""
    dense_o = aggregate(probs.p, v)
    lhs = frobenius_diff(dense_o, truncated_output(probs, v, keep))
    bound = truncation_bound(probs, v, keep)
    return BoundCheck(passed=lhs <= bound + tolerance, lhs=lhs, bound=bound)


def rank_orders(scores: np.ndarray, norms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Descending orders under exp(s)*||V|| and under s + log||V||; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    nv = np.asarray(norms, dtype=np.float64)
    if s.shape != nv.shape or s.ndim != 1:
        raise InvalidDimensionError(f"scores {s.shape} and norms {nv.shape} must be matching vectors")
    idx = np.arange(s.size)
    exp_form = np.exp(s - s.max()) * nv
    log_form = s + np.log(np.maximum(nv, 1e-300))
    return np.lexsort((idx, -exp_form)), np.lexsort((idx, -log_form))


def rank_equivalent(scores: np.ndarray, norms: np.ndarray, tolerance: float = RANK_TIE_TOLERANCE) -> bool:
    """True when walking the log-form order never increases the exp-form value beyond a relative tie tolerance."""
    s = np.asarray(scores, dtype=np.float64)
    nv = np.asarray(norms, dtype=np.float64)
    _, log_order = rank_orders(s, nv)
    exp_form = np.exp(s - s.max()) * nv
    walked = exp_form[log_order]
    return bool(np.all(walked[1:] <= walked[:-1] * (1.0 + tolerance)))


@dataclass(frozen=True)
class RankCheck:
    passed: bool
    order: Tuple[int, ...]


def verify_rank_equivalence(q_row: np.ndarray, k: Matrix, v: Matrix, scale: float) -> RankCheck:
    s = token_scores(q_row, k, scale)
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=1)
    _, log_order = rank_orders(s, norms)
    return RankCheck(passed=rank_equivalent(s, norms), order=tuple(int(i) for i in log_order))


def row_bound(p_row: np.ndarray, norms: np.ndarray, kept) -> float:
    """sum over admissible j not kept of P_ij ||V_j||."""
    dropped = np.ones(p_row.size, dtype=bool)
    dropped[list(kept)] = False
    return float(np.sum(np.where(dropped, p_row, 0.0) * norms))


def exhaustive_min_bound(p_row: np.ndarray, norms: np.ndarray, k: int) -> Tuple[float, Tuple[int, ...]]:
    """Smallest row bound over every k-subset of the admissible prefix."""
    size = p_row.size
    k = min(k, size)
    best, best_set = np.inf, ()
    for subset in itertools.combinations(range(size), k):
        value = row_bound(p_row, norms, subset)
        if value < best:
            best, best_set = value, subset
    return best, best_set


@dataclass(frozen=True)
class OptimalityCheck:
    passed: bool
    rows_checked: int
    worst_gap: float


def verify_bound_optimality(q: Matrix, k: Matrix, v: Matrix, probs: AttentionProbs, budget: int, tolerance: float = 1e-6) -> OptimalityCheck:
    """Every row's exact-OAM top-k attains the exhaustive minimum of the row bound."""
    n, d = q.shape
    scale = default_scale(d)
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=1)
    worst = -np.inf
    for i in range(n):
        metric = oam_token_exact(q[i], k[: i + 1], v[: i + 1], scale)
        order = np.lexsort((np.arange(i + 1), -metric))
        chosen = order[: min(budget, i + 1)]
        p_row = np.asarray(probs.p[i, : i + 1], dtype=np.float64)
        achieved = row_bound(p_row, norms[: i + 1], chosen)
        best, _ = exhaustive_min_bound(p_row, norms[: i + 1], budget)
        worst = max(worst, achieved - best)
    return OptimalityCheck(passed=worst <= tolerance, rows_checked=n, worst_gap=float(worst))


def random_keep_sets(n: int, rng: np.random.Generator, keep_prob: float = 0.5) -> KeepSets:
    return KeepSets(np.flatnonzero(rng.random(i + 1) < keep_prob) for i in range(n))



def grow_keep_sets(keep: KeepSets, rng: np.random.Generator, add_prob: float = 0.5) -> KeepSets:
    """A superset of ``keep``: each dropped admissible key is added back with probability ``add_prob``."""
    extra = (rng.random((keep.n, keep.n)) < add_prob) & causal_mask(keep.n)
    return KeepSets.from_mask(keep.mask() | extra)


@dataclass(frozen=True)
class NestedBoundCheck:
    passed: bool
    inner_bound: float
    outer_bound: float


def verify_nested_bound(probs: AttentionProbs, v: Matrix, inner: KeepSets, outer: KeepSets) -> NestedBoundCheck:
    """Keeping more keys never raises the truncation bound."""
    if not inner.is_subset_of(outer):
        raise SelectionError("inner keep sets are not contained in the outer keep sets")
    inner_bound = truncation_bound(probs, v, inner)
    outer_bound = truncation_bound(probs, v, outer)
    return NestedBoundCheck(outer_bound <= inner_bound + NESTING_TOLERANCE, inner_bound, outer_bound)
