"""Block-wise coarse-to-fine sparse attention.

Per query block: pooled metric row -> scheduled budget -> guard-aware top-k block selection -> exact
softmax over the gathered keys (renormalized, causal inside the diagonal block) -> output rows.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from attention.dense import (
    KeepSets,
    check_qk,
    check_values,
    default_scale,
    exact_scores64,
    softmax_rows64,
)
from attention.metric import MetricConfig, block_metric, num_blocks, summarize_blocks
from attention.schedule import BudgetSchedule, block_budgets, stem_complexity
from core.errors import ScheduleError, SelectionError
from core.log import get_logger
from core.tensors import QKV, Matrix, as_matrix

logger = get_logger(__name__)


@dataclass(frozen=True)
class GuardWindows:
    init_blocks: int = 0
    local_blocks: int = 0

    def forced(self, query_block: int) -> np.ndarray:
        """Initial and most recent admissible blocks of a query block, ascending."""
        init = np.arange(min(self.init_blocks, query_block + 1))
        local = np.arange(max(0, query_block - self.local_blocks + 1), query_block + 1) if self.local_blocks else init[:0]
        return np.union1d(init, local).astype(np.int64)

    @classmethod
    def from_schedule(cls, sched: BudgetSchedule) -> "GuardWindows":
        return cls(sched.init_guard_blocks, sched.local_guard_blocks)


@dataclass(frozen=True)
class SelectionRow:
    query_block: int
    blocks: Tuple[int, ...]
    forced: Tuple[bool, ...]
    budget: int
    overage: int = 0

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class StemStats:
    n: int
    d: int
    block_size: int
    realized_budget_blocks: int
    realized_budget_fraction: float
    scored_pairs: int
    k_avg: float
    estimated_flops: float
    overage_blocks: int
    selections: Tuple[SelectionRow, ...]

    def summary(self) -> dict:
        return {
            "realized_budget_blocks": self.realized_budget_blocks,
            "realized_budget_fraction": self.realized_budget_fraction,
            "scored_pairs": self.scored_pairs,
            "k_avg": self.k_avg,
            "estimated_flops": self.estimated_flops,
            "overage_blocks": self.overage_blocks,
        }


class StemResult(NamedTuple):
    o: Matrix
    stats: StemStats


def select_blocks(
    metric_row: np.ndarray,
    budget: int,
    query_block: int,
    guards: GuardWindows = GuardWindows(),
) -> SelectionRow:
    """Guard blocks first, then the highest-metric admissible blocks (ties to the lower index)."""
    if budget < 1:
        raise SelectionError(f"budget must be >= 1, got {budget}")
    row = np.asarray(metric_row, dtype=np.float64).reshape(-1)
    if query_block < 0 or row.size <= query_block:
        raise SelectionError(f"metric row of length {row.size} has no block {query_block}")

    admissible = query_block + 1
    forced = guards.forced(query_block)
    overage = max(0, forced.size - budget)
    if overage:
        logger.debug("query block %d: %d guard blocks exceed budget %d", query_block, forced.size, budget)
    take = min(max(budget, forced.size), admissible) - forced.size

    candidates = np.setdiff1d(np.arange(admissible), forced, assume_unique=True)
    order = np.lexsort((candidates, -row[candidates]))
    chosen = candidates[order[:take]]

    blocks = np.union1d(forced, chosen)
    forced_set = set(forced.tolist())
    return SelectionRow(
        query_block=query_block,
        blocks=tuple(int(b) for b in blocks),
        forced=tuple(int(b) in forced_set for b in blocks),
        budget=int(budget),
        overage=overage,
    )


def _gather_index(selection: SelectionRow, block_size: int, n: int) -> np.ndarray:
    return np.concatenate([np.arange(b * block_size, min((b + 1) * block_size, n)) for b in selection.blocks])


def sparse_block_probs(q_block: Matrix, k: Matrix, selection: SelectionRow, block_size: int, scale: float):
    """Renormalized probabilities over the gathered keys and the gathered key positions."""
    if not selection.blocks:
        raise SelectionError(f"query block {selection.query_block}: empty selection")
    qb = selection.query_block
    if selection.blocks[-1] > qb:
        raise SelectionError(f"query block {qb}: selection {selection.blocks} is not causal")
    n = k.shape[0]
    keys = _gather_index(selection, block_size, n)
    rows = np.arange(qb * block_size, qb * block_size + q_block.shape[0])
    s = exact_scores64(q_block, np.asarray(k)[keys], scale)
    return softmax_rows64(s, keys[None, :] <= rows[:, None]), keys


def sparse_block_attention(
    q_block: Matrix,
    k: Matrix,
    v: Matrix,
    selection: SelectionRow,
    block_size: int,
    scale: Optional[float] = None,
) -> Matrix:
    scale = default_scale(k.shape[1]) if scale is None else scale
    p, keys = sparse_block_probs(q_block, k, selection, block_size, scale)
    return as_matrix(p @ np.asarray(v, dtype=np.float64)[keys], "O_block")


def scored_pairs(selections: Sequence[SelectionRow], block_size: int, n: int) -> int:
    """Causally admissible (query, key) pairs inside the selected blocks."""
    total = 0
    for sel in selections:
        lo = sel.query_block * block_size
        hi = min(lo + block_size, n)
        for b in sel.blocks:
            if b < sel.query_block:
                total += (hi - lo) * (min((b + 1) * block_size, n) - b * block_size)
            else:
                m = hi - lo
                total += m * (m + 1) // 2
    return total


def selection_keep_sets(selections: Sequence[SelectionRow], block_size: int, n: int) -> KeepSets:
    """Token-level keep sets equivalent to a block selection."""
    rows: List[np.ndarray] = []
    for sel in sorted(selections, key=lambda s: s.query_block):
        keys = _gather_index(sel, block_size, n)
        lo = sel.query_block * block_size
        for i in range(lo, min(lo + block_size, n)):
            rows.append(keys[keys <= i])
    return KeepSets(rows)


def sparse_forward(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    selections: Sequence[SelectionRow],
    block_size: int,
    scale: Optional[float] = None,
    workers: int = 1,
) -> Matrix:
    """Assembles the output of an explicit per-query-block selection."""
    check_qk(q, k)
    check_values(k, v)
    n = q.shape[0]
    if len(selections) != num_blocks(n, block_size):
        raise SelectionError(f"expected {num_blocks(n, block_size)} selection rows, got {len(selections)}")
    scale = default_scale(q.shape[1]) if scale is None else scale

    def run(sel: SelectionRow) -> Matrix:
        lo = sel.query_block * block_size
        return sparse_block_attention(q[lo : lo + block_size], k, v, sel, block_size, scale)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, selections))
    else:
        blocks = [run(sel) for sel in selections]
    return as_matrix(np.concatenate(blocks, axis=0), "O")


def plan_selections(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    schedule: BudgetSchedule,
    metric_config: MetricConfig,
) -> Tuple[SelectionRow, ...]:
    check_qk(q, k)
    check_values(k, v)
    n = q.shape[0]
    if schedule.n != n:
        raise ScheduleError(f"schedule is for n={schedule.n}, inputs have n={n}")
    if schedule.block_size != metric_config.block_size:
        raise ScheduleError(
            f"schedule block size {schedule.block_size} differs from metric block size {metric_config.block_size}"
        )
    metric = block_metric(summarize_blocks(q, k, v, metric_config), metric_config.beta)
    budgets = block_budgets(schedule)
    guards = GuardWindows.from_schedule(schedule)
    return tuple(select_blocks(metric[qb], int(budgets[qb]), qb, guards) for qb in range(schedule.n_blk))


def stem_forward(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    schedule: BudgetSchedule,
    metric_config: MetricConfig,
    workers: int = 1,
) -> StemResult:
    selections = plan_selections(q, k, v, schedule, metric_config)
    n, d = q.shape
    B = schedule.block_size
    o = sparse_forward(q, k, v, selections, B, workers=workers)

    selected = sum(len(sel) for sel in selections)
    pairs = scored_pairs(selections, B, n)
    k_avg = pairs / n
    overage = sum(sel.overage for sel in selections)
    if overage:
        logger.warning("guard windows exceeded the scheduled budget by %d blocks in total", overage)
    stats = StemStats(
        n=n,
        d=d,
        block_size=B,
        realized_budget_blocks=selected,
        realized_budget_fraction=selected / (schedule.n_blk * (schedule.n_blk + 1) // 2),
        scored_pairs=pairs,
        k_avg=k_avg,
        estimated_flops=stem_complexity(n, d, B, k_avg),
        overage_blocks=overage,
        selections=selections,
    )
    logger.debug("stem forward n=%d: %d blocks, fraction %.4f", n, selected, stats.realized_budget_fraction)
    return StemResult(o, stats)


def stem_forward_heads(
    heads: Sequence[QKV],
    schedule: BudgetSchedule,
    metric_config: MetricConfig,
    workers: int = 1,
) -> List[StemResult]:
    """Independent heads under one shared schedule."""
    return [stem_forward(h.q, h.k, h.v, schedule, metric_config, workers) for h in heads]


def selection_truncation_bound(q: Matrix, k: Matrix, v: Matrix, selections: Sequence[SelectionRow], block_size: int) -> float:
    """Separable bound of a block selection, computed one query block at a time from dense probabilities."""
    check_qk(q, k)
    check_values(k, v)
    n = q.shape[0]
    scale = default_scale(q.shape[1])
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=1)
    total = 0.0
    for sel in selections:
        lo = sel.query_block * block_size
        hi = min(lo + block_size, n)
        rows = np.arange(lo, hi)[:, None]
        admissible = np.arange(hi)[None, :] <= rows
        p = softmax_rows64(exact_scores64(q[lo:hi], k[:hi], scale), admissible)
        dropped = admissible.copy()
        dropped[:, _gather_index(sel, block_size, n)] = False
        total += float((np.where(dropped, p, 0.0) @ norms[:hi]).sum())
    return total
