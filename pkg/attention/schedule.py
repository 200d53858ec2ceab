"""Token Position-Decay budget schedule and its cost algebra.

k(i) decays linearly from k_start toward mu*k_start over positions 1..n. Block budgets evaluate the
schedule at the last token of each query block, add the guard windows and the minimum total budget, and
clamp to the causally admissible block count.
"""
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, Literal, Tuple

import numpy as np

from core.config import Config
from core.errors import ScheduleError
from core.log import get_logger

logger = get_logger(__name__)


def _floor(x: float) -> int:
    return math.floor(x + Config.FLOOR_EPS)


@dataclass(frozen=True)
class BudgetSchedule:
    n: int
    k_start: float
    mu: float = Config.DECAY_RATIO
    block_size: int = Config.BLOCK_SIZE
    block_mode: bool = True
    init_guard_blocks: int = Config.INIT_GUARD_BLOCKS
    local_guard_blocks: int = Config.LOCAL_GUARD_BLOCKS
    min_total_blocks: int = Config.MIN_TOTAL_BLOCKS
    min_budget_mode: Literal["total", "row"] = "total"
    decay_anchor: Literal["origin", "triangle"] = "origin"

    def __post_init__(self):
        if self.n < 1:
            raise ScheduleError(f"n must be >= 1, got {self.n}")
        if self.block_size < 1:
            raise ScheduleError(f"block_size must be >= 1, got {self.block_size}")
        if not 0.0 < self.mu <= 1.0:
            raise ScheduleError(f"mu must lie in (0, 1], got {self.mu}")
        if not self.k_start >= 1:
            raise ScheduleError(f"k_start must be >= 1, got {self.k_start}")
        if min(self.init_guard_blocks, self.local_guard_blocks, self.min_total_blocks) < 0:
            raise ScheduleError("guard windows and minimum budget must be >= 0")
        if self.min_budget_mode not in ("total", "row"):
            raise ScheduleError(f"unknown min_budget_mode '{self.min_budget_mode}'")
        if self.decay_anchor not in ("origin", "triangle"):
            raise ScheduleError(f"unknown decay_anchor '{self.decay_anchor}'")

    @classmethod
    def reference_default(cls, n: int, block_size: int = Config.BLOCK_SIZE, **overrides) -> "BudgetSchedule":
        """Block-mode schedule with k_start = 0.2*N_blk (<=16k tokens) or 0.1*N_blk."""
        n_blk = -(-n // block_size)
        k_start = max(1.0, Config.k_start_fraction(n) * n_blk)
        return cls(n=n, k_start=k_start, block_size=block_size, block_mode=True, **overrides)

    @classmethod
    def unguarded(cls, n: int, k_start: float, mu: float, **overrides) -> "BudgetSchedule":
        """Token-mode schedule with no guards or minimum, as used by the pure cost algebra."""
        fields = dict(block_size=1, block_mode=False, init_guard_blocks=0, local_guard_blocks=0, min_total_blocks=0)
        fields.update(overrides)
        return cls(n=n, k_start=k_start, mu=mu, **fields)

    @property
    def n_blk(self) -> int:
        return -(-self.n // self.block_size)

    @property
    def k_start_tokens(self) -> float:
        return self.k_start * self.block_size if self.block_mode else float(self.k_start)

    @property
    def k_end_tokens(self) -> float:
        return self.mu * self.k_start_tokens

    @property
    def guard_blocks(self) -> int:
        return self.init_guard_blocks + self.local_guard_blocks

    def to_dict(self) -> Dict:
        return asdict(self)


def interp_tokens(position: float, sched: BudgetSchedule) -> float:
    """Unfloored linear interpolation of the budget (in tokens) at a 1-based position."""
    ks = sched.k_start_tokens
    if sched.decay_anchor == "triangle":
        if position <= ks or sched.n <= ks:
            return ks
        return ks - ks * (1.0 - sched.mu) * (position - ks) / (sched.n - ks)
    return ks - (ks * (1.0 - sched.mu) / sched.n) * position


def tpd_budget(i: int, sched: BudgetSchedule) -> int:
    if not 1 <= i <= sched.n:
        raise ScheduleError(f"position {i} outside 1..{sched.n}")
    k = _floor(interp_tokens(i, sched))
    return min(max(k, 1), i)


def tpd_budgets(sched: BudgetSchedule) -> np.ndarray:
    """k(i) for i = 1..n as an int64 vector (index 0 holds position 1)."""
    return _tpd_budgets(sched).copy()


@lru_cache(maxsize=64)
def _tpd_budgets(sched: BudgetSchedule) -> np.ndarray:
    positions = np.arange(1, sched.n + 1, dtype=np.float64)
    ks = sched.k_start_tokens
    if sched.decay_anchor == "triangle" and sched.n > ks:
        raw = np.where(positions <= ks, ks, ks - ks * (1.0 - sched.mu) * (positions - ks) / (sched.n - ks))
    elif sched.decay_anchor == "triangle":
        raw = np.full_like(positions, ks)
    else:
        raw = ks - (ks * (1.0 - sched.mu) / sched.n) * positions
    k = np.floor(raw + Config.FLOOR_EPS).astype(np.int64)
    return np.minimum(np.maximum(k, 1), np.arange(1, sched.n + 1))


def block_budget(query_block: int, sched: BudgetSchedule) -> int:
    if not 0 <= query_block < sched.n_blk:
        raise ScheduleError(f"query block {query_block} outside 0..{sched.n_blk - 1}")
    return int(_block_budgets(sched)[query_block])


def block_budgets(sched: BudgetSchedule) -> np.ndarray:
    return _block_budgets(sched).copy()


@lru_cache(maxsize=64)
def _block_budgets(sched: BudgetSchedule) -> np.ndarray:
    B = sched.block_size
    admissible = np.arange(1, sched.n_blk + 1, dtype=np.int64)
    raw = np.empty(sched.n_blk, dtype=np.int64)
    for qb in range(sched.n_blk):
        last_token = min((qb + 1) * B, sched.n)
        raw[qb] = max(_floor(interp_tokens(last_token, sched) / B), 1)

    k = np.maximum(raw, sched.guard_blocks)
    if sched.min_budget_mode == "row":
        k = np.maximum(k, sched.min_total_blocks)
    else:
        k = _apply_total_floor(np.minimum(k, admissible), admissible, sched.min_total_blocks)
    k = np.minimum(k, admissible)
    k.setflags(write=False)
    return k


def _apply_total_floor(k: np.ndarray, admissible: np.ndarray, min_total: int) -> np.ndarray:
    if int(k.sum()) >= min_total:
        return k
    dense_total = int(admissible.sum())
    if dense_total <= min_total:
        logger.info("minimum total budget %d exceeds the dense block count %d; running dense", min_total, dense_total)
        return admissible.copy()
    floor = int(k.min())
    while int(np.minimum(np.maximum(k, floor), admissible).sum()) < min_total:
        floor += 1
    logger.debug("raised per-row block floor to %d to meet minimum total %d", floor, min_total)
    return np.minimum(np.maximum(k, floor), admissible)


def realized_fraction(sched: BudgetSchedule) -> float:
    """Scheduled blocks over dense causal blocks, before any guard overage at selection time."""
    k = _block_budgets(sched)
    return float(k.sum()) / float(sched.n_blk * (sched.n_blk + 1) // 2)


def cost_uniform(n: int, k_uni: float) -> float:
    if not 1 <= k_uni <= n:
        raise ScheduleError(f"k_uni must lie in [1, n={n}], got {k_uni}")
    return n * k_uni - 0.5 * k_uni * k_uni


def cost_decay(n: int, k_start: float, mu: float) -> Tuple[float, float]:
    """Closed-form decay cost and its savings relative to the uniform cost at k_start."""
    if not 0.0 < mu <= 1.0:
        raise ScheduleError(f"mu must lie in (0, 1], got {mu}")
    if not 1 <= k_start <= n:
        raise ScheduleError(f"k_start must lie in [1, n={n}], got {k_start}")
    savings = 0.5 * k_start * (1.0 - mu) * (n - k_start)
    return cost_uniform(n, k_start) - savings, savings


def enumerated_cost(sched: BudgetSchedule) -> int:
    """Direct sum of min(k(i), i) over all positions."""
    return int(_tpd_budgets(sched).sum())


def drift_allowance(sched: BudgetSchedule) -> float:
    """Largest |closed form - enumeration| the schedule admits.

    The closed form assumes decay starts after the causal triangle; the literal schedule decays from
    position 1 and loses up to about k_start^2 (1-mu) / 2 more than it predicts.
    """
    if sched.decay_anchor == "triangle":
        return float(sched.n)
    ks = sched.k_start_tokens
    return sched.n + 0.5 * ks * ks * (1.0 - sched.mu) + ks + 1.0


def uniform_equivalent(k_start: float, mu: float) -> int:
    if not 0.0 < mu <= 1.0:
        raise ScheduleError(f"mu must lie in (0, 1], got {mu}")
    return math.floor(k_start * (1.0 + mu) / 2.0 + 0.5)


def stem_complexity(n: int, d: int, block_size: int, k_avg: float) -> float:
    if min(n, d, block_size) < 1:
        raise ScheduleError("n, d and block_size must be positive")
    if not 0 <= k_avg <= n:
        raise ScheduleError(f"k_avg must lie in [0, n={n}], got {k_avg}")
    metric = 2.0 * n * n * d / (block_size * block_size) + n * d / block_size
    return metric + 4.0 * n * k_avg * d + 3.0 * n * k_avg


def dense_complexity(n: int, d: int) -> float:
    return 4.0 * n * n * d + 3.0 * n * n


@dataclass(frozen=True)
class CostReport:
    uniform_cost: float
    decay_cost: float
    decay_savings: float
    enumerated_cost: float
    drift: float
    drift_allowance: float
    stem_flops: float
    dense_flops: float
    speedup_vs_dense: float
    block_budget_fraction: float

    def to_dict(self) -> Dict:
        return asdict(self)


def cost_report(sched: BudgetSchedule, d: int) -> CostReport:
    ks = sched.k_start_tokens
    if ks > sched.n:
        raise ScheduleError(f"k_start ({ks:g} tokens) exceeds n={sched.n}")
    uniform = cost_uniform(sched.n, ks)
    decay, savings = cost_decay(sched.n, ks, sched.mu)
    enumerated = enumerated_cost(sched)
    stem = stem_complexity(sched.n, d, sched.block_size, enumerated / sched.n)
    dense = dense_complexity(sched.n, d)
    return CostReport(
        uniform_cost=uniform,
        decay_cost=decay,
        decay_savings=savings,
        enumerated_cost=float(enumerated),
        drift=abs(decay - enumerated),
        drift_allowance=drift_allowance(sched),
        stem_flops=stem,
        dense_flops=dense,
        speedup_vs_dense=dense / stem,
        block_budget_fraction=realized_fraction(sched),
    )
