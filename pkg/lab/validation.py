"""The invariant suite run by ``validate``.

Each check draws its instances from a fixed Philox stream, so two runs report identical numbers.
``max_margin`` is the largest (observed - allowed) over a check's instances; it is <= 0 when the check passes.
"""
import logging
import math
from dataclasses import asdict, dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from attention.dense import causal_scores, default_scale, dense_attention, truncation_bound
from attention.metric import MetricConfig, pool_antidiagonal_scores
from attention.schedule import (
    BudgetSchedule,
    cost_decay,
    cost_uniform,
    drift_allowance,
    enumerated_cost,
    realized_fraction,
    uniform_equivalent,
)
from attention.sparse import plan_selections, selection_keep_sets, selection_truncation_bound, stem_forward
from core.errors import UsageError
from core.log import get_logger
from core.tensors import gen_gaussian_qkv, gen_outlier_qkv, philox
from lab.oracles import (
    NESTING_TOLERANCE,
    grow_keep_sets,
    random_keep_sets,
    verify_bound_optimality,
    verify_nested_bound,
    verify_rank_equivalence,
    verify_separable_bound,
)
from lab.selection import compare_sam_oam
from lab.toy_model import asymmetry_study

logger = get_logger(__name__)

SUITE_STREAM = 1000


@dataclass(frozen=True)
class CheckOutcome:
    check: str
    instances: int
    violations: int
    max_margin: float
    passed: bool

    def to_row(self) -> Dict:
        return asdict(self)


class _Tally:
    def __init__(self, name: str):
        self.name = name
        self.instances = 0
        self.violations = 0
        self.max_margin = -math.inf

    def record(self, observed: float, allowed: float):
        margin = observed - allowed
        self.instances += 1
        self.max_margin = max(self.max_margin, margin)
        if margin > 0:
            self.violations += 1

    def outcome(self) -> CheckOutcome:
        return CheckOutcome(self.name, self.instances, self.violations, float(self.max_margin), self.violations == 0)


def _rng(index: int) -> np.random.Generator:
    return philox(SUITE_STREAM, index)


def check_full_budget(instances: int = 50) -> CheckOutcome:
    tally = _Tally("full_budget_equivalence")
    rng = _rng(1)
    for i in range(instances):
        n = int(rng.integers(1, 1025))
        d = int(rng.integers(1, 65))
        B = int(rng.choice([8, 16, 32, 64, 128]))
        q, k, v = gen_gaussian_qkv(n, d, seed=i, stream=1)
        n_blk = -(-n // B)
        sched = BudgetSchedule(n=n, k_start=n_blk, mu=1.0, block_size=B)
        o = stem_forward(q, k, v, sched, MetricConfig(block_size=B)).o
        err = float(np.max(np.abs(o.astype(np.float64) - dense_attention(q, k, v).o)))
        tally.record(err, 1e-5)
    return tally.outcome()


def check_separable_bound(instances: int = 200) -> CheckOutcome:
    tally = _Tally("separable_bound")
    rng = _rng(2)
    for i in range(instances):
        n = int(rng.integers(1, 33))
        d = int(rng.integers(1, 17))
        q, k, v = gen_gaussian_qkv(n, d, seed=i, stream=2)
        probs = dense_attention(q, k, v).probs
        keep = random_keep_sets(n, rng, float(rng.random()))
        result = verify_separable_bound(probs, v, keep)
        tally.record(result.lhs, result.bound + 1e-5)
        nested = verify_nested_bound(probs, v, keep, grow_keep_sets(keep, rng, float(rng.random())))
        tally.record(nested.outer_bound, nested.inner_bound + NESTING_TOLERANCE)
    return tally.outcome()


def check_selection_bound(instances: int = 50) -> CheckOutcome:
    """Block selections as token keep sets: the blockwise bound equals the token-level one and still holds."""
    tally = _Tally("selection_bound")
    rng = _rng(10)
    for i in range(instances):
        n = int(rng.integers(1, 129))
        d = int(rng.integers(1, 17))
        B = int(rng.choice([2, 4, 8]))
        n_blk = -(-n // B)
        q, k, v = gen_gaussian_qkv(n, d, seed=i, stream=10)
        sched = BudgetSchedule.unguarded(n, int(rng.integers(1, n_blk + 1)), 0.7, block_size=B, block_mode=True)
        selections = plan_selections(q, k, v, sched, MetricConfig(block_size=B))
        keep = selection_keep_sets(selections, B, n)
        probs = dense_attention(q, k, v).probs
        token_bound = truncation_bound(probs, v, keep)
        blockwise = selection_truncation_bound(q, k, v, selections, B)
        tally.record(abs(blockwise - token_bound), 1e-5 * (1.0 + token_bound))
        result = verify_separable_bound(probs, v, keep)
        tally.record(result.lhs, result.bound + 1e-5)
    return tally.outcome()


def check_rank_equivalence(instances: int = 500) -> CheckOutcome:
    tally = _Tally("rank_equivalence")
    rng = _rng(3)
    for i in range(instances):
        n = int(rng.integers(2, 65))
        d = int(rng.integers(1, 33))
        q, k, v = gen_gaussian_qkv(n, d, seed=i, stream=3)
        result = verify_rank_equivalence(q[n - 1], k, v, default_scale(d))
        tally.record(0.0 if result.passed else 1.0, 0.0)
    return tally.outcome()


def check_bound_optimality(instances: int = 100) -> CheckOutcome:
    tally = _Tally("bound_optimality")
    rng = _rng(4)
    for i in range(instances):
        n = int(rng.integers(1, 13))
        budget = int(rng.integers(1, 5))
        q, k, v, _ = gen_outlier_qkv(n, int(rng.integers(2, 9)), seed=i, outlier_frac=0.25, outlier_gain=4.0, stream=4)
        result = verify_bound_optimality(q, k, v, dense_attention(q, k, v).probs, budget)
        tally.record(result.worst_gap, 1e-6)
    return tally.outcome()


def check_cost_algebra(instances: int = 200) -> CheckOutcome:
    """Closed-form decay cost against enumeration, mu=1 identity and the 0.85 uniform equivalent."""
    tally = _Tally("cost_algebra")
    rng = _rng(5)
    mus = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    for i in range(instances):
        n = int(rng.integers(1, 4097))
        k_start = int(rng.integers(1, n + 1))
        mu = mus[i % len(mus)]
        cost, _ = cost_decay(n, k_start, mu)
        for anchor in ("triangle", "origin"):
            sched = BudgetSchedule.unguarded(n, k_start, mu, decay_anchor=anchor)
            tally.record(abs(cost - enumerated_cost(sched)), drift_allowance(sched))
        tally.record(abs(cost_decay(n, k_start, 1.0)[0] - cost_uniform(n, k_start)), 0.0)
        k100 = int(rng.integers(1, 101)) * 20
        tally.record(abs(uniform_equivalent(k100, 0.7) - 0.85 * k100), 1e-9)
    return tally.outcome()


def check_asymmetry(seeds: int = 20, workers: int = 1) -> CheckOutcome:
    summary = asymmetry_study(list(range(seeds)), workers=workers, num_layers=4, d=32, n=128)
    failed = sum(not t.passed for t in summary.trials)
    return CheckOutcome("propagation_asymmetry", seeds, failed, 0.9 - summary.pass_rate, summary.pass_rate >= 0.9)


def check_oam_vs_sam(seeds: int = 20) -> CheckOutcome:
    """Bound ordering on every seed; mean unrenormalized MSE ordering across seeds."""
    tally = _Tally("oam_vs_sam")
    trunc_sam, trunc_oam = [], []
    for seed in range(seeds):
        q, k, v, _ = gen_outlier_qkv(128, 64, seed, outlier_frac=0.1, outlier_gain=8.0)
        result = compare_sam_oam(q, k, v, 16, 1.0)
        tally.record(result.bound_oam - result.bound_sam, 1e-6)
        trunc_sam.append(result.sam.mse_truncated)
        trunc_oam.append(result.oam.mse_truncated)
    tally.record(float(np.mean(trunc_oam) - np.mean(trunc_sam)), 0.0)
    return tally.outcome()


def check_budget_anchor() -> CheckOutcome:
    tally = _Tally("budget_anchor")
    tally.record(realized_fraction(BudgetSchedule.reference_default(8192)), 0.31)
    return tally.outcome()


def check_antidiagonal_pooling(instances: int = 50) -> CheckOutcome:
    tally = _Tally("antidiagonal_pooling")
    rng = _rng(9)
    for i in range(instances):
        n = int(rng.integers(1, 257))
        d = int(rng.integers(1, 17))
        B = int(rng.choice([2, 4, 8, 16]))
        q, k, _ = gen_gaussian_qkv(n, d, seed=i, stream=9)
        pooled = pool_antidiagonal_scores(q, k, B).astype(np.float64)
        tally.record(float(np.max(np.abs(pooled - antidiagonal_oracle(q, k, B)))), 1e-6)
    return tally.outcome()


def antidiagonal_oracle(q, k, block_size: int) -> np.ndarray:
    """Brute-force mean of the admissible anti-diagonal entries of the exact causal score matrix."""
    n = q.shape[0]
    s = causal_scores(q, k, default_scale(q.shape[1])).astype(np.float64)
    n_blk = -(-n // block_size)
    out = np.full((n_blk, n_blk), float(np.finfo(np.float32).min))
    for I in range(n_blk):
        for J in range(n_blk):
            vals = []
            for t in range(block_size):
                i, j = I * block_size + t, J * block_size + block_size - 1 - t
                if i < n and j < n and j <= i:
                    vals.append(s[i, j])
            if vals:
                out[I, J] = float(np.mean(vals))
    return out


def check_determinism(workers: int = 4) -> CheckOutcome:
    tally = _Tally("determinism")
    q, k, v = gen_gaussian_qkv(512, 32, seed=0)
    sched = BudgetSchedule(n=512, k_start=10, block_size=32)
    config = MetricConfig(block_size=32)
    single = stem_forward(q, k, v, sched, config, workers=1)
    multi = stem_forward(q, k, v, sched, config, workers=workers)
    same = np.array_equal(single.o, multi.o) and single.stats.selections == multi.stats.selections
    tally.record(0.0 if same else 1.0, 0.0)
    return tally.outcome()


CHECKS: Dict[str, Callable[..., CheckOutcome]] = {
    "full_budget_equivalence": check_full_budget,
    "separable_bound": check_separable_bound,
    "selection_bound": check_selection_bound,
    "rank_equivalence": check_rank_equivalence,
    "bound_optimality": check_bound_optimality,
    "cost_algebra": check_cost_algebra,
    "propagation_asymmetry": check_asymmetry,
    "oam_vs_sam": check_oam_vs_sam,
    "budget_anchor": check_budget_anchor,
    "antidiagonal_pooling": check_antidiagonal_pooling,
    "determinism": check_determinism,
}

QUICK_SIZES = {
    "full_budget_equivalence": 5,
    "separable_bound": 20,
    "selection_bound": 10,
    "rank_equivalence": 50,
    "bound_optimality": 10,
    "cost_algebra": 20,
    "propagation_asymmetry": 20,
    "oam_vs_sam": 5,
    "antidiagonal_pooling": 5,
}


def run_suite(only: Optional[Sequence[str]] = None, quick: bool = False, workers: int = 1) -> List[CheckOutcome]:
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks: {', '.join(unknown)}")
    outcomes = []
    for name in names:
        fn = CHECKS[name]
        if name == "propagation_asymmetry":
            fn = partial(fn, workers=workers)
        outcome = fn(QUICK_SIZES[name]) if quick and name in QUICK_SIZES else fn()
        logger.log(logging.INFO if outcome.passed else logging.WARNING, "%s: %d instances, %d violations", name, outcome.instances, outcome.violations)
        outcomes.append(outcome)
    return outcomes
