import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attention.schedule import (
    BudgetSchedule,
    block_budget,
    block_budgets,
    cost_decay,
    cost_report,
    cost_uniform,
    dense_complexity,
    drift_allowance,
    enumerated_cost,
    realized_fraction,
    stem_complexity,
    tpd_budget,
    tpd_budgets,
    uniform_equivalent,
)
from core.errors import ScheduleError


def unguarded_blocks(n_blk, k_start, mu, block_size=128, **extra):
    fields = dict(init_guard_blocks=0, local_guard_blocks=0, min_total_blocks=0)
    fields.update(extra)
    return BudgetSchedule(n=n_blk * block_size, k_start=k_start, mu=mu, block_size=block_size, **fields)


class TestTokenBudget:
    def test_decays_linearly_from_k_start(self):
        sched = BudgetSchedule.unguarded(1000, 200, 0.7)
        assert tpd_budget(1000, sched) == 140
        assert tpd_budget(500, sched) == 170
        assert sched.k_end_tokens == pytest.approx(140.0)

    def test_clamped_to_causal_prefix(self):
        sched = BudgetSchedule.unguarded(1000, 200, 0.7)
        assert tpd_budget(1, sched) == 1
        assert tpd_budget(150, sched) == 150

    def test_vector_matches_scalar(self):
        sched = BudgetSchedule.unguarded(300, 64, 0.6)
        vec = tpd_budgets(sched)
        assert [tpd_budget(i, sched) for i in (1, 64, 65, 150, 300)] == [vec[i - 1] for i in (1, 64, 65, 150, 300)]

    def test_mu_one_is_uniform(self):
        sched = BudgetSchedule.unguarded(500, 100, 1.0)
        assert np.all(tpd_budgets(sched)[99:] == 100)

    def test_position_out_of_range(self):
        with pytest.raises(ScheduleError):
            tpd_budget(0, BudgetSchedule.unguarded(10, 5, 0.7))

    def test_triangle_anchor_holds_until_k_start(self):
        sched = BudgetSchedule.unguarded(1000, 200, 0.7, decay_anchor="triangle")
        assert tpd_budget(200, sched) == 200
        assert tpd_budget(1000, sched) == 140

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 3000), frac=st.floats(0.0, 1.0), mu=st.floats(0.05, 1.0))
    def test_budget_in_range_and_non_increasing_past_k_start(self, n, frac, mu):
        k_start = max(1, int(frac * n))
        k = tpd_budgets(BudgetSchedule.unguarded(n, k_start, mu))
        positions = np.arange(1, n + 1)
        assert np.all((k >= 1) & (k <= positions))
        tail = k[k_start - 1 :]
        assert np.all(np.diff(tail) <= 0)


class TestBlockBudget:
    def test_last_block_of_decayed_schedule(self):
        assert block_budget(99, unguarded_blocks(100, 20, 0.7)) == 14

    def test_no_decay(self):
        assert block_budget(19, unguarded_blocks(20, 8, 1.0)) == 8

    def test_first_block_capped_at_one(self):
        assert block_budget(0, unguarded_blocks(100, 20, 0.7)) == 1

    def test_guard_total_is_a_floor(self):
        sched = BudgetSchedule(n=64 * 16, k_start=2, mu=0.7, block_size=16, init_guard_blocks=4, local_guard_blocks=4, min_total_blocks=0)
        budgets = block_budgets(sched)
        assert np.all(budgets[8:] == 8)
        assert np.all(budgets[:8] == np.arange(1, 9))

    def test_row_minimum(self):
        sched = unguarded_blocks(64, 4, 0.7, min_total_blocks=20, min_budget_mode="row")
        budgets = block_budgets(sched)
        assert np.all(budgets == np.minimum(20, np.arange(1, 65)))

    def test_total_minimum_is_met(self):
        sched = unguarded_blocks(64, 2, 0.7, min_total_blocks=500)
        budgets = block_budgets(sched)
        assert budgets.sum() >= 500
        assert np.all(budgets <= np.arange(1, 65))
        # every scheduled row is 1 block; the common floor rises to 9
        assert budgets.tolist() == np.minimum(9, np.arange(1, 65)).tolist()
        assert budgets.sum() == 540

    def test_total_minimum_beyond_dense_runs_dense(self):
        sched = unguarded_blocks(4, 1, 0.7, min_total_blocks=54)
        assert block_budgets(sched).tolist() == [1, 2, 3, 4]

    def test_dense_fallback_is_not_a_warning(self, caplog):
        sched = unguarded_blocks(5, 1, 0.55, min_total_blocks=54)
        with caplog.at_level(logging.INFO, logger="stem"):
            assert block_budgets(sched).tolist() == [1, 2, 3, 4, 5]
        assert any("running dense" in r.getMessage() for r in caplog.records)
        assert not [r for r in caplog.records if r.levelno >= logging.WARNING]

    def test_returned_budgets_are_a_copy(self):
        sched = unguarded_blocks(8, 2, 0.7)
        first = block_budgets(sched)
        first[0] = 99
        assert block_budgets(sched)[0] == 1

    def test_reference_default_budget_anchor(self):
        sched = BudgetSchedule.reference_default(8192)
        assert sched.n_blk == 64
        assert sched.k_start == pytest.approx(12.8)
        assert realized_fraction(sched) == pytest.approx(598 / 2080)
        assert realized_fraction(sched) <= 0.31

    def test_long_context_k_start_fraction(self):
        assert BudgetSchedule.reference_default(32768).k_start == pytest.approx(25.6)

    @pytest.mark.parametrize(
        "fields",
        [
            dict(n=0, k_start=1),
            dict(n=10, k_start=0.5),
            dict(n=10, k_start=2, mu=0.0),
            dict(n=10, k_start=2, mu=1.5),
            dict(n=10, k_start=2, block_size=0),
            dict(n=10, k_start=2, init_guard_blocks=-1),
            dict(n=10, k_start=2, decay_anchor="middle"),
        ],
    )
    def test_invalid_schedules(self, fields):
        with pytest.raises(ScheduleError):
            BudgetSchedule(**fields)


class TestCostAlgebra:
    def test_uniform_cost(self):
        assert cost_uniform(1000, 200) == 180000

    def test_decay_cost_and_savings(self):
        cost, savings = cost_decay(1000, 200, 0.7)
        assert savings == pytest.approx(24000)
        assert cost == pytest.approx(156000)

    def test_no_decay_equals_uniform(self):
        cost, savings = cost_decay(777, 123, 1.0)
        assert savings == 0
        assert cost == cost_uniform(777, 123)

    def test_uniform_equivalent(self):
        assert uniform_equivalent(100, 0.7) == 85
        assert uniform_equivalent(200, 0.5) == 150
        assert uniform_equivalent(40, 1.0) == 40

    def test_invalid_cost_inputs(self):
        with pytest.raises(ScheduleError):
            cost_uniform(10, 11)
        with pytest.raises(ScheduleError):
            cost_decay(10, 5, 0.0)

    def test_complexity_example(self):
        assert stem_complexity(1024, 64, 128, 256) == 67_904_000

    def test_dense_complexity(self):
        assert dense_complexity(1024, 64) == 4 * 1024 * 1024 * 64 + 3 * 1024 * 1024

    def test_triangle_drift_within_n(self):
        for n, k_start, mu in [(1000, 200, 0.7), (4096, 512, 0.5), (300, 300, 0.9), (50, 1, 0.6)]:
            sched = BudgetSchedule.unguarded(n, k_start, mu, decay_anchor="triangle")
            cost, _ = cost_decay(n, k_start, mu)
            assert abs(cost - enumerated_cost(sched)) <= drift_allowance(sched) == n

    def test_origin_drift_within_allowance(self):
        sched = BudgetSchedule.unguarded(1000, 200, 0.7)
        cost, _ = cost_decay(1000, 200, 0.7)
        assert abs(cost - enumerated_cost(sched)) <= drift_allowance(sched)

    def test_cost_report_fields(self):
        report = cost_report(BudgetSchedule.unguarded(1000, 200, 0.7), d=64)
        assert report.decay_savings == pytest.approx(24000)
        assert report.uniform_cost == 180000
        assert report.drift <= report.drift_allowance
        assert report.speedup_vs_dense == pytest.approx(report.dense_flops / report.stem_flops)
        assert report.speedup_vs_dense > 1.0

    def test_cost_report_rejects_k_start_beyond_n(self):
        with pytest.raises(ScheduleError):
            cost_report(BudgetSchedule(n=100, k_start=2, block_size=128), d=8)
