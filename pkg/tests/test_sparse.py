import numpy as np
import pytest

from attention.dense import default_scale, dense_attention, mse
from attention.metric import MetricConfig
from attention.schedule import BudgetSchedule, block_budgets, stem_complexity
from attention.sparse import (
    GuardWindows,
    SelectionRow,
    plan_selections,
    scored_pairs,
    select_blocks,
    selection_keep_sets,
    selection_truncation_bound,
    sparse_block_attention,
    sparse_block_probs,
    sparse_forward,
    stem_forward,
    stem_forward_heads,
)
from core.errors import ScheduleError, SelectionError
from core.tensors import gen_gaussian_qkv, gen_outlier_qkv


def full_schedule(n, block_size):
    n_blk = -(-n // block_size)
    return BudgetSchedule(n=n, k_start=n_blk, mu=1.0, block_size=block_size)


class TestSelectBlocks:
    def test_top_k_by_metric(self):
        row = select_blocks(np.array([5.0, 1.0, 3.0]), budget=2, query_block=2)
        assert row.blocks == (0, 2)
        assert row.forced == (False, False)

    def test_ties_go_to_lower_index(self):
        assert select_blocks(np.array([1.0, 1.0, 1.0, 1.0]), 2, 3).blocks == (0, 1)

    def test_guards_come_first(self):
        metric = np.array([0.0, 9.0, 8.0, 7.0, 0.0, 0.0])
        row = select_blocks(metric, budget=3, query_block=5, guards=GuardWindows(1, 1))
        assert row.blocks == (0, 1, 5)
        assert row.forced == (True, False, True)

    def test_guard_overage_is_recorded(self):
        row = select_blocks(np.zeros(10), budget=2, query_block=9, guards=GuardWindows(2, 2))
        assert row.blocks == (0, 1, 8, 9)
        assert row.overage == 2

    def test_never_exceeds_admissible(self):
        row = select_blocks(np.zeros(8), budget=6, query_block=2)
        assert row.blocks == (0, 1, 2)

    def test_invalid_inputs(self):
        with pytest.raises(SelectionError):
            select_blocks(np.zeros(3), budget=0, query_block=1)
        with pytest.raises(SelectionError):
            select_blocks(np.zeros(3), budget=1, query_block=3)


class TestStemForward:
    @pytest.mark.parametrize("n,d,block_size", [(1, 1, 8), (37, 5, 8), (64, 16, 16), (130, 8, 32)])
    def test_full_budget_matches_dense(self, n, d, block_size):
        q, k, v = gen_gaussian_qkv(n, d, seed=n)
        result = stem_forward(q, k, v, full_schedule(n, block_size), MetricConfig(block_size=block_size))
        assert np.max(np.abs(result.o.astype(np.float64) - dense_attention(q, k, v).o)) < 1e-5
        assert result.stats.realized_budget_fraction == pytest.approx(1.0)

    def test_stats_follow_complexity_model(self):
        q, k, v = gen_gaussian_qkv(256, 16, seed=4)
        sched = BudgetSchedule(n=256, k_start=3, mu=0.7, block_size=16, init_guard_blocks=1, local_guard_blocks=1, min_total_blocks=0)
        stats = stem_forward(q, k, v, sched, MetricConfig(block_size=16)).stats
        assert 0.0 < stats.realized_budget_fraction < 1.0
        assert stats.k_avg == stats.scored_pairs / 256
        assert stats.estimated_flops == stem_complexity(256, 16, 16, stats.k_avg)
        budgets = block_budgets(sched)
        for sel in stats.selections:
            assert len(sel) <= max(budgets[sel.query_block], 2)
            assert sel.query_block in sel.blocks

    def test_sparse_output_rows_are_convex_combinations(self):
        q, k, v = gen_gaussian_qkv(128, 8, seed=2)
        sched = BudgetSchedule(n=128, k_start=2, mu=0.7, block_size=16, init_guard_blocks=1, local_guard_blocks=1, min_total_blocks=0)
        o = stem_forward(q, k, v, sched, MetricConfig(block_size=16)).o.astype(np.float64)
        v64 = v.astype(np.float64)
        for i in (0, 50, 127):
            assert np.all(o[i] <= v64[: i + 1].max(axis=0) + 1e-5)
            assert np.all(o[i] >= v64[: i + 1].min(axis=0) - 1e-5)

    @pytest.mark.parametrize("guards", [(4, 4, 54), (0, 0, 0), (1, 1, 0)])
    def test_doubling_k_start_lowers_error_every_seed(self, guards):
        init, local, minimum = guards
        for seed in range(5):
            q, k, v = gen_gaussian_qkv(512, 32, seed)
            dense_o = dense_attention(q, k, v).o
            errors = []
            for k_start in (8, 16):
                sched = BudgetSchedule(
                    n=512, k_start=k_start, mu=0.7, block_size=32,
                    init_guard_blocks=init, local_guard_blocks=local, min_total_blocks=minimum,
                )
                errors.append(mse(dense_o, stem_forward(q, k, v, sched, MetricConfig(block_size=32)).o))
            assert errors[1] < errors[0], (seed, errors)

    def test_worker_count_does_not_change_output(self):
        q, k, v = gen_gaussian_qkv(300, 16, seed=11)
        sched = BudgetSchedule(n=300, k_start=3, block_size=32, init_guard_blocks=1, local_guard_blocks=1, min_total_blocks=0)
        config = MetricConfig(block_size=32)
        one = stem_forward(q, k, v, sched, config, workers=1)
        many = stem_forward(q, k, v, sched, config, workers=4)
        assert np.array_equal(one.o, many.o)
        assert one.stats.selections == many.stats.selections

    def test_mismatched_schedule_is_rejected(self):
        q, k, v = gen_gaussian_qkv(64, 4, seed=0)
        with pytest.raises(ScheduleError):
            stem_forward(q, k, v, BudgetSchedule(n=65, k_start=1, block_size=16), MetricConfig(block_size=16))
        with pytest.raises(ScheduleError):
            stem_forward(q, k, v, BudgetSchedule(n=64, k_start=1, block_size=16), MetricConfig(block_size=8))

    def test_heads_run_independently(self):
        heads = [gen_gaussian_qkv(64, 8, seed=1, stream=h) for h in range(2)]
        sched = BudgetSchedule(n=64, k_start=2, block_size=16)
        results = stem_forward_heads(heads, sched, MetricConfig(block_size=16))
        alone = stem_forward(*heads[1], sched, MetricConfig(block_size=16))
        assert np.array_equal(results[1].o, alone.o)


def masked_softmax_attention(q, k, v, mask):
    s = q.astype(np.float64) @ k.astype(np.float64).T / np.sqrt(q.shape[1])
    s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v.astype(np.float64)


def sink_and_diagonal(query_block):
    blocks = (0,) if query_block == 0 else (0, query_block)
    return SelectionRow(query_block, blocks, (False,) * len(blocks), len(blocks))


class TestBlockAttention:
    def test_matches_masked_dense(self):
        q, k, v = gen_gaussian_qkv(32, 8, seed=11)
        sel = SelectionRow(5, (0, 2, 5), (False, False, False), 3)
        out = sparse_block_attention(q[20:24], k, v, sel, block_size=4)
        rows = np.arange(20, 24)[:, None]
        cols = np.arange(32)[None, :]
        mask = (cols <= rows) & np.isin(cols // 4, sel.blocks)
        expected = masked_softmax_attention(q[20:24], k, v, mask)
        np.testing.assert_allclose(out.astype(np.float64), expected, atol=1e-6)

    def test_forward_matches_masked_dense(self):
        q, k, v = gen_gaussian_qkv(32, 8, seed=12)
        selections = [sink_and_diagonal(qb) for qb in range(8)]
        out = sparse_forward(q, k, v, selections, block_size=4)
        rows = np.arange(32)[:, None]
        cols = np.arange(32)[None, :]
        mask = (cols <= rows) & ((cols // 4 == 0) | (cols // 4 == rows // 4))
        np.testing.assert_allclose(out.astype(np.float64), masked_softmax_attention(q, k, v, mask), atol=1e-6)

    def test_first_row_of_diagonal_block_copies_its_value(self):
        q, k, v = gen_gaussian_qkv(16, 4, seed=3)
        out = sparse_block_attention(q[:4], k, v, sink_and_diagonal(0), block_size=4)
        assert np.array_equal(out[0], v[0])

    def test_probabilities_sum_to_one_over_selected_keys(self):
        q, k, v = gen_gaussian_qkv(64, 8, seed=5)
        sel = SelectionRow(6, (1, 3, 6), (False, False, False), 3)
        p, keys = sparse_block_probs(q[48:56], k, sel, block_size=8, scale=default_scale(8))
        assert keys.tolist() == list(range(8, 16)) + list(range(24, 32)) + list(range(48, 56))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        rows = np.arange(48, 56)[:, None]
        assert np.all(p[keys[None, :] > rows] == 0.0)
        assert np.all(p[keys[None, :] <= rows] > 0.0)


class TestSelectionHelpers:
    def test_scored_pairs_counts_causal_pairs(self):
        sels = [SelectionRow(0, (0,), (False,), 1), SelectionRow(1, (0, 1), (False, False), 2)]
        # block 0: 4*5/2 = 10; block 1 (rows 4..6): 3*4 + 3*4/2 = 18
        assert scored_pairs(sels, 4, 7) == 28

    def test_keep_sets_mirror_selection(self):
        sels = [SelectionRow(0, (0,), (False,), 1), SelectionRow(1, (1,), (False,), 1)]
        keep = selection_keep_sets(sels, 2, 4)
        assert [r.tolist() for r in keep.rows] == [[0], [0, 1], [2], [2, 3]]

    def test_sparse_forward_needs_every_block(self):
        q, k, v = gen_gaussian_qkv(8, 2, seed=0)
        with pytest.raises(SelectionError):
            sparse_forward(q, k, v, [SelectionRow(0, (0,), (False,), 1)], 4)

    def test_non_causal_selection_is_rejected(self):
        q, k, v = gen_gaussian_qkv(8, 2, seed=0)
        sels = [SelectionRow(0, (1,), (False,), 1), SelectionRow(1, (1,), (False,), 1)]
        with pytest.raises(SelectionError):
            sparse_forward(q, k, v, sels, 4)

    def test_full_selection_has_zero_bound(self):
        q, k, v = gen_gaussian_qkv(48, 4, seed=6)
        sels = plan_selections(q, k, v, full_schedule(48, 16), MetricConfig(block_size=16))
        assert selection_truncation_bound(q, k, v, sels, 16) == 0.0

    def test_partial_selection_has_positive_bound(self):
        q, k, v, _ = gen_outlier_qkv(256, 16, seed=3, outlier_frac=0.1, outlier_gain=8.0)
        sched = BudgetSchedule(n=256, k_start=3, mu=0.7, block_size=16, init_guard_blocks=0, local_guard_blocks=1, min_total_blocks=0)
        sels = plan_selections(q, k, v, sched, MetricConfig(beta=1.0, block_size=16))
        assert selection_truncation_bound(q, k, v, sels, 16) > 0.0
