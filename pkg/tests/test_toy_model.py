import numpy as np
import pytest

from core.errors import InvalidDimensionError, UsageError
from lab.toy_model import (
    SegmentSpec,
    asymmetry_study,
    asymmetry_trial,
    build_toy_model,
    forward_dense,
    forward_with_segment_prune,
    quartile_segments,
    segment_sensitivity,
    toy_input,
    trace_errors,
)


@pytest.fixture(scope="module")
def model():
    return build_toy_model(num_layers=3, d=16, d_ff=32, seed=0)


@pytest.fixture(scope="module")
def x():
    return toy_input(64, 16, seed=0)


def test_model_is_deterministic():
    a = build_toy_model(2, 8, 16, seed=4)
    b = build_toy_model(2, 8, 16, seed=4)
    assert all(np.array_equal(la.w_q, lb.w_q) and np.array_equal(la.w_2, lb.w_2) for la, lb in zip(a.layers, b.layers))
    assert a.layers[0].w_1.shape == (8, 16)
    assert a.layers[0].w_2.shape == (16, 8)


def test_model_parameter_checks():
    with pytest.raises(InvalidDimensionError):
        build_toy_model(0, 8, 16, seed=0)
    with pytest.raises(InvalidDimensionError):
        build_toy_model(2, 2, 16, seed=0)


def test_dense_trace_shapes(model, x):
    trace = forward_dense(model, x)
    assert len(trace.layers) == 3
    assert trace.final.shape == (64, 16)
    assert np.array_equal(trace.layers[1].values, trace.layers[0].output)
    assert np.array_equal(trace.final, trace.layers[-1].output)


def test_input_width_must_match(model):
    with pytest.raises(InvalidDimensionError):
        forward_dense(model, toy_input(8, 4, seed=0))


def test_control_segment_is_exact(model, x):
    spec = SegmentSpec(layer=1, start=0, end=64, mode="control")
    final, per_layer = trace_errors(forward_dense(model, x), forward_with_segment_prune(model, x, spec))
    assert final == 0.0
    assert per_layer == (0.0, 0.0, 0.0)


def test_error_starts_at_the_pruned_layer(model, x):
    spec = SegmentSpec(layer=1, start=0, end=16)
    final, per_layer = trace_errors(forward_dense(model, x), forward_with_segment_prune(model, x, spec))
    assert per_layer[0] == 0.0
    assert per_layer[1] > 0.0
    assert final > 0.0


def test_renormalized_drop_differs_from_plain_drop(model, x):
    reference = forward_dense(model, x)
    plain = forward_with_segment_prune(model, x, SegmentSpec(0, 0, 16))
    renorm = forward_with_segment_prune(model, x, SegmentSpec(0, 0, 16, renormalize=True))
    assert trace_errors(reference, plain)[0] != trace_errors(reference, renorm)[0]


def test_sparse_mode_keeping_everything_matches_dense(model, x):
    spec = SegmentSpec(0, 0, 64, mode="sparse_oam", block_size=8, keep_ratio=1.0)
    final, _ = trace_errors(forward_dense(model, x), forward_with_segment_prune(model, x, spec))
    assert final < 1e-8


def test_sparse_mode_with_fixed_block_count(model, x):
    spec = SegmentSpec(0, 0, 32, mode="sparse_sam", block_size=8, keep_blocks=1)
    final, per_layer = trace_errors(forward_dense(model, x), forward_with_segment_prune(model, x, spec))
    assert per_layer[0] > 0.0
    assert final > 0.0


def test_quartile_segments_cover_the_sequence():
    segs = quartile_segments(10)
    assert [(s.start, s.end) for s in segs] == [(0, 2), (2, 5), (5, 7), (7, 10)]
    with pytest.raises(UsageError):
        quartile_segments(3)


def test_segment_validation(model):
    with pytest.raises(UsageError):
        SegmentSpec(0, 5, 5)
    with pytest.raises(UsageError):
        SegmentSpec(0, 0, 4, mode="shuffle")
    with pytest.raises(UsageError):
        SegmentSpec(3, 0, 4).check(model, 64)
    with pytest.raises(UsageError):
        SegmentSpec(0, 0, 65).check(model, 64)


def test_sensitivity_report(model, x):
    segments = [SegmentSpec(0, 0, 64, mode="control"), *quartile_segments(64)]
    report = segment_sensitivity(model, [x, toy_input(64, 16, seed=1)], segments, seeds=[0, 1])
    assert len(report.rows) == 5
    assert report.rows[0].mse_final == 0.0
    assert all(len(r.mse_layers) == 3 for r in report.rows)
    assert report.config["batch"] == 2


def test_asymmetry_trial_fields():
    trial = asymmetry_trial(seed=0, num_layers=2, d=16, n=64)
    assert trial.mse_initial > 0.0 and trial.mse_final > 0.0
    assert trial.passed == (trial.mse_initial > trial.mse_final)


@pytest.mark.slow
def test_early_positions_matter_more():
    summary = asymmetry_study(list(range(20)), workers=4, num_layers=4, d=32, n=128)
    assert summary.pass_rate >= 0.9
    assert summary.mean_ratio > 1.0


def test_activations_stay_bounded():
    model = build_toy_model(num_layers=4, d=16, d_ff=32, seed=1)
    trace = forward_dense(model, toy_input(128, 16, seed=1))
    for layer in trace.layers:
        assert np.all(np.isfinite(layer.output))
        assert np.max(np.abs(layer.output)) < 1e3
