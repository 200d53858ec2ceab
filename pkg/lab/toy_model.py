"""A small randomly initialized causal transformer used to watch sparsification errors propagate.

Layer l attends with Q = V W_q, K = V W_k over its values V^(l) and hands on
V^(l+1) = T(O^(l)), where T(x) = (h + tanh(h W_1) W_2) W_v and h = x + x W_o. V^(0) is the input X.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from attention.dense import (
    aggregate,
    causal_mask,
    default_scale,
    dense_attention,
    exact_scores64,
    mse,
    softmax_rows64,
)
from attention.metric import MetricConfig, block_metric, num_blocks, summarize_blocks
from attention.sparse import SelectionRow, sparse_forward
from core.errors import InvalidDimensionError, UsageError
from core.log import get_logger
from core.tensors import Matrix, as_matrix, gaussian_matrix, philox

logger = get_logger(__name__)

MODEL_STREAM = 10
INPUT_STREAM = 11

PruneMode = Literal["control", "drop_columns", "sparse_sam", "sparse_oam"]


@dataclass(frozen=True)
class LayerWeights:
    w_q: Matrix
    w_k: Matrix
    w_o: Matrix
    w_1: Matrix
    w_2: Matrix
    w_v: Matrix


@dataclass(frozen=True)
class ToyTransformer:
    layers: Tuple[LayerWeights, ...]
    d: int
    d_ff: int
    seed: int

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def transition(self, layer: int, x: np.ndarray) -> Matrix:
        w = self.layers[layer]
        x64 = np.asarray(x, dtype=np.float64)
        h = x64 + x64 @ w.w_o
        ffn = np.tanh(h @ w.w_1) @ w.w_2
        return as_matrix((h + ffn) @ w.w_v, f"V{layer + 1}")

    def queries_keys(self, layer: int, values: Matrix) -> Tuple[Matrix, Matrix]:
        w = self.layers[layer]
        v64 = np.asarray(values, dtype=np.float64)
        return as_matrix(v64 @ w.w_q, "Q"), as_matrix(v64 @ w.w_k, "K")


class LayerTrace(NamedTuple):
    values: Matrix
    attention: Matrix
    output: Matrix


class ForwardTrace(NamedTuple):
    final: Matrix
    layers: Tuple[LayerTrace, ...]


@dataclass(frozen=True)
class SegmentSpec:
    layer: int
    start: int
    end: int
    mode: PruneMode = "drop_columns"
    renormalize: bool = False
    block_size: int = 16
    keep_ratio: float = 0.25
    keep_blocks: Optional[int] = None
    beta: float = 1.0

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise UsageError(f"segment [{self.start}, {self.end}) is empty or negative")
        if self.layer < 0:
            raise UsageError(f"layer must be >= 0, got {self.layer}")
        if self.mode not in ("control", "drop_columns", "sparse_sam", "sparse_oam"):
            raise UsageError(f"unknown prune mode '{self.mode}'")
        if not 0.0 <= self.keep_ratio <= 1.0:
            raise UsageError(f"keep_ratio must lie in [0, 1], got {self.keep_ratio}")
        if self.keep_blocks is not None and self.keep_blocks < 0:
            raise UsageError(f"keep_blocks must be >= 0, got {self.keep_blocks}")

    def check(self, model: ToyTransformer, n: int):
        if self.layer >= model.num_layers:
            raise UsageError(f"layer {self.layer} outside a {model.num_layers}-layer model")
        if self.end > n:
            raise UsageError(f"segment [{self.start}, {self.end}) exceeds n={n}")


@dataclass(frozen=True)
class SegmentError:
    segment: SegmentSpec
    mse_final: float
    mse_layers: Tuple[float, ...]


@dataclass(frozen=True)
class ErrorReport:
    rows: Tuple[SegmentError, ...]
    seeds: Tuple[int, ...]
    config: Dict = field(default_factory=dict)


def build_toy_model(num_layers: int, d: int, d_ff: int, seed: int) -> ToyTransformer:
    if num_layers < 1 or d < 4 or d_ff < 1:
        raise InvalidDimensionError(f"toy model needs L >= 1, d >= 4, d_ff >= 1; got L={num_layers}, d={d}, d_ff={d_ff}")
    rng = philox(seed, MODEL_STREAM)
    layers = []
    for _ in range(num_layers):
        layers.append(
            LayerWeights(
                w_q=gaussian_matrix(rng, d, d, 1.0 / math.sqrt(d)),
                w_k=gaussian_matrix(rng, d, d, 1.0 / math.sqrt(d)),
                w_o=gaussian_matrix(rng, d, d, 1.0 / math.sqrt(d)),
                w_1=gaussian_matrix(rng, d, d_ff, 1.0 / math.sqrt(d)),
                w_2=gaussian_matrix(rng, d_ff, d, 1.0 / math.sqrt(d_ff)),
                w_v=gaussian_matrix(rng, d, d, 1.0 / math.sqrt(d)),
            )
        )
    return ToyTransformer(layers=tuple(layers), d=d, d_ff=d_ff, seed=seed)


def toy_input(n: int, d: int, seed: int) -> Matrix:
    return gaussian_matrix(philox(seed, INPUT_STREAM), n, d)


def _check_input(model: ToyTransformer, x: Matrix):
    if x.ndim != 2 or x.shape[1] != model.d or x.shape[0] < 1:
        raise InvalidDimensionError(f"input must be n x {model.d}, got shape {x.shape}")


def run_layers(model: ToyTransformer, x: Matrix, attend) -> ForwardTrace:
    _check_input(model, x)
    values = as_matrix(x, "X")
    layers = []
    for layer in range(model.num_layers):
        attention = attend(layer, values)
        output = model.transition(layer, attention)
        layers.append(LayerTrace(values, attention, output))
        values = output
    return ForwardTrace(values, tuple(layers))


def _dense_layer(model: ToyTransformer, layer: int, values: Matrix) -> Matrix:
    q, k = model.queries_keys(layer, values)
    return dense_attention(q, k, values).o


def forward_dense(model: ToyTransformer, x: Matrix) -> ForwardTrace:
    return run_layers(model, x, lambda layer, values: _dense_layer(model, layer, values))


def _dropped_columns(values: Matrix, q: Matrix, k: Matrix, start: int, end: int, renormalize: bool) -> Matrix:
    n = values.shape[0]
    keep = causal_mask(n)
    keep[:, start:end] = False
    if renormalize:
        s = exact_scores64(q, k, default_scale(q.shape[1]))
        p = np.zeros((n, n))
        live = keep.any(axis=1)
        if live.any():
            p[live] = softmax_rows64(s[live], keep[live])
        return aggregate(p, values)
    probs = dense_attention(q, k, values).probs
    return aggregate(probs.p, values, keep)


def _segment_selections(values: Matrix, q: Matrix, k: Matrix, spec: SegmentSpec) -> List[SelectionRow]:
    n = values.shape[0]
    B = spec.block_size
    beta = spec.beta if spec.mode == "sparse_oam" else 0.0
    metric = block_metric(summarize_blocks(q, k, values, MetricConfig(beta=beta, block_size=B)), beta)
    selections = []
    for qb in range(num_blocks(n, B)):
        admissible = np.arange(qb + 1)
        inside = (admissible * B < spec.end) & (np.minimum((admissible + 1) * B, n) > spec.start)
        prunable = admissible[inside]
        if spec.keep_blocks is not None:
            quota = min(spec.keep_blocks, prunable.size)
        else:
            quota = math.ceil(spec.keep_ratio * prunable.size - 1e-9)
        if prunable.size and quota == 0 and not (~inside).any():
            quota = 1
        order = np.lexsort((prunable, -np.asarray(metric[qb], dtype=np.float64)[prunable]))
        kept = np.union1d(admissible[~inside], prunable[order[:quota]])
        selections.append(
            SelectionRow(query_block=qb, blocks=tuple(int(b) for b in kept), forced=tuple(bool(not inside[b]) for b in kept), budget=len(kept))
        )
    return selections


def forward_with_segment_prune(model: ToyTransformer, x: Matrix, spec: SegmentSpec) -> ForwardTrace:
    """Dense forward pass except at ``spec.layer``, where keys in [start, end) are pruned."""
    _check_input(model, x)
    spec.check(model, x.shape[0])

    def attend(layer: int, values: Matrix) -> Matrix:
        if layer != spec.layer or spec.mode == "control":
            return _dense_layer(model, layer, values)
        q, k = model.queries_keys(layer, values)
        if spec.mode == "drop_columns":
            return _dropped_columns(values, q, k, spec.start, spec.end, spec.renormalize)
        return sparse_forward(q, k, values, _segment_selections(values, q, k, spec), spec.block_size)

    return run_layers(model, x, attend)


def trace_errors(reference: ForwardTrace, pruned: ForwardTrace) -> Tuple[float, Tuple[float, ...]]:
    per_layer = tuple(mse(a.output, b.output) for a, b in zip(reference.layers, pruned.layers))
    return mse(reference.final, pruned.final), per_layer


def segment_sensitivity(
    model: ToyTransformer,
    x_batch: Sequence[Matrix],
    segments: Sequence[SegmentSpec],
    seeds: Sequence[int] = (),
) -> ErrorReport:
    """Batch-averaged final and per-layer MSE of each pruned segment against the dense pass."""
    if not x_batch:
        raise UsageError("segment_sensitivity needs at least one input")
    references = [forward_dense(model, x) for x in x_batch]
    rows = []
    for spec in segments:
        finals, layers = [], []
        for x, ref in zip(x_batch, references):
            final, per_layer = trace_errors(ref, forward_with_segment_prune(model, x, spec))
            finals.append(final)
            layers.append(per_layer)
        rows.append(SegmentError(spec, float(np.mean(finals)), tuple(float(m) for m in np.mean(layers, axis=0))))
    config = {"L": model.num_layers, "d": model.d, "d_ff": model.d_ff, "seed": model.seed, "batch": len(x_batch)}
    return ErrorReport(rows=tuple(rows), seeds=tuple(seeds), config=config)


def quartile_segments(n: int, layer: int = 0, mode: PruneMode = "drop_columns", **options) -> List[SegmentSpec]:
    """Four equal-width segments covering [0, n); the last absorbs any remainder."""
    if n < 4:
        raise UsageError(f"quartile segments need n >= 4, got {n}")
    bounds = [0, n // 4, n // 2, 3 * n // 4, n]
    return [SegmentSpec(layer, bounds[i], bounds[i + 1], mode, **options) for i in range(4)]


@dataclass(frozen=True)
class AsymmetryTrial:
    seed: int
    mse_initial: float
    mse_final: float

    @property
    def ratio(self) -> float:
        return self.mse_initial / self.mse_final if self.mse_final > 0 else math.inf

    @property
    def passed(self) -> bool:
        return self.mse_initial > self.mse_final


@dataclass(frozen=True)
class AsymmetrySummary:
    trials: Tuple[AsymmetryTrial, ...]

    @property
    def pass_rate(self) -> float:
        return sum(t.passed for t in self.trials) / len(self.trials)

    @property
    def mean_ratio(self) -> float:
        return float(np.mean([t.ratio for t in self.trials]))


def asymmetry_trial(seed: int, num_layers: int = 4, d: int = 32, n: int = 128, d_ff: Optional[int] = None, layer: int = 0) -> AsymmetryTrial:
    """Final-output MSE of pruning the first quarter of the keys versus the last quarter."""
    model = build_toy_model(num_layers, d, d_ff or 2 * d, seed)
    x = toy_input(n, d, seed)
    reference = forward_dense(model, x)
    first, *_, last = quartile_segments(n, layer)
    mse_initial, _ = trace_errors(reference, forward_with_segment_prune(model, x, first))
    mse_final, _ = trace_errors(reference, forward_with_segment_prune(model, x, last))
    return AsymmetryTrial(seed, mse_initial, mse_final)


def asymmetry_study(seeds: Sequence[int], workers: int = 1, **params) -> AsymmetrySummary:
    if not seeds:
        raise UsageError("asymmetry study needs at least one seed")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(lambda s: asymmetry_trial(s, **params), seeds))
    else:
        trials = [asymmetry_trial(s, **params) for s in seeds]
    summary = AsymmetrySummary(tuple(trials))
    logger.info("asymmetry over %d seeds: pass rate %.2f", len(trials), summary.pass_rate)
    return summary
