"""Token-level selection experiments: SAM versus OAM, the TPD/OAM ablation and layer-wise metric loss."""
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from attention.dense import (
    AttentionProbs,
    KeepSets,
    aggregate,
    causal_mask,
    default_scale,
    dense_attention,
    exact_scores64,
    mse,
    softmax_rows64,
    truncated_output,
    truncation_bound,
)
from attention.metric import log_value_norms
from attention.schedule import BudgetSchedule, tpd_budgets, uniform_equivalent
from core.errors import InvalidDimensionError, SelectionError
from core.log import get_logger
from core.tensors import Matrix
from lab.toy_model import ToyTransformer, forward_dense, run_layers, trace_errors

logger = get_logger(__name__)

MetricName = Literal["sam", "oam"]


def token_metric(q: Matrix, k: Matrix, v: Matrix, beta: float) -> np.ndarray:
    """n x n metric s_ij + beta*max(0, log||V_j||) with -inf above the diagonal; beta=0 is SAM."""
    s = exact_scores64(q, k, default_scale(q.shape[1]))
    if beta:
        s = s + beta * np.maximum(0.0, log_value_norms(v))[None, :]
    return np.where(causal_mask(s.shape[0]), s, -np.inf)


def topk_keep(metric: np.ndarray, budgets) -> KeepSets:
    """Per-row top-k of a causal metric; ``budgets`` is one int or one per row, clamped to [1, i+1]."""
    n = metric.shape[0]
    per_row = np.broadcast_to(np.asarray(budgets, dtype=np.int64), (n,))
    if np.any(per_row < 1):
        raise SelectionError("token budgets must be >= 1")
    rows = []
    for i in range(n):
        candidates = np.arange(i + 1)
        order = np.lexsort((candidates, -metric[i, : i + 1]))
        rows.append(candidates[order[: min(int(per_row[i]), i + 1)]])
    return KeepSets.from_lists(rows)


def renormalized_output(q: Matrix, k: Matrix, v: Matrix, keep: KeepSets) -> Matrix:
    """Softmax over each row's kept keys only."""
    s = exact_scores64(q, k, default_scale(q.shape[1]))
    p = softmax_rows64(s, keep.mask())
    return aggregate(p, v)


@dataclass(frozen=True)
class SelectionScore:
    mse: float
    mse_truncated: float
    bound: float
    pairs: int


def score_selection(q: Matrix, k: Matrix, v: Matrix, dense_o: Matrix, probs: AttentionProbs, keep: KeepSets) -> SelectionScore:
    return SelectionScore(
        mse=mse(dense_o, renormalized_output(q, k, v, keep)),
        mse_truncated=mse(dense_o, truncated_output(probs, v, keep)),
        bound=truncation_bound(probs, v, keep),
        pairs=int(keep.sizes().sum()),
    )


@dataclass(frozen=True)
class MetricComparison:
    sam: SelectionScore
    oam: SelectionScore
    budget: int
    beta: float

    @property
    def bound_sam(self) -> float:
        return self.sam.bound

    @property
    def bound_oam(self) -> float:
        return self.oam.bound


def compare_sam_oam(q: Matrix, k: Matrix, v: Matrix, budget_tokens: int, beta: float) -> MetricComparison:
    n = q.shape[0]
    if not 1 <= budget_tokens <= n:
        raise SelectionError(f"budget must lie in [1, n={n}], got {budget_tokens}")
    dense = dense_attention(q, k, v)
    scores = {}
    for name, b in (("sam", 0.0), ("oam", beta)):
        keep = topk_keep(token_metric(q, k, v, b), budget_tokens)
        scores[name] = score_selection(q, k, v, dense.o, dense.probs, keep)
    logger.debug("budget %d beta %.3g: bound sam %.6g, oam %.6g", budget_tokens, beta, scores["sam"].bound, scores["oam"].bound)
    return MetricComparison(scores["sam"], scores["oam"], budget_tokens, beta)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    score: SelectionScore


def ablation_study(q: Matrix, k: Matrix, v: Matrix, k_start: int, mu: float, beta: float) -> Tuple[AblationRow, ...]:
    """Uniform budget with SAM, decayed budget with SAM, decayed budget with OAM, at matched average budget."""
    n = q.shape[0]
    if not 1 <= k_start <= n:
        raise SelectionError(f"k_start must lie in [1, n={n}], got {k_start}")
    dense = dense_attention(q, k, v)
    decayed = tpd_budgets(BudgetSchedule.unguarded(n, k_start, mu))
    uniform = max(1, uniform_equivalent(k_start, mu))
    variants = (
        ("uniform_sam", uniform, 0.0),
        ("tpd_sam", decayed, 0.0),
        ("tpd_oam", decayed, beta),
    )
    rows = []
    for name, budgets, b in variants:
        keep = topk_keep(token_metric(q, k, v, b), budgets)
        rows.append(AblationRow(name, score_selection(q, k, v, dense.o, dense.probs, keep)))
    return tuple(rows)


@dataclass(frozen=True)
class LayerwiseLoss:
    metric: str
    budget: int
    mse_layers: Tuple[float, ...]
    mse_final: float


def layerwise_metric_loss(
    model: ToyTransformer,
    x: Matrix,
    budget_tokens: int,
    metric: MetricName = "oam",
    beta: float = 1.0,
) -> LayerwiseLoss:
    """Runs every layer with token-level top-k sparse attention and reports MSE against the dense pass."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidDimensionError(f"input must be a non-empty matrix, got shape {x.shape}")
    b = 0.0 if metric == "sam" else beta

    def attend(layer: int, values: Matrix) -> Matrix:
        q, k = model.queries_keys(layer, values)
        keep = topk_keep(token_metric(q, k, values, b), budget_tokens)
        return renormalized_output(q, k, values, keep)

    reference = forward_dense(model, x)
    final, per_layer = trace_errors(reference, run_layers(model, x, attend))
    return LayerwiseLoss(metric, budget_tokens, per_layer, final)
