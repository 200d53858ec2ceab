"""Block-pooled routing scores, pooled value magnitudes and the SAM/OAM selection metrics."""
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from attention.dense import SENTINEL, check_qk, check_values, default_scale
from core.config import Config
from core.errors import InvalidDimensionError, UsageError
from core.tensors import Matrix, as_matrix

Pooling = Literal["antidiagonal", "mean"]


@dataclass(frozen=True)
class MetricConfig:
    beta: float = Config.BETA
    block_size: int = Config.BLOCK_SIZE
    pooling: Pooling = "antidiagonal"

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise UsageError(f"beta must be >= 0, got {self.beta}")
        if self.block_size < 1:
            raise UsageError(f"block_size must be >= 1, got {self.block_size}")
        if self.pooling not in ("antidiagonal", "mean"):
            raise UsageError(f"unknown pooling '{self.pooling}'")


@dataclass(frozen=True)
class BlockSummary:
    n_blk: int
    s_bar: Matrix
    m_v: np.ndarray


def num_blocks(n: int, block_size: int) -> int:
    return -(-n // block_size)


def _padded_blocks(x: np.ndarray, block_size: int) -> np.ndarray:
    """(n, d) -> (N_blk, B, d) float64, zero rows appended after the last token."""
    n, d = x.shape
    n_blk = num_blocks(n, block_size)
    out = np.zeros((n_blk * block_size, d), dtype=np.float64)
    out[:n] = x
    return out.reshape(n_blk, block_size, d)


def pool_antidiagonal_scores(q: Matrix, k: Matrix, block_size: int, scale: Optional[float] = None) -> Matrix:
    """Mean of scale*<Q_{I*B+t}, K_{J*B+B-1-t}> over the existing, causally admissible anti-diagonal pairs."""
    check_qk(q, k)
    if block_size < 1:
        raise InvalidDimensionError(f"block_size must be >= 1, got {block_size}")
    n = q.shape[0]
    scale = default_scale(q.shape[1]) if scale is None else scale
    B = block_size
    n_blk = num_blocks(n, B)

    qb = _padded_blocks(q, B)
    kr = _padded_blocks(k, B)[:, ::-1, :]

    # Same accumulation order as the exact scores: ascending feature index, then scale.
    acc = np.zeros((n_blk, n_blk, B), dtype=np.float64)
    for f in range(qb.shape[2]):
        acc += qb[:, None, :, f] * kr[None, :, :, f]
    acc *= scale

    t = np.arange(B)
    blk = np.arange(n_blk)
    q_pos = blk[:, None] * B + t[None, :]
    k_pos = blk[:, None] * B + (B - 1 - t)[None, :]
    valid = (q_pos < n)[:, None, :] & (k_pos < n)[None, :, :] & (k_pos[None, :, :] <= q_pos[:, None, :])

    count = valid.sum(axis=2)
    total = np.where(valid, acc, 0.0).sum(axis=2)
    pooled = np.full((n_blk, n_blk), float(SENTINEL))
    has_pairs = count > 0
    pooled[has_pairs] = total[has_pairs] / count[has_pairs]
    return as_matrix(pooled, "S_bar")


def pool_mean_scores(q: Matrix, k: Matrix, block_size: int, scale: Optional[float] = None) -> Matrix:
    """Mean of all causally admissible token scores in each (query block, key block) tile."""
    check_qk(q, k)
    if block_size < 1:
        raise InvalidDimensionError(f"block_size must be >= 1, got {block_size}")
    n = q.shape[0]
    scale = default_scale(q.shape[1]) if scale is None else scale
    B = block_size
    n_blk = num_blocks(n, B)
    q64 = np.asarray(q, dtype=np.float64)
    k64 = np.asarray(k, dtype=np.float64)

    pooled = np.full((n_blk, n_blk), float(SENTINEL))
    key_block = np.arange(n) // B
    for I in range(n_blk):
        lo, hi = I * B, min((I + 1) * B, n)
        s = (q64[lo:hi] @ k64[:hi].T) * scale
        admissible = np.arange(hi)[None, :] <= np.arange(lo, hi)[:, None]
        sums = np.bincount(key_block[:hi], weights=np.where(admissible, s, 0.0).sum(axis=0), minlength=I + 1)
        counts = np.bincount(key_block[:hi], weights=admissible.sum(axis=0), minlength=I + 1)
        pooled[I, : I + 1] = sums[: I + 1] / counts[: I + 1]
    return as_matrix(pooled, "S_bar")


def log_value_norms(v: Matrix) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=1)
    return np.log(np.maximum(norms, Config.VALUE_NORM_EPS))


def pool_value_magnitude(v: Matrix, block_size: int) -> np.ndarray:
    """Max over each block's rows of log(max(||V_j||, eps)); padding rows are excluded."""
    if v.ndim != 2 or v.shape[0] == 0:
        raise InvalidDimensionError(f"V must be a non-empty 2-D matrix, got shape {v.shape}")
    logs = log_value_norms(v)
    n_blk = num_blocks(v.shape[0], block_size)
    padded = np.full(n_blk * block_size, -np.inf)
    padded[: logs.size] = logs
    out = padded.reshape(n_blk, block_size).max(axis=1)
    out.setflags(write=False)
    return out


def summarize_blocks(q: Matrix, k: Matrix, v: Matrix, config: MetricConfig, scale: Optional[float] = None) -> BlockSummary:
    check_qk(q, k)
    check_values(k, v)
    pool = pool_antidiagonal_scores if config.pooling == "antidiagonal" else pool_mean_scores
    s_bar = pool(q, k, config.block_size, scale)
    return BlockSummary(n_blk=s_bar.shape[0], s_bar=s_bar, m_v=pool_value_magnitude(v, config.block_size))


def _block_admissible(s_bar: np.ndarray) -> np.ndarray:
    return np.tril(np.ones(s_bar.shape, dtype=bool)) & (s_bar > SENTINEL)


def oam_block(s_bar: Matrix, m_v: np.ndarray, beta: float) -> Matrix:
    if not beta >= 0.0:
        raise UsageError(f"beta must be >= 0, got {beta}")
    s = np.asarray(s_bar)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or np.shape(m_v) != (s.shape[0],):
        raise InvalidDimensionError(f"s_bar {s.shape} and m_v {np.shape(m_v)} do not match")
    if beta == 0.0:
        return as_matrix(s, "M_bar")
    boost = beta * np.maximum(0.0, np.asarray(m_v, dtype=np.float64))
    metric = np.where(_block_admissible(s), s.astype(np.float64) + boost[None, :], float(SENTINEL))
    return as_matrix(metric, "M_bar")


def sam_block(s_bar: Matrix) -> Matrix:
    """Score-aware baseline: the pooled routing scores unchanged."""
    s = np.asarray(s_bar)
    return oam_block(s, np.zeros(s.shape[0]), 0.0)


def block_metric(summary: BlockSummary, beta: float) -> Matrix:
    return oam_block(summary.s_bar, summary.m_v, beta)


def token_scores(q_row: np.ndarray, k: Matrix, scale: float) -> np.ndarray:
    """scale*<q, K_j> for every row of K, float64, ascending feature order."""
    q64 = np.asarray(q_row, dtype=np.float64).reshape(-1)
    k64 = np.asarray(k, dtype=np.float64)
    if k64.ndim != 2 or k64.shape[1] != q64.size:
        raise InvalidDimensionError(f"query of dim {q64.size} does not match K of shape {k64.shape}")
    acc = np.zeros(k64.shape[0], dtype=np.float64)
    for f in range(q64.size):
        acc += q64[f] * k64[:, f]
    return acc * scale


def oam_token_exact(q_row: np.ndarray, k: Matrix, v: Matrix, scale: float) -> np.ndarray:
    """s_j + log||V_j|| over the causal prefix held in K and V."""
    check_values(k, v)
    return token_scores(q_row, k, scale) + log_value_norms(v)


def oam_token(q_row: np.ndarray, k: Matrix, v: Matrix, scale: float, beta: float) -> np.ndarray:
    """Token-level metric with the beta-weighted, zero-truncated log magnitude."""
    check_values(k, v)
    s = token_scores(q_row, k, scale)
    if beta == 0.0:
        return s
    return s + beta * np.maximum(0.0, log_value_norms(v))
