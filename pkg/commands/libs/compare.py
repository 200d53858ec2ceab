from typing import List, Literal

import numpy as np
from pydantic import Field, field_validator

from commands.base import BaseCommand, CommandResult, map_ordered, synthetic_qkv
from commands.reporting import emit_csv
from core.config import RunConfig
from core.log import get_logger
from lab.selection import compare_sam_oam

logger = get_logger(__name__)

COLUMNS = ["seed", "budget", "metric", "beta", "mse_dense_sparse", "mse_truncated", "bound"]


class CompareOptions(RunConfig):
    n: int = Field(128, ge=1, description="sequence length in tokens")
    generator: Literal["gaussian", "outlier"] = Field("outlier", description="synthetic Q/K/V generator")
    beta: float = Field(1.0, ge=0.0, description="OAM magnitude weight beta for the token-level comparison")
    budgets: List[int] = Field([16], min_length=1, description="token budgets per query row")
    metrics: List[Literal["sam", "oam"]] = Field(["sam", "oam"], min_length=1, description="selection metrics to compare")

    @field_validator("budgets")
    @classmethod
    def _budgets_positive(cls, v: List[int]) -> List[int]:
        if any(b < 1 for b in v):
            raise ValueError("budgets must be >= 1")
        return v


class CompareCommand(BaseCommand):
    name = "compare"
    description = "Token-level top-k selection error of SAM versus OAM against dense attention, per seed and budget."
    options = CompareOptions

    def run(self, config: CompareOptions) -> CommandResult:
        budgets = sorted(set(config.budgets))
        metrics = [m for m in ("sam", "oam") if m in config.metrics]

        def seed_rows(seed: int) -> List[dict]:
            q, k, v = synthetic_qkv(config, seed)
            rows = []
            for budget in budgets:
                result = compare_sam_oam(q, k, v, budget, config.beta)
                for metric in metrics:
                    score = getattr(result, metric)
                    rows.append(
                        {
                            "seed": seed,
                            "budget": budget,
                            "metric": metric,
                            "beta": config.beta if metric == "oam" else 0.0,
                            "mse_dense_sparse": score.mse,
                            "mse_truncated": score.mse_truncated,
                            "bound": score.bound,
                        }
                    )
            return rows

        rows = [row for chunk in map_ordered(seed_rows, config.seed_list(), config.workers) for row in chunk]
        summary = summarize(rows, budgets, metrics)
        logger.info("compare: %d rows over %d seeds", len(rows), len(config.seed_list()))
        text = emit_csv(self.name, COLUMNS, rows, config.csv)
        output = self.to_json({"csv": config.csv, "summary": summary}) if config.csv else text
        return self.ok(output, summary=summary)


def summarize(rows: List[dict], budgets: List[int], metrics: List[str]) -> List[dict]:
    """Mean of each error column per (budget, metric)."""
    out = []
    for budget in budgets:
        for metric in metrics:
            group = [r for r in rows if r["budget"] == budget and r["metric"] == metric]
            out.append(
                {
                    "budget": budget,
                    "metric": metric,
                    "seeds": len(group),
                    "mean_mse_dense_sparse": float(np.mean([r["mse_dense_sparse"] for r in group])),
                    "mean_mse_truncated": float(np.mean([r["mse_truncated"] for r in group])),
                    "mean_bound": float(np.mean([r["bound"] for r in group])),
                }
            )
    return out
