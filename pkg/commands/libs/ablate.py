from typing import List, Literal, Optional

import numpy as np
from pydantic import Field

from commands.base import BaseCommand, CommandResult, map_ordered, synthetic_qkv
from commands.reporting import emit_csv
from core.config import RunConfig
from lab.selection import ablation_study

COLUMNS = ["seed", "variant", "mse_dense_sparse", "bound", "pairs"]


class AblateOptions(RunConfig):
    n: int = Field(512, ge=1, description="sequence length in tokens")
    generator: Literal["gaussian", "outlier"] = Field("outlier", description="synthetic Q/K/V generator")
    k_start: Optional[float] = Field(64, description="initial token budget of the decayed schedule")
    k_unit: Literal["blocks", "tokens"] = Field("tokens", description="unit of k_start (ablation works in tokens)")


class AblateCommand(BaseCommand):
    name = "ablate"
    description = "Uniform budget with SAM against decayed budget with SAM and with OAM, at matched average budget."
    options = AblateOptions

    def run(self, config: AblateOptions) -> CommandResult:
        k_start = int(config.resolved_k_start() * (config.block_size if config.k_unit == "blocks" else 1))
        k_start = min(k_start, config.n)

        def seed_rows(seed: int) -> List[dict]:
            q, k, v = synthetic_qkv(config, seed)
            return [
                {
                    "seed": seed,
                    "variant": row.variant,
                    "mse_dense_sparse": row.score.mse,
                    "bound": row.score.bound,
                    "pairs": row.score.pairs,
                }
                for row in ablation_study(q, k, v, k_start, config.mu, config.beta)
            ]

        rows = [row for chunk in map_ordered(seed_rows, config.seed_list(), config.workers) for row in chunk]
        summary = {
            variant: float(np.mean([r["mse_dense_sparse"] for r in rows if r["variant"] == variant]))
            for variant in ("uniform_sam", "tpd_sam", "tpd_oam")
        }
        text = emit_csv(self.name, COLUMNS, rows, config.csv)
        output = self.to_json({"csv": config.csv, "k_start": k_start, "mean_mse_dense_sparse": summary}) if config.csv else text
        return self.ok(output, k_start=k_start, mean_mse_dense_sparse=summary)
