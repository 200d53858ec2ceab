from typing import List, Literal, Optional

import numpy as np
from pydantic import Field, model_validator

from attention.dense import dense_output_blocked, mse
from attention.schedule import cost_decay
from attention.sparse import selection_truncation_bound, stem_forward
from commands.base import BaseCommand, CommandResult, map_ordered, metric_from, schedule_from, synthetic_qkv
from commands.reporting import emit_csv, write_line_chart
from core.config import Config, RunConfig
from core.log import get_logger

logger = get_logger(__name__)

COLUMNS = [
    "param",
    "value",
    "seed",
    "mse_dense_sparse",
    "bound",
    "realized_budget_fraction",
    "estimated_flops",
    "decay_cost",
]


class SweepOptions(RunConfig):
    n: int = Field(1024, ge=1, description="sequence length in tokens")
    block_size: int = Field(32, ge=1, description="block size B (reference setup: 128)")
    init_guard: int = Field(1, ge=0, description="initial guard blocks (reference setup: 4)")
    local_guard: int = Field(1, ge=0, description="local guard blocks (reference setup: 4)")
    min_total_blocks: int = Field(0, ge=0, description="minimum total budget in blocks (reference setup: 54)")
    param: Literal["mu", "beta"] = Field("mu", description="parameter to sweep")
    grid: Optional[List[float]] = Field(None, description="values to sweep; omitted = 0.5..1.0 for mu, 0..0.5 for beta")
    svg: Optional[str] = Field(None, description="write a line chart of mean mse and budget fraction to this SVG path")

    @model_validator(mode="after")
    def _grid_in_range(self):
        if self.grid is not None:
            if not self.grid:
                raise ValueError("grid must not be empty")
            for value in self.grid:
                if self.param == "mu" and not 0.0 < value <= 1.0:
                    raise ValueError(f"mu grid value {value} outside (0, 1]")
                if self.param == "beta" and value < 0.0:
                    raise ValueError(f"beta grid value {value} must be >= 0")
        return self

    def grid_values(self) -> List[float]:
        if self.grid is not None:
            return sorted(set(self.grid))
        return list(Config.MU_GRID if self.param == "mu" else Config.BETA_GRID)


class SweepCommand(BaseCommand):
    name = "sweep"
    description = "Sweep the decay ratio mu or the magnitude weight beta and report error, budget and cost per grid point."
    options = SweepOptions

    def run(self, config: SweepOptions) -> CommandResult:
        grid = config.grid_values()

        def seed_rows(seed: int) -> List[dict]:
            q, k, v = synthetic_qkv(config, seed)
            dense_o = dense_output_blocked(q, k, v)
            rows = []
            for value in grid:
                point = config.model_copy(update={config.param: value})
                schedule = schedule_from(point)
                result = stem_forward(q, k, v, schedule, metric_from(point))
                decay_cost, _ = cost_decay(point.n, min(schedule.k_start_tokens, point.n), point.mu)
                rows.append(
                    {
                        "param": config.param,
                        "value": value,
                        "seed": seed,
                        "mse_dense_sparse": mse(dense_o, result.o),
                        "bound": selection_truncation_bound(q, k, v, result.stats.selections, point.block_size),
                        "realized_budget_fraction": result.stats.realized_budget_fraction,
                        "estimated_flops": result.stats.estimated_flops,
                        "decay_cost": decay_cost,
                    }
                )
            return rows

        rows = [row for chunk in map_ordered(seed_rows, config.seed_list(), config.workers) for row in chunk]
        means = [
            {
                "value": value,
                "mean_mse_dense_sparse": float(np.mean([r["mse_dense_sparse"] for r in rows if r["value"] == value])),
                "mean_budget_fraction": float(np.mean([r["realized_budget_fraction"] for r in rows if r["value"] == value])),
            }
            for value in grid
        ]
        logger.info("sweep: %s over %d grid points", config.param, len(grid))
        if config.svg:
            write_line_chart(
                config.svg,
                grid,
                [m["mean_mse_dense_sparse"] for m in means],
                [m["mean_budget_fraction"] for m in means],
                xlabel=config.param,
            )
        text = emit_csv(self.name, COLUMNS, rows, config.csv)
        output = self.to_json({"csv": config.csv, "svg": config.svg, "summary": means}) if config.csv else text
        return self.ok(output, summary=means)
