from typing import List, Optional

from pydantic import Field, model_validator

from commands.base import BaseCommand, CommandResult, map_ordered
from commands.reporting import emit_csv
from core.config import RunConfig
from core.log import get_logger
from lab.toy_model import (
    AsymmetrySummary,
    AsymmetryTrial,
    PruneMode,
    SegmentSpec,
    build_toy_model,
    quartile_segments,
    segment_sensitivity,
    toy_input,
)

logger = get_logger(__name__)


class PropagateOptions(RunConfig):
    n: int = Field(128, ge=4, description="sequence length in tokens")
    d: int = Field(32, ge=4, description="model width")
    block_size: int = Field(16, ge=1, description="block size for the sparse prune modes")
    seeds: Optional[str] = Field("0..19", description="seed range a..b (inclusive); overrides --seed")
    layers: int = Field(4, ge=1, description="toy model depth L")
    d_ff: Optional[int] = Field(None, ge=1, description="feed-forward width; omitted = 2*d")
    layer: int = Field(0, ge=0, description="layer whose attention is pruned")
    mode: PruneMode = Field("drop_columns", description="how a segment is pruned")
    renormalize: bool = Field(False, description="renormalize rows after dropping columns")
    keep_ratio: float = Field(0.25, ge=0.0, le=1.0, description="fraction of segment blocks kept by sparse modes")
    keep_blocks: Optional[int] = Field(None, ge=0, description="fixed number of segment blocks kept by sparse modes")

    @model_validator(mode="after")
    def _layer_fits(self):
        if self.layer >= self.layers:
            raise ValueError(f"layer {self.layer} outside a {self.layers}-layer model")
        return self

    def columns(self) -> List[str]:
        return ["seed", "segment_start", "segment_end", "mode", "mse_final"] + [f"mse_layer_{i}" for i in range(self.layers)]


class PropagateCommand(BaseCommand):
    name = "propagate"
    description = "Prune one position segment in one toy-model layer and measure how the error reaches later layers."
    options = PropagateOptions

    def segments(self, config: PropagateOptions) -> List[SegmentSpec]:
        options = dict(
            renormalize=config.renormalize,
            block_size=config.block_size,
            keep_ratio=config.keep_ratio,
            keep_blocks=config.keep_blocks,
            beta=config.beta,
        )
        control = SegmentSpec(config.layer, 0, config.n, "control")
        full = SegmentSpec(config.layer, 0, config.n, config.mode, **options)
        return [control, *quartile_segments(config.n, config.layer, config.mode, **options), full]

    def run(self, config: PropagateOptions) -> CommandResult:
        segments = self.segments(config)

        def seed_report(seed: int):
            model = build_toy_model(config.layers, config.d, config.d_ff or 2 * config.d, seed)
            return segment_sensitivity(model, [toy_input(config.n, config.d, seed)], segments, seeds=[seed])

        rows, trials = [], []
        for seed, report in zip(config.seed_list(), map_ordered(seed_report, config.seed_list(), config.workers)):
            for row in report.rows:
                spec = row.segment
                entry = {
                    "seed": seed,
                    "segment_start": spec.start,
                    "segment_end": spec.end,
                    "mode": spec.mode,
                    "mse_final": row.mse_final,
                }
                entry.update({f"mse_layer_{i}": m for i, m in enumerate(row.mse_layers)})
                rows.append(entry)
            first, last = report.rows[1], report.rows[4]
            trials.append(AsymmetryTrial(seed, first.mse_final, last.mse_final))

        summary = AsymmetrySummary(tuple(trials))
        asymmetry = {
            "seeds": len(trials),
            "pass_rate": summary.pass_rate,
            "mean_initial_final_ratio": summary.mean_ratio,
        }
        logger.info("propagate: initial quarter beats final quarter in %.0f%% of seeds", 100 * summary.pass_rate)
        text = emit_csv(self.name, config.columns(), rows, config.csv)
        output = self.to_json({"csv": config.csv, "asymmetry": asymmetry}) if config.csv else text
        return self.ok(output, asymmetry=asymmetry)
