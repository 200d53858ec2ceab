from pathlib import Path
from typing import List

import numpy as np

from attention.dense import dense_output_blocked, mse
from attention.sparse import stem_forward_heads
from commands.base import BaseCommand, CommandResult, metric_from, schedule_from, synthetic_qkv
from commands.libs.gen import head_files
from core.config import RunConfig
from core.errors import InvalidDimensionError, TensorIOError
from core.log import get_logger
from core.tensors import QKV, load_tensor, save_tensor

logger = get_logger(__name__)


def load_heads(directory: str, heads: int) -> List[QKV]:
    loaded = []
    for head in range(heads):
        files = head_files(Path(directory), head)
        q, k, v = (load_tensor(files[name]) for name in ("q", "k", "v"))
        if q.shape != k.shape or k.shape[0] != v.shape[0]:
            raise InvalidDimensionError(f"head {head}: Q {q.shape}, K {k.shape}, V {v.shape} do not line up")
        loaded.append(QKV(q, k, v))
    shapes = {h.q.shape for h in loaded}
    if len(shapes) != 1:
        raise InvalidDimensionError(f"heads in '{directory}' have different shapes: {sorted(shapes)}")
    return loaded


class RunCommand(BaseCommand):
    name = "run"
    description = "Run Stem sparse attention on stored or generated Q/K/V and report budget, cost and error against dense attention."

    def run(self, config: RunConfig) -> CommandResult:
        if config.input_dir:
            heads = load_heads(config.input_dir, config.heads)
            n, d = heads[0].q.shape
            if (n, d) != (config.n, config.d):
                logger.info("using n=%d, d=%d from %s", n, d, config.input_dir)
                config = config.model_copy(update={"n": n, "d": d})
        else:
            heads = [synthetic_qkv(config, config.seed, h) for h in range(config.heads)]

        schedule = schedule_from(config)
        results = stem_forward_heads(heads, schedule, metric_from(config), workers=config.workers)

        per_head = []
        for h, (qkv, result) in enumerate(zip(heads, results)):
            dense_o = dense_output_blocked(qkv.q, qkv.k, qkv.v)
            entry = {"head": h, "mse_vs_dense": mse(dense_o, result.o), **result.stats.summary()}
            per_head.append(entry)
            if config.output_dir:
                out_dir = Path(config.output_dir)
                try:
                    out_dir.mkdir(parents=True, exist_ok=True)
                except OSError as e:
                    raise TensorIOError(f"cannot create output directory '{out_dir}': {e.strerror or e}") from e
                save_tensor(result.o, out_dir / f"o_h{h}.stt")

        report = {
            "n": config.n,
            "d": config.d,
            "heads": config.heads,
            "block_size": config.block_size,
            "schedule": schedule.to_dict(),
            "realized_budget_fraction": float(np.mean([e["realized_budget_fraction"] for e in per_head])),
            "estimated_flops": float(np.mean([e["estimated_flops"] for e in per_head])),
            "mse_vs_dense": float(np.mean([e["mse_vs_dense"] for e in per_head])),
            "per_head": per_head,
        }
        logger.info("run: budget fraction %.4f, mse %.3g", report["realized_budget_fraction"], report["mse_vs_dense"])
        return self.ok(self.to_json(report))
