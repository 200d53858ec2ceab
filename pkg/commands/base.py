import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Type, TypedDict

from attention.metric import MetricConfig
from attention.schedule import BudgetSchedule
from core.config import RunConfig
from core.errors import InvalidDimensionError
from core.tensors import QKV, gen_gaussian_qkv, gen_outlier_qkv


class CommandResult(TypedDict):
    success: bool
    output: str
    metadata: Optional[Dict]


class BaseCommand:
    name: str = "base_command"
    description: str = "Base description"
    options: Type[RunConfig] = RunConfig

    def __init__(self, name: str = None, description: str = None, options: Type[RunConfig] = None):
        if name:
            self.name = name
        if description:
            self.description = description
        if options:
            self.options = options

    @property
    def parameters(self) -> Dict:
        return self.options.model_json_schema()

    def run(self, config: RunConfig) -> CommandResult:
        raise NotImplementedError("Command must implement run method")

    @staticmethod
    def ok(output: str, **metadata: Any) -> CommandResult:
        return {"success": True, "output": output, "metadata": {"exit_code": 0, **metadata}}

    @staticmethod
    def to_json(payload: Dict) -> str:
        return json.dumps(payload, indent=2, sort_keys=True)


def schedule_from(config: RunConfig) -> BudgetSchedule:
    """Schedule of a run. A derived k_start counts blocks and is capped at n tokens."""
    k_start = config.resolved_k_start()
    block_mode = config.k_unit == "blocks" or config.k_start is None
    if config.k_start is None and k_start * config.block_size > config.n:
        k_start, block_mode = float(config.n), False
    return BudgetSchedule(
        n=config.n,
        k_start=k_start,
        mu=config.mu,
        block_size=config.block_size,
        block_mode=block_mode,
        init_guard_blocks=config.init_guard,
        local_guard_blocks=config.local_guard,
        min_total_blocks=config.min_total_blocks,
        min_budget_mode=config.min_budget_mode,
        decay_anchor=config.decay_anchor,
    )


def metric_from(config: RunConfig) -> MetricConfig:
    return MetricConfig(beta=config.beta, block_size=config.block_size, pooling=config.pooling)


def map_ordered(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """``fn`` over ``items`` with results in input order for any worker count."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def synthetic_qkv(config: RunConfig, seed: int, head: int = 0) -> QKV:
    """Q/K/V for one head from the configured generator; head h draws from stream h."""
    if config.generator == "outlier":
        q, k, v, _ = gen_outlier_qkv(config.n, config.d, seed, config.outlier_frac, config.outlier_gain, stream=head)
        return QKV(q, k, v)
    if config.generator == "gaussian":
        return gen_gaussian_qkv(config.n, config.d, seed, config.scale, stream=head)
    raise InvalidDimensionError(f"unknown generator '{config.generator}'")
