import os
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Config:
    BASE_PATH = Path(os.getcwd()).resolve()
    DIRS = {
        "artifacts": os.environ.get("STEM_ARTIFACTS_DIR", str(BASE_PATH / "artifacts")),
    }

    LOG_LEVEL = os.environ.get("STEM_LOG_LEVEL", "WARNING")

    # Implementation constants of the reference setup
    BLOCK_SIZE = 128
    DECAY_RATIO = 0.7
    BETA = 0.2
    INIT_GUARD_BLOCKS = 4
    LOCAL_GUARD_BLOCKS = 4
    MIN_TOTAL_BLOCKS = 54

    # k_start as a fraction of N_blk: 0.2 up to 16k tokens, 0.1 beyond
    K_START_FRACTION_SHORT = 0.2
    K_START_FRACTION_LONG = 0.1
    LONG_CONTEXT_THRESHOLD = 16384

    VALUE_NORM_EPS = 1e-12
    FLOOR_EPS = 1e-9

    MU_GRID = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    BETA_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]

    @classmethod
    def k_start_fraction(cls, n: int) -> float:
        if n > cls.LONG_CONTEXT_THRESHOLD:
            return cls.K_START_FRACTION_LONG
        return cls.K_START_FRACTION_SHORT


def parse_seed_range(spec: str) -> List[int]:
    """Parses ``a..b`` (inclusive) or a single integer."""
    text = str(spec).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        start, stop = int(lo), int(hi)
        if stop < start:
            raise ValueError(f"empty seed range '{spec}'")
        return list(range(start, stop + 1))
    return [int(text)]


class RunConfig(BaseModel):
    """Flat run configuration shared by every command.

    Field defaults are the reference implementation constants; a ``--config`` JSON file and
    explicit flags override them in that order.
    """

    model_config = ConfigDict(extra="forbid")

    n: int = Field(2048, ge=1, description="sequence length in tokens")
    d: int = Field(64, ge=1, description="head dimension")
    heads: int = Field(1, ge=1, description="number of independent heads")
    block_size: int = Field(Config.BLOCK_SIZE, ge=1, description="block size B")
    k_start: Optional[float] = Field(
        None, description="initial budget; omitted = 0.2*N_blk (<=16k tokens) or 0.1*N_blk"
    )
    k_unit: Literal["blocks", "tokens"] = Field("blocks", description="unit of k_start")
    mu: float = Field(Config.DECAY_RATIO, description="decay ratio mu in (0,1]")
    beta: float = Field(Config.BETA, ge=0.0, description="OAM magnitude weight beta")
    pooling: Literal["antidiagonal", "mean"] = Field("antidiagonal", description="block score pooling")
    init_guard: int = Field(Config.INIT_GUARD_BLOCKS, ge=0, description="initial guard blocks")
    local_guard: int = Field(Config.LOCAL_GUARD_BLOCKS, ge=0, description="local guard blocks")
    min_total_blocks: int = Field(Config.MIN_TOTAL_BLOCKS, ge=0, description="minimum total budget in blocks")
    min_budget_mode: Literal["total", "row"] = Field("total", description="how the minimum budget is enforced")
    decay_anchor: Literal["origin", "triangle"] = Field("origin", description="where the linear decay starts")
    seed: int = Field(0, ge=0, description="base seed")
    seeds: Optional[str] = Field(None, description="seed range a..b (inclusive); overrides --seed")
    generator: Literal["gaussian", "outlier"] = Field("gaussian", description="synthetic Q/K/V generator")
    scale: float = Field(1.0, ge=0.0, description="gaussian standard deviation")
    outlier_frac: float = Field(0.1, ge=0.0, le=1.0, description="fraction of outlier value rows")
    outlier_gain: float = Field(8.0, ge=1.0, description="gain applied to outlier value rows")
    input_dir: Optional[str] = Field(None, description="directory with q_h*/k_h*/v_h* .stt files")
    output_dir: Optional[str] = Field(None, description="directory for written tensors")
    csv: Optional[str] = Field(None, description="write the CSV report to this path")
    workers: int = Field(1, ge=1, description="worker threads (results are order-independent)")

    @field_validator("mu")
    @classmethod
    def _mu_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("mu must lie in (0, 1]")
        return v

    @field_validator("k_start")
    @classmethod
    def _k_start_positive(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v < 1:
            raise ValueError("k_start must be >= 1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds_parse(cls, v: Optional[str]) -> Optional[str]:
        if v is not None:
            parse_seed_range(v)
        return v

    @model_validator(mode="after")
    def _k_start_fits(self):
        if self.k_start is not None and self.k_unit == "tokens" and self.k_start > self.n:
            raise ValueError("k_start (tokens) must not exceed n")
        return self

    def seed_list(self) -> List[int]:
        if self.seeds is not None:
            return parse_seed_range(self.seeds)
        return [self.seed]

    @property
    def n_blk(self) -> int:
        return -(-self.n // self.block_size)

    def resolved_k_start(self) -> float:
        if self.k_start is not None:
            return self.k_start
        return max(1.0, Config.k_start_fraction(self.n) * self.n_blk)
