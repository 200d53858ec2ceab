from typing import List, Optional

from pydantic import Field, field_validator

from commands.base import BaseCommand, CommandResult
from commands.reporting import emit_csv
from core.config import RunConfig
from core.log import get_logger
from lab.validation import CHECKS, run_suite

logger = get_logger(__name__)

COLUMNS = ["check", "instances", "violations", "max_margin", "passed"]


class ValidateOptions(RunConfig):
    quick: bool = Field(False, description="run reduced instance counts")
    checks: Optional[List[str]] = Field(None, description=f"subset of checks to run: {', '.join(CHECKS)}")

    @field_validator("checks")
    @classmethod
    def _known_checks(cls, v: Optional[List[str]]) -> Optional[List[str]]:
        if v is not None:
            unknown = [c for c in v if c not in CHECKS]
            if unknown:
                raise ValueError(f"unknown checks {unknown}")
        return v


class ValidateCommand(BaseCommand):
    name = "validate"
    description = "Run the invariant and oracle suite; exits 2 when any check fails."
    options = ValidateOptions

    def run(self, config: ValidateOptions) -> CommandResult:
        outcomes = run_suite(config.checks, quick=config.quick, workers=config.workers)
        rows = [o.to_row() for o in outcomes]
        failed = [o.check for o in outcomes if not o.passed]
        text = emit_csv(self.name, COLUMNS, rows, config.csv)
        output = self.to_json({"csv": config.csv, "failed": failed}) if config.csv else text
        if failed:
            logger.error("failed checks: %s", ", ".join(failed))
            return {"success": False, "output": output, "metadata": {"error": "invariant", "exit_code": 2, "failed": failed, "report": True}}
        return self.ok(output, failed=failed)
