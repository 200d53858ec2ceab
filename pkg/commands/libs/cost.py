from attention.schedule import cost_report
from commands.base import BaseCommand, CommandResult, schedule_from
from core.config import RunConfig


class CostCommand(BaseCommand):
    name = "cost"
    description = "Closed-form and enumerated attention cost of a schedule, with the complexity estimate and speedup over dense."

    def run(self, config: RunConfig) -> CommandResult:
        schedule = schedule_from(config)
        report = cost_report(schedule, config.d).to_dict()
        return self.ok(self.to_json({"schedule": schedule.to_dict(), "d": config.d, **report}), **report)
