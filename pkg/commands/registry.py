import argparse
import importlib
import inspect
import json
import os
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

import commands.libs
from commands.base import BaseCommand, CommandResult
from core.config import RunConfig
from core.errors import StemError, UsageError
from core.log import get_logger

logger = get_logger(__name__)

_JSON_TYPES = {"integer": int, "number": float, "string": str}


class ArgumentParser(argparse.ArgumentParser):
    """Reports bad flags as usage errors (exit 1) instead of exiting the process."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag_spec(name: str, prop: Dict) -> Dict[str, Any]:
    schema = prop
    if "anyOf" in prop:
        schema = next((s for s in prop["anyOf"] if s.get("type") != "null"), {})
    default = prop.get("default")
    help_text = prop.get("description", "")
    if default is not None:
        help_text = f"{help_text} (default: {default})"
    spec: Dict[str, Any] = {"dest": name, "default": argparse.SUPPRESS, "help": help_text}

    kind = schema.get("type")
    if kind == "boolean":
        spec["action"] = argparse.BooleanOptionalAction
    elif kind == "array":
        item = schema.get("items", {})
        spec["nargs"] = "+"
        spec["type"] = _JSON_TYPES.get(item.get("type"), str)
        if "enum" in item:
            spec["choices"] = item["enum"]
    else:
        spec["type"] = _JSON_TYPES.get(kind, str)
        if "enum" in schema:
            spec["choices"] = schema["enum"]
    return spec


def _format_validation(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        field = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{field}: {err['msg']}")
    return "; ".join(parts)


def _failure(message: str, exit_code: int, kind: str) -> CommandResult:
    return {"success": False, "output": message, "metadata": {"error": kind, "exit_code": exit_code}}


class CommandRegistry:
    def __init__(self):
        self.commands: Dict[str, BaseCommand] = {}
        self._register_builtins()

    def _register_builtins(self):
        libs_path = os.path.dirname(commands.libs.__file__)
        logger.debug("scanning commands in %s", libs_path)

        for filename in sorted(os.listdir(libs_path)):
            if filename.endswith(".py") and not filename.startswith("_"):
                module_name = f"commands.libs.{filename[:-3]}"
                module = importlib.import_module(module_name)
                for _, obj in inspect.getmembers(module, inspect.isclass):
                    if issubclass(obj, BaseCommand) and obj is not BaseCommand and obj.__module__ == module_name:
                        instance = obj()
                        self.commands[instance.name] = instance
                        logger.debug("registered command %s (%s)", instance.name, filename)

    def names(self) -> List[str]:
        return sorted(self.commands)

    def build_parser(self, prog: str = "stem") -> ArgumentParser:
        parser = ArgumentParser(prog=prog, description="Sparse attention with position-decayed budgets and output-aware selection.")
        parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
        sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
        for name in self.names():
            command = self.commands[name]
            cmd_parser = sub.add_parser(name, help=command.description, description=command.description)
            cmd_parser.add_argument("--config", dest="config_file", default=None, help="flat JSON file of option values")
            for field, prop in command.parameters.get("properties", {}).items():
                cmd_parser.add_argument(f"--{field.replace('_', '-')}", **_flag_spec(field, prop))
        return parser

    def load_config(self, command: BaseCommand, flags: Dict[str, Any], config_file: Optional[str] = None) -> RunConfig:
        """Explicit flags override the config file, which overrides the defaults."""
        values: Dict[str, Any] = {}
        if config_file:
            try:
                with open(config_file, "r", encoding="utf-8") as f:
                    values = json.load(f)
            except OSError as e:
                raise UsageError(f"cannot read config file '{config_file}': {e.strerror or e}") from e
            except json.JSONDecodeError as e:
                raise UsageError(f"config file '{config_file}' is not valid JSON: {e.msg}") from e
            if not isinstance(values, dict):
                raise UsageError(f"config file '{config_file}' must hold a flat JSON object")
        values.update(flags)
        try:
            return command.options.model_validate(values)
        except ValidationError as e:
            raise UsageError(f"invalid options for '{command.name}': {_format_validation(e)}") from e

    def execute(self, command_name: str, flags: Dict[str, Any], config_file: Optional[str] = None) -> CommandResult:
        if command_name not in self.commands:
            return _failure(f"unknown command '{command_name}'; choose one of {', '.join(self.names())}", 1, "usage")
        command = self.commands[command_name]

        try:
            config = self.load_config(command, flags, config_file)
            logger.info("running %s", command_name)
            result = command.run(config)
        except StemError as e:
            logger.debug("%s failed", command_name, exc_info=True)
            return _failure(f"{e.kind}: {e}", e.exit_code, e.kind)
        except ValueError as e:
            return _failure(f"usage: {e}", 1, "usage")

        if not isinstance(result, dict) or "output" not in result:
            return _failure(f"internal: command '{command_name}' returned an invalid result", 2, "internal")
        return result
