"""Service layer for managing commands."""

import argparse
import logging
from typing import Any, Dict, List, Optional, Tuple

from ..interfaces.command import Command, CommandResponse

logger = logging.getLogger(__name__)

SCHEMA_TYPES = {"integer": int, "number": float, "string": str}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _resolve(info: Dict[str, Any]) -> Dict[str, Any]:
    """Collapse ``anyOf: [X, null]`` (Optional fields) to X."""
    options = [o for o in info.get("anyOf", []) if o.get("type") != "null"]
    if len(options) == 1:
        return {**info, **options[0]}
    return info


def _argument(info: Dict[str, Any]) -> Tuple[Dict[str, Any], Optional[str]]:
    info = _resolve(info)
    kind = info.get("type", "string")
    if kind == "boolean":
        return {"action": argparse.BooleanOptionalAction}, None
    kwargs: Dict[str, Any] = {"type": SCHEMA_TYPES.get(kind, str)}
    if "enum" in info:
        kwargs["choices"] = info["enum"]
    metavar = kind.upper() if "enum" not in info else None
    return kwargs, metavar


class CommandService:
    """Service for managing and executing commands."""

    def __init__(self):
        self._commands: Dict[str, Command] = {}

    def register_command(self, command: Command) -> None:
        """Register a new command."""
        self._commands[command.name] = command

    def register_commands(self, commands: List[Command]) -> None:
        """Register multiple commands."""
        for command in commands:
            self.register_command(command)

    def get_command(self, command_name: str) -> Command:
        """Get a command by name."""
        if command_name not in self._commands:
            raise ValueError(f"Command not found: {command_name}")
        return self._commands[command_name]

    @property
    def names(self) -> List[str]:
        return list(self._commands)

    async def execute_command(self, command_name: str, input_data: Dict[str, Any]) -> CommandResponse:
        """Execute a command by name with given arguments.

        Args:
            command_name: The name of the command to execute
            input_data: Dictionary of input arguments for the command

        Returns:
            The command's response

        Raises:
            ValueError: If the command is not found
            ValidationError: If the input data is invalid
        """
        command = self.get_command(command_name)

        # Strict parameter filtering: only pass fields in the input_model schema
        schema = command.input_model.model_json_schema()
        allowed_fields = set(schema.get("properties", {}).keys())
        filtered_input = {k: v for k, v in input_data.items() if k in allowed_fields}

        try:
            input_model = command.input_model(**filtered_input)
        except Exception as e:
            logger.error(f"[CommandService] Invalid input for command '{command_name}': {e}")
            raise

        logger.debug(f"[CommandService] Running '{command_name}' with {input_model.model_dump()}")
        return await command.execute(input_model)

    def register_cli_parsers(self, subparsers: "argparse._SubParsersAction") -> None:
        """Add one argparse subparser per command, with flags derived from its input schema."""
        for command in self._commands.values():
            schema = command.input_model.model_json_schema()
            required = set(schema.get("required", []))
            parser = subparsers.add_parser(command.name, help=command.description, description=command.description)
            for name, info in schema.get("properties", {}).items():
                kwargs, metavar = _argument(info)
                kwargs["help"] = info.get("description", "").replace("%", "%%")
                if metavar:
                    kwargs["metavar"] = metavar
                if name in required:
                    kwargs["required"] = True
                else:
                    # unset flags fall back to the model's own defaults
                    kwargs["default"] = argparse.SUPPRESS
                    if "default" in info and info["default"] is not None:
                        kwargs["help"] = f"{kwargs['help']} (default: {info['default']})"
                parser.add_argument(_flag(name), dest=name, **kwargs)
            parser.set_defaults(command=command.name)
