"""Tests for command registration, input validation and generated CLI flags."""
import argparse
import asyncio
from typing import Literal, Optional

import pytest
from pydantic import BaseModel, Field, ValidationError

from gallat.interfaces.command import BaseCommandInput, Command, CommandResponse
from gallat.services.command_service import CommandService


class EchoInput(BaseCommandInput):
    path: str = Field(description="Where to write")
    count: int = Field(default=3, ge=1, description="How many, 100% of them")
    mode: Literal["fast", "slow"] = Field(default="fast", description="Speed")
    verbose: bool = Field(default=False, description="Chatty")
    scale: Optional[float] = Field(default=None, description="Optional factor")


class EchoOutput(BaseModel):
    path: str
    count: int


class EchoCommand(Command):
    name = "echo"
    description = "Echo the validated input"
    input_model = EchoInput
    output_model = EchoOutput

    async def execute(self, input_data: EchoInput) -> CommandResponse:
        return CommandResponse.from_model(EchoOutput(path=input_data.path, count=input_data.count))


@pytest.fixture
def service():
    s = CommandService()
    s.register_commands([EchoCommand()])
    return s


@pytest.fixture
def parser(service):
    p = argparse.ArgumentParser(prog="test")
    service.register_cli_parsers(p.add_subparsers(dest="command"))
    return p


class TestCommandService:
    def test_execute_filters_unknown_keys(self, service):
        response = asyncio.run(service.execute_command("echo", {"path": "out", "command": "echo", "stray": 1}))
        assert response.data() == {"path": "out", "count": 3}

    def test_invalid_input(self, service):
        with pytest.raises(ValidationError):
            asyncio.run(service.execute_command("echo", {"path": "out", "count": 0}))

    def test_unknown_command(self, service):
        with pytest.raises(ValueError):
            service.get_command("nope")
        assert service.names == ["echo"]

    def test_schema(self):
        schema = EchoCommand().get_schema()
        assert schema["name"] == "echo"
        assert "path" in schema["input"]["required"]
        assert set(schema["output"]["properties"]) == {"path", "count"}


class TestCliParsers:
    def test_flags_from_schema(self, parser):
        args = vars(parser.parse_args(["echo", "--path", "p", "--count", "5", "--mode", "slow", "--verbose", "--scale", "0.5"]))
        assert args == {"command": "echo", "path": "p", "count": 5, "mode": "slow", "verbose": True, "scale": 0.5}

    def test_unset_flags_are_omitted(self, parser):
        assert vars(parser.parse_args(["echo", "--path", "p"])) == {"command": "echo", "path": "p"}

    def test_required_and_choices(self, parser):
        with pytest.raises(SystemExit):
            parser.parse_args(["echo"])
        with pytest.raises(SystemExit):
            parser.parse_args(["echo", "--path", "p", "--mode", "medium"])

    def test_help_renders_percent_signs(self, parser, capsys):
        with pytest.raises(SystemExit):
            parser.parse_args(["echo", "--help"])
        assert "100% of them" in capsys.readouterr().out
