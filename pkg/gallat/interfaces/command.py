"""Interfaces for command abstractions."""
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Type

from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table


class BaseCommandInput(BaseModel):
    """Base class for command input models."""
    model_config = {"extra": "forbid"}


class CommandContent(BaseModel):
    """Model for content in command responses."""
    type: str = Field(default="text", description="Content type identifier")

    title: Optional[str] = Field(None, description="Optional heading shown above the content")

    # Text content
    text: Optional[str] = Field(None, description="Text content when type='text'")

    # JSON content (for structured data)
    json_data: Optional[Dict[str, Any]] = Field(None, description="JSON data when type='json'")

    # Table content: column names plus rows of cells
    columns: Optional[List[str]] = Field(None, description="Column names when type='table'")
    rows: Optional[List[List[Any]]] = Field(None, description="Rows when type='table'")

    # Model content (will be converted to json_data during serialization)
    model: Optional[Any] = Field(None, exclude=True, description="Pydantic model instance")

    def model_post_init(self, __context: Any) -> None:
        """Post-initialization hook to handle model conversion."""
        if self.model and not self.json_data:
            if isinstance(self.model, BaseModel):
                self.json_data = self.model.model_dump(mode="json")
                if not self.type or self.type == "text":
                    self.type = "json"


class CommandResponse(BaseModel):
    """Model for command responses."""
    content: List[CommandContent]

    @classmethod
    def from_model(cls, model: BaseModel) -> "CommandResponse":
        """Create a CommandResponse from a Pydantic model."""
        return cls(content=[CommandContent(type="json", json_data=model.model_dump(mode="json"), model=model)])

    @classmethod
    def from_text(cls, text: str) -> "CommandResponse":
        return cls(content=[CommandContent(type="text", text=text)])

    def with_table(self, title: str, columns: List[str], rows: List[List[Any]]) -> "CommandResponse":
        """Append a table rendered after the existing content."""
        self.content.append(CommandContent(type="table", title=title, columns=columns, rows=rows))
        return self

    def data(self) -> Dict[str, Any]:
        """JSON data of the first json item ({} when there is none)."""
        for item in self.content:
            if item.type == "json" and item.json_data is not None:
                return item.json_data
        return {}


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class Command(ABC):
    """Abstract base class for all commands."""
    name: ClassVar[str]
    description: ClassVar[str]
    input_model: ClassVar[Type[BaseCommandInput]]
    output_model: ClassVar[Optional[Type[BaseModel]]] = None

    @abstractmethod
    async def execute(self, input_data: BaseCommandInput) -> CommandResponse:
        """Execute the command with given arguments."""
        pass

    def get_schema(self) -> Dict[str, Any]:
        """Get JSON schema for the command."""
        schema = {
            "name": self.name,
            "description": self.description,
            "input": self.input_model.model_json_schema(),
        }

        if self.output_model:
            schema["output"] = self.output_model.model_json_schema()

        return schema

    def render(self, response: CommandResponse, console: Console) -> None:
        """Print a response for humans; files written by the command are the machine-readable output."""
        for item in response.content:
            if item.type == "table" and item.columns is not None:
                table = Table(title=item.title)
                for column in item.columns:
                    table.add_column(column)
                for row in item.rows or []:
                    table.add_row(*(_cell(v) for v in row))
                console.print(table)
            elif item.type == "json" and item.json_data is not None:
                console.print_json(data=item.json_data)
            elif item.text:
                console.print(item.text)


def output_path(directory: str, name: str) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path / name
