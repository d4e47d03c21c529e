"""Command that audits the parameter count of a checkpoint."""
import json
import time
from typing import Dict, List

from pydantic import BaseModel, Field

from ..checkpoint import load_checkpoint
from ..interfaces.command import BaseCommandInput, Command, CommandResponse, output_path
from ..manifest import record_run
from ..training import count_params

PARAMS_FILE = "params.json"


class ParamsInput(BaseCommandInput):
    """Input schema for the params command."""
    checkpoint: str = Field(description="checkpoint.zip written by train")
    output_dir: str = Field(description="Directory for params.json")


class ParamsOutput(BaseModel):
    counts: Dict[str, int]
    stored_elements: int = Field(description="Elements actually stored in the checkpoint")
    outputs: List[str]


class ParamsCommand(Command):
    name = "params"
    description = "Per-layer parameter counts and the closed-form attention-layer total"
    input_model = ParamsInput
    output_model = ParamsOutput

    async def execute(self, input_data: ParamsInput) -> CommandResponse:
        started = time.perf_counter()
        state = load_checkpoint(input_data.checkpoint)
        counts = count_params(state)
        stored = sum(int(v.size) for v in state.params.values())
        path = output_path(input_data.output_dir, PARAMS_FILE)
        path.write_text(json.dumps({"counts": counts, "stored_elements": stored}, indent=2, sort_keys=True) + "\n")
        record_run(self.name, input_data.output_dir, started, [input_data.checkpoint], [path])
        response = CommandResponse.from_model(ParamsOutput(counts=counts, stored_elements=stored, outputs=[str(path)]))
        return response.with_table("Parameters", ["item", "count"], [[k, v] for k, v in counts.items()])
