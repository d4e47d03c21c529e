"""Command that predicts one slot from a checkpoint."""
import time
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from ..interfaces.command import BaseCommandInput, Command, CommandResponse, output_path
from ..manifest import record_run
from ..transfer_attention import top_flows
from .common import load_pair

DEMAND_FILE = "demand.csv"
OD_FILE = "od.csv"
FLOWS_FILE = "top_flows.csv"


class PredictInput(BaseCommandInput):
    """Input schema for the predict command."""
    model_config = ConfigDict(json_schema_extra={
        "examples": [{"checkpoint": "runs/a/checkpoint.zip", "dataset": "data/synth", "output_dir": "runs/a/pred"}]
    })

    checkpoint: str = Field(description="checkpoint.zip written by train")
    dataset: str = Field(description="Dataset directory providing the history")
    output_dir: str = Field(description="Directory for the prediction CSVs")
    slot: Optional[int] = Field(default=None, ge=0, description="Slot to predict (the slot after the data if omitted)")
    top_k: int = Field(default=20, ge=0, description="Rows in top_flows.csv")
    floor: float = Field(default=0.0, ge=0, description="od.csv keeps only entries strictly above this value")


class PredictOutput(BaseModel):
    slot: int
    total_demand: float = Field(description="Predicted trips summed over all origins")
    outputs: List[str]


class PredictCommand(Command):
    """Writes the demand vector, the OD matrix and the strongest predicted flows."""
    name = "predict"
    description = "Predict next-slot demand and OD flows (demand.csv, od.csv, top_flows.csv)"
    input_model = PredictInput
    output_model = PredictOutput

    async def execute(self, input_data: PredictInput) -> CommandResponse:
        started = time.perf_counter()
        state, snapshots, meta = load_pair(input_data.checkpoint, input_data.dataset)
        model = state.model()
        slot = meta.n_slots if input_data.slot is None else input_data.slot
        pred = model.forward(model.series(snapshots), slot).to_prediction()
        n = state.grid.n

        demand = output_path(input_data.output_dir, DEMAND_FILE)
        pd.DataFrame({"slot": slot, "node": np.arange(n), "value": pred.d_hat}).to_csv(demand, index=False)
        od = output_path(input_data.output_dir, OD_FILE)
        origin, dest = np.divmod(np.arange(n * n), n)
        values = pred.G_hat.ravel()
        keep = values > input_data.floor
        pd.DataFrame(
            {"slot": slot, "origin": origin[keep], "dest": dest[keep], "value": values[keep]}
        ).to_csv(od, index=False)
        flows = top_flows(pred.G_hat, input_data.top_k)
        flows_path = output_path(input_data.output_dir, FLOWS_FILE)
        pd.DataFrame(
            [{"slot": slot, **f._asdict()} for f in flows], columns=["slot", "rank", "origin", "dest", "value"]
        ).to_csv(flows_path, index=False)

        record_run(
            self.name, input_data.output_dir, started,
            [input_data.checkpoint, input_data.dataset], [demand, od, flows_path], seed=state.config.seed,
        )
        response = CommandResponse.from_model(PredictOutput(
            slot=slot, total_demand=float(pred.d_hat.sum()), outputs=[str(demand), str(od), str(flows_path)]
        ))
        return response.with_table(
            f"Top flows for slot {slot}",
            ["rank", "origin", "dest", "value"],
            [[f.rank, f.origin, f.dest, f.value] for f in flows[:10]],
        )
