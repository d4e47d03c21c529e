"""Command that trains a model on a dataset directory."""
import time
from typing import List, Optional

from pydantic import BaseModel, Field, create_model

from ..checkpoint import save_checkpoint
from ..config import TrainConfig, resolve_train_config
from ..data_pipeline import META_FILE, SNAPSHOTS_FILE, read_dataset
from ..interfaces.command import BaseCommandInput, Command, CommandResponse, output_path
from ..manifest import record_run
from ..training import train, write_history_csv, write_loss_csv

CHECKPOINT_FILE = "checkpoint.zip"
LOG_FILE = "train_log.csv"
LOSS_FILE = "loss_log.csv"

# every TrainConfig key doubles as an optional flag overriding the config file
_OVERRIDES = {
    name: (Optional[field.annotation], Field(default=None, description=field.description))
    for name, field in TrainConfig.model_fields.items()
}

TrainInput = create_model(
    "TrainInput",
    __base__=BaseCommandInput,
    dataset=(str, Field(description="Dataset directory written by ingest or synth")),
    output_dir=(str, Field(description="Directory for the checkpoint, log and manifest")),
    config=(Optional[str], Field(default=None, description="key = value config file")),
    **_OVERRIDES,
)


class TrainOutput(BaseModel):
    """Output schema for the train command."""
    best_epoch: int
    best_phase: str
    best_val_loss: float
    epochs_run: int
    outputs: List[str]


class TrainCommand(Command):
    """Pretrains on demand, trains jointly, and keeps the best-validation state."""
    name = "train"
    description = "Train a model and write checkpoint.zip, train_log.csv and loss_log.csv"
    input_model = TrainInput
    output_model = TrainOutput

    async def execute(self, input_data: BaseCommandInput) -> CommandResponse:
        started = time.perf_counter()
        overrides = {k: getattr(input_data, k) for k in TrainConfig.model_fields}
        cfg = resolve_train_config(input_data.config, overrides)
        snapshots, meta = read_dataset(input_data.dataset)
        result = train(snapshots, cfg, meta.grid, meta.slots_per_day, meta.start_dow)

        checkpoint = output_path(input_data.output_dir, CHECKPOINT_FILE)
        log = output_path(input_data.output_dir, LOG_FILE)
        save_checkpoint(checkpoint, result.state)
        write_history_csv(log, result.history)
        losses = output_path(input_data.output_dir, LOSS_FILE)
        write_loss_csv(losses, result.history)
        record_run(
            self.name, input_data.output_dir, started,
            [f"{input_data.dataset}/{SNAPSHOTS_FILE}", f"{input_data.dataset}/{META_FILE}"],
            [checkpoint, log, losses],
            config_path=input_data.config,
            seed=cfg.seed,
        )
        response = CommandResponse.from_model(TrainOutput(
            best_epoch=result.state.epoch,
            best_phase=result.state.phase,
            best_val_loss=result.best_val_loss,
            epochs_run=sum(1 for row in result.history if row.epoch > 0),
            outputs=[str(checkpoint), str(log), str(losses)],
        ))
        return response.with_table(
            "Training history (last rows)",
            ["phase", "epoch", "train_loss", "val_loss", "seconds"],
            [[r.phase, r.epoch, r.train_loss, r.val_loss, r.seconds] for r in result.history[-10:]],
        )
