"""Command that scores a checkpoint (and optionally the HA baseline) on the test split."""
import time
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..config import resolve_train_config
from ..data_pipeline import read_dataset
from ..errors import ConfigError
from ..evaluation import (
    THRESHOLDS,
    MetricReport,
    evaluate_ha,
    evaluate_model,
    split,
    write_reports_csv,
    write_reports_json,
)
from ..interfaces.command import BaseCommandInput, Command, CommandResponse, output_path
from ..manifest import record_run
from .common import load_pair

JSON_FILE = "metrics.json"
CSV_FILE = "metrics.csv"


class EvaluateInput(BaseCommandInput):
    """Input schema for the evaluate command."""
    model_config = ConfigDict(json_schema_extra={
        "examples": [
            {"checkpoint": "runs/a/checkpoint.zip", "dataset": "data/synth", "output_dir": "runs/a/eval", "baseline": "ha"},
            {"dataset": "data/synth", "output_dir": "runs/ha", "baseline": "ha"},
        ]
    })

    dataset: str = Field(description="Dataset directory")
    output_dir: str = Field(description="Directory for metrics.json and metrics.csv")
    checkpoint: Optional[str] = Field(default=None, description="checkpoint.zip to score")
    baseline: Optional[Literal["ha"]] = Field(default=None, description="Also score a baseline")
    threads: int = Field(default=1, ge=1, description="Worker threads for model predictions")


class EvaluateOutput(BaseModel):
    test_slots: List[int] = Field(description="First and one-past-last test slot")
    targets: int = Field(description="Test targets scored")
    metrics: Dict[str, Dict[str, Optional[float]]]
    outputs: List[str]


class EvaluateCommand(Command):
    """Thresholded MAPE/MAE on the chronological test split."""
    name = "evaluate"
    description = "Write MAPE/MAE reports (metrics.json, metrics.csv) for a checkpoint and/or the HA baseline"
    input_model = EvaluateInput
    output_model = EvaluateOutput

    async def execute(self, input_data: EvaluateInput) -> CommandResponse:
        started = time.perf_counter()
        if input_data.checkpoint is None and input_data.baseline is None:
            raise ConfigError("nothing to evaluate: pass --checkpoint and/or --baseline")
        reports: List[MetricReport] = []
        inputs = [input_data.dataset]
        if input_data.checkpoint is not None:
            state, snapshots, meta = load_pair(input_data.checkpoint, input_data.dataset)
            cfg = state.config
            inputs.append(input_data.checkpoint)
        else:
            snapshots, meta = read_dataset(input_data.dataset)
            cfg = resolve_train_config()
        spec = split(meta.n_slots, meta.slots_per_day, cfg.test_days, cfg.val_fraction)
        targets = list(spec.test.slots())
        if input_data.checkpoint is not None:
            model = state.model()
            targets = model.valid_targets(spec.test.start, spec.test.stop)
            reports += evaluate_model(model, model.series(snapshots), targets, THRESHOLDS, input_data.threads)
        if input_data.baseline == "ha":
            reports += evaluate_ha(snapshots, targets, meta.slots_per_day, spec.test.start, THRESHOLDS)

        json_path = output_path(input_data.output_dir, JSON_FILE)
        csv_path = output_path(input_data.output_dir, CSV_FILE)
        write_reports_json(json_path, reports)
        write_reports_csv(csv_path, reports)
        record_run(self.name, input_data.output_dir, started, inputs, [json_path, csv_path], seed=cfg.seed)

        metrics: Dict[str, Dict[str, Optional[float]]] = {}
        for r in reports:
            metrics.setdefault(r.source, {}).update(r.flat())
        response = CommandResponse.from_model(EvaluateOutput(
            test_slots=[spec.test.start, spec.test.stop],
            targets=len(targets),
            metrics=metrics,
            outputs=[str(json_path), str(csv_path)],
        ))
        return response.with_table(
            "Test metrics",
            ["source", "task", "threshold", "MAPE", "MAE", "count"],
            [[r.source, r.task, e.threshold, e.mape, e.mae, e.count] for r in reports for e in r.entries],
        )

    def render(self, response: CommandResponse, console) -> None:
        # the table already carries every metric
        for item in response.content:
            if item.type == "table":
                super().render(CommandResponse(content=[item]), console)
