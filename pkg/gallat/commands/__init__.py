"""Command exports."""

from .ingest import IngestCommand
from .synth import SynthCommand
from .train import TrainCommand
from .predict import PredictCommand
from .evaluate import EvaluateCommand
from .params import ParamsCommand

__all__ = [
    "IngestCommand",
    "SynthCommand",
    "TrainCommand",
    "PredictCommand",
    "EvaluateCommand",
    "ParamsCommand",
]
