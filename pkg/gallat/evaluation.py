"""Thresholded MAPE/MAE metrics, the history-average baseline and the chronological split."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gallat.ddw_graph import SnapshotGraph, stack_counts
from gallat.errors import ContractError, InsufficientHistoryError

if TYPE_CHECKING:
    from gallat.model import GallatModel, SnapshotSeries

logger = logging.getLogger(__name__)

THRESHOLDS = (0, 3, 5)
TASKS = ("demand", "od")
REPORT_COLUMNS = ["source", "task", "threshold", "mape", "mae", "count"]

Task = Literal["demand", "od"]


class ThresholdMetrics(BaseModel):
    threshold: int = Field(ge=0)
    mape: Optional[float] = Field(default=None, ge=0, description="None when no instance exceeds the threshold")
    mae: Optional[float] = Field(default=None, ge=0)
    count: int = Field(ge=0, description="Instances whose truth exceeds the threshold")


class MetricReport(BaseModel):
    """Metrics of one task for one predictor, one entry per threshold."""
    model_config = ConfigDict(extra="forbid")

    source: str = Field(description="Predictor name, e.g. 'gallat' or 'ha'")
    task: Task
    entries: List[ThresholdMetrics]

    @model_validator(mode="after")
    def _check_counts(self) -> "MetricReport":
        ordered = sorted(self.entries, key=lambda e: e.threshold)
        if any(b.count > a.count for a, b in zip(ordered, ordered[1:])):
            raise ValueError("instance counts must not increase with the threshold")
        return self

    def flat(self) -> Dict[str, Optional[float]]:
        """Keys ``task.metric.threshold`` (e.g. ``od.mape.3``) plus ``task.count.threshold``."""
        out: Dict[str, Optional[float]] = {}
        for e in self.entries:
            out[f"{self.task}.mape.{e.threshold}"] = e.mape
            out[f"{self.task}.mae.{e.threshold}"] = e.mae
            out[f"{self.task}.count.{e.threshold}"] = e.count
        return out


class SlotRange(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: int = Field(ge=0)
    stop: int = Field(ge=0)

    def __len__(self) -> int:
        return self.stop - self.start

    def slots(self) -> range:
        return range(self.start, self.stop)


class SplitSpec(BaseModel):
    """Chronological train / validation / test ranges covering every slot."""
    model_config = ConfigDict(frozen=True)

    train: SlotRange
    validation: SlotRange
    test: SlotRange


def metrics(pred: Sequence[float], truth: Sequence[float], k: float) -> Optional[Tuple[float, float]]:
    """(MAPE, MAE) over instances whose truth is strictly greater than ``k``; None if there are none."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise ContractError(f"metrics: {pred.size} predictions for {truth.size} truths")
    keep = truth > k
    if not keep.any():
        return None
    err = np.abs(pred[keep] - truth[keep])
    return float(np.mean(err / (truth[keep] + 1.0))), float(np.mean(err))


def metric_report(
    source: str, task: Task, pred: np.ndarray, truth: np.ndarray, thresholds: Sequence[int] = THRESHOLDS
) -> MetricReport:
    truth = np.asarray(truth, dtype=np.float64).ravel()
    entries = []
    for k in thresholds:
        result = metrics(pred, truth, k)
        mape, mae = result if result is not None else (None, None)
        entries.append(ThresholdMetrics(threshold=k, mape=mape, mae=mae, count=int((truth > k).sum())))
    return MetricReport(source=source, task=task, entries=entries)


def split(n_slots: int, l: int, test_days: int = 14, val_fraction: float = 0.1) -> SplitSpec:
    """Last ``test_days`` days for testing; the trailing floor(val_fraction) of the rest for validation."""
    n_test = test_days * l
    if n_slots <= n_test:
        raise ContractError(f"{n_slots} slots do not exceed the {test_days}-day test window ({n_test} slots)")
    remaining = n_slots - n_test
    n_val = int(np.floor(val_fraction * remaining))
    return SplitSpec(
        train=SlotRange(start=0, stop=remaining - n_val),
        validation=SlotRange(start=remaining - n_val, stop=remaining),
        test=SlotRange(start=remaining, stop=n_slots),
    )


def ha_matching_slots(target: int, l: int, history_end: int) -> List[int]:
    """Slots before ``history_end`` sharing the target's time of day and day of week."""
    period = 7 * l
    return list(range(target % period, min(history_end, target), period))


def ha_baseline(
    history: Sequence[SnapshotGraph], target: int, l: int, mode: Task, history_end: Optional[int] = None
) -> np.ndarray:
    """Element-wise mean of the matching snapshots (``od``) or of their out-degree vectors (``demand``)."""
    end = len(history) if history_end is None else min(history_end, len(history))
    matches = ha_matching_slots(target, l, end)
    if not matches:
        raise InsufficientHistoryError(f"no slot before {end} shares time of day and weekday with slot {target}")
    counts = stack_counts([history[t] for t in matches]).astype(np.float64)
    mean = counts.mean(axis=0)
    return mean.sum(axis=1) if mode == "demand" else mean


def evaluate_ha(
    snapshots: Sequence[SnapshotGraph], targets: Sequence[int], l: int, history_end: int,
    thresholds: Sequence[int] = THRESHOLDS,
) -> List[MetricReport]:
    """HA reports for both tasks; targets without a matching history slot are skipped."""
    preds: Dict[str, list] = {task: [] for task in TASKS}
    truths: Dict[str, list] = {task: [] for task in TASKS}
    skipped = 0
    for t in targets:
        try:
            od = ha_baseline(snapshots, t, l, "od", history_end)
        except InsufficientHistoryError:
            skipped += 1
            continue
        g = snapshots[t]
        preds["od"].append(od.ravel())
        truths["od"].append(g.counts.ravel())
        preds["demand"].append(od.sum(axis=1))
        truths["demand"].append(g.out_degree())
    if skipped:
        logger.warning(f"[Evaluate] HA skipped {skipped} targets without matching history")
    if not preds["od"]:
        raise InsufficientHistoryError("HA has no matching history for any target")
    return [
        metric_report("ha", task, np.concatenate(preds[task]), np.concatenate(truths[task]), thresholds)
        for task in TASKS
    ]


def evaluate_model(
    model: "GallatModel", series: "SnapshotSeries", targets: Sequence[int],
    thresholds: Sequence[int] = THRESHOLDS, threads: int = 1,
) -> List[MetricReport]:
    """Gallat reports for both tasks over ``targets``."""
    if not targets:
        raise InsufficientHistoryError("no evaluable target slot")

    def predict(t: int):
        return model.forward(series, t).to_prediction()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions = list(pool.map(predict, targets))
    else:
        predictions = [predict(t) for t in targets]
    demand_truth = np.concatenate([series[t].out_degree() for t in targets])
    od_truth = np.concatenate([series[t].counts.ravel() for t in targets])
    return [
        metric_report("gallat", "demand", np.concatenate([p.d_hat for p in predictions]), demand_truth, thresholds),
        metric_report("gallat", "od", np.concatenate([p.G_hat.ravel() for p in predictions]), od_truth, thresholds),
    ]


def write_reports_json(path: Union[str, Path], reports: Sequence[MetricReport]) -> None:
    """One object per source mapping ``task.metric.threshold`` keys to values."""
    grouped: Dict[str, Dict[str, Optional[float]]] = {}
    for r in reports:
        grouped.setdefault(r.source, {}).update(r.flat())
    Path(path).write_text(json.dumps(grouped, indent=2, sort_keys=True) + "\n")


def write_reports_csv(path: Union[str, Path], reports: Sequence[MetricReport]) -> None:
    rows = [
        {"source": r.source, "task": r.task, "threshold": e.threshold, "mape": e.mape, "mae": e.mae, "count": e.count}
        for r in reports
        for e in r.entries
    ]
    pd.DataFrame(rows, columns=REPORT_COLUMNS).to_csv(path, index=False)
