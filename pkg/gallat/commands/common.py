"""Loading helpers shared by the commands that read a checkpoint and a dataset."""
from typing import List, Tuple

from ..checkpoint import load_checkpoint
from ..data_pipeline import DatasetMeta, read_dataset
from ..ddw_graph import SnapshotGraph
from ..errors import ContractError
from ..training import ModelState


def load_pair(checkpoint: str, dataset: str) -> Tuple[ModelState, List[SnapshotGraph], DatasetMeta]:
    """Checkpoint and dataset, checked to describe the same grid and calendar."""
    state = load_checkpoint(checkpoint)
    snapshots, meta = read_dataset(dataset)
    if state.grid != meta.grid:
        raise ContractError(f"checkpoint grid {state.grid.n_rows}x{state.grid.n_cols} does not match the dataset grid")
    if state.features.l != meta.slots_per_day or state.features.start_dow != meta.start_dow:
        raise ContractError(
            f"checkpoint calendar (l={state.features.l}, start weekday {state.features.start_dow}) "
            f"does not match the dataset (l={meta.slots_per_day}, start weekday {meta.start_dow})"
        )
    return state, snapshots, meta
