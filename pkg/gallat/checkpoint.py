"""Checkpoint files: a zip of ``.npy`` arrays plus a ``meta.json`` member.

Member order, timestamps and JSON key order are fixed, so two identical
training runs write byte-identical checkpoints.
"""
import io
import json
import logging
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Dict, Union

import numpy as np

from gallat.config import TrainConfig
from gallat.ddw_graph import GridSpec
from gallat.errors import DataFormatError
from gallat.features import FeatureConfig, FeatureScaler
from gallat.training import ModelState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_MEMBER = "meta.json"
FIXED_DATE = (1980, 1, 1, 0, 0, 0)
GROUPS = ("params", "adam_m", "adam_v")


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def state_meta(state: ModelState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": state.config.model_dump(),
        "features": state.features.model_dump(),
        "grid": state.grid.model_dump(),
        "scaler": {
            "n_rows": state.scaler.n_rows,
            "n_cols": state.scaler.n_cols,
            "mean": list(state.scaler.mean),
            "std": list(state.scaler.std),
        },
        "D_max": state.D_max,
        "adam_t": state.adam_t,
        "epoch": state.epoch,
        "phase": state.phase,
        "rng_state": state.rng_state,
    }


def save_checkpoint(path: Union[str, Path], state: ModelState) -> None:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_member(META_MEMBER), json.dumps(state_meta(state), sort_keys=True, indent=2))
        for group in GROUPS:
            arrays: Dict[str, np.ndarray] = getattr(state, group)
            for name in sorted(arrays):
                zf.writestr(_member(f"{group}/{name}.npy"), _npy_bytes(arrays[name]))
    atomic_write_bytes(path, buf.getvalue())
    logger.info(f"[Checkpoint] wrote {path} (epoch {state.epoch}, phase {state.phase})")


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(META_MEMBER))
            groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in GROUPS}
            for name in zf.namelist():
                group, _, member = name.partition("/")
                if group in groups and member.endswith(".npy"):
                    with zf.open(name) as f:
                        groups[group][member[:-4]] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path} is not a gallat checkpoint: {e}") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint format {version}")
    return ModelState(
        config=TrainConfig(**meta["config"]),
        features=FeatureConfig(**meta["features"]),
        grid=GridSpec(**meta["grid"]),
        scaler=FeatureScaler(**meta["scaler"]),
        D_max=meta["D_max"],
        params=groups["params"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_t=meta["adam_t"],
        epoch=meta["epoch"],
        phase=meta["phase"],
        rng_state=meta["rng_state"],
    )
